"""Carrying detection-parameter uncertainty into the segment count model.

The segment model offsets each expected count by log(area x detectability).
Detectability is itself estimated, so the offset is uncertain.  To carry
that uncertainty forward, the per-row sensitivities of log detectability
to the detection parameters (the kappa columns) join the design matrix,
and their coefficients delta receive a fixed gaussian prior centred at
zero with covariance equal to the detection parameters' sampling
covariance.  On the penalized-deviance scale used by the fitting engine
the prior becomes a penalty block: with a multiplier pinned to the scale
parameter phi, the implied prior covariance phi (phi V^-1)^-1 = V is
independent of phi, as required for the prior to stay calibrated.

Because the block multiplier tracks phi, the usual Pearson plug-in for
the scale parameter is unavailable; instead phi is profiled explicitly
by golden-section search on the restricted-likelihood criterion over
log phi (families with a free dispersion only; the poisson scale is
fixed at one).  The reported smoothing level for the delta block is
1/phi*, the bookkeeping convention that keeps prior covariance and
deviance scaling consistent.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .data import density_values, effort_values
from .detection import SIZE_CLASS, detection_kappa, segment_covariates
from .exceptions import ValidationError
from .families import POISSON, TWEEDIE, Family
from .gam import GamFit, optimize_lambda
from .smooth import DesignBundle, PenaltyBlock, build_design

DELTA_LABEL = "detection"
PHI_RANGE = (0.05, 50.0)
PHI_TOL = 1e-3
MAX_RANGE_EXPANSIONS = 3


@dataclass
class ModelFrame:
    """Row-wise data for the segment count model.

    Rows follow the segment order; with group-size classes they are
    replicated class-major (all segments at the first class, then the
    second...), matching the kappa row layout.
    """

    segment_ids: tuple
    row_classes: tuple | None
    y: np.ndarray
    areas: np.ndarray
    p_hat: np.ndarray
    offset: np.ndarray
    covariates: dict
    n_rows: int

    def to_dict(self):
        def col(v):
            return [x.item() if isinstance(x, np.generic) else x for x in v]

        return {
            "segment_ids": list(self.segment_ids),
            "row_classes": None if self.row_classes is None else list(self.row_classes),
            "y": [float(v) for v in self.y],
            "areas": [float(v) for v in self.areas],
            "p_hat": [float(v) for v in self.p_hat],
            "offset": [float(v) for v in self.offset],
            "covariates": {k: col(v) for k, v in sorted(self.covariates.items())},
            "n_rows": self.n_rows,
        }

    @classmethod
    def from_dict(cls, d):
        covs = {}
        for k, v in d["covariates"].items():
            arr = np.asarray(v)
            if arr.dtype.kind in "OUS":
                arr = np.asarray(v, dtype=object)
            covs[k] = arr
        return cls(
            segment_ids=tuple(d["segment_ids"]),
            row_classes=None if d["row_classes"] is None else tuple(d["row_classes"]),
            y=np.asarray(d["y"], dtype=float),
            areas=np.asarray(d["areas"], dtype=float),
            p_hat=np.asarray(d["p_hat"], dtype=float),
            offset=np.asarray(d["offset"], dtype=float),
            covariates=covs,
            n_rows=int(d["n_rows"]),
        )


def _merged_covariates(segments):
    out = {}
    names = set()
    for s in segments:
        names.update(s.effort)
        names.update(s.density)
    for name in sorted(names):
        in_effort = all(name in s.effort for s in segments)
        in_density = all(name in s.density for s in segments)
        if in_density:
            vals = density_values(segments, name)
            if in_effort:
                other = effort_values(segments, name)
                same = all(
                    (a == b) if isinstance(a, str) or isinstance(b, str)
                    else np.isclose(float(a), float(b))
                    for a, b in zip(vals, other)
                )
                if not same:
                    raise ValidationError(
                        f"covariate {name!r} appears in both effort and density "
                        "roles with conflicting values"
                    )
        elif in_effort:
            vals = effort_values(segments, name)
        else:
            raise ValidationError(
                f"covariate {name!r} is missing from some segments"
            )
        arr = np.asarray(vals)
        if arr.dtype.kind in "OUS":
            arr = np.asarray(vals, dtype=object)
        else:
            arr = arr.astype(float)
        out[name] = arr
    return out


def build_model_frame(segments, detection_fit, group_classes=None, class_counts=None):
    """Assemble the response, offset and covariate columns per row.

    ``group_classes`` with ``class_counts`` (mapping class label to a
    per-segment count array) produces the class-major replicated frame
    used for group-size-dependent detectability.
    """
    segments = list(segments)
    n = len(segments)
    if n == 0:
        raise ValidationError("no segments supplied")
    spec = detection_fit.spec
    det_names = [c for c in spec.scale_covariates if c != SIZE_CLASS]
    base_det = segment_covariates(segments, det_names)
    covs = _merged_covariates(segments)
    areas = np.asarray([s.area for s in segments], dtype=float)
    seg_ids = tuple(s.segment_id for s in segments)

    if group_classes is None:
        if SIZE_CLASS in spec.scale_covariates:
            raise ValidationError(
                "detection model uses the group size class; supply "
                "group_classes and class_counts"
            )
        counts = [s.count for s in segments]
        if any(c is None for c in counts):
            raise ValidationError(
                "segment counts are unset; aggregate observations onto "
                "segments first"
            )
        y = np.asarray(counts, dtype=float)
        p_hat = detection_fit.p(base_det if det_names else None, n)
        row_classes = None
        all_areas = areas
        all_ids = seg_ids
    else:
        classes = [str(c) for c in group_classes]
        if class_counts is None or sorted(class_counts) != sorted(classes):
            raise ValidationError(
                "class_counts must provide one count array per group class"
            )
        if SIZE_CLASS not in spec.scale_covariates:
            raise ValidationError(
                "group classes supplied but the detection model has no "
                f"{SIZE_CLASS!r} covariate"
            )
        y_blocks, p_blocks = [], []
        for cls in classes:
            counts = np.asarray(class_counts[cls], dtype=float)
            if counts.shape != (n,):
                raise ValidationError(
                    f"class_counts[{cls!r}] must have one entry per segment"
                )
            y_blocks.append(counts)
            covs_cls = {**base_det, SIZE_CLASS: np.full(n, cls, dtype=object)}
            p_blocks.append(detection_fit.p(covs_cls, n))
        y = np.concatenate(y_blocks)
        p_hat = np.concatenate(p_blocks)
        m = len(classes)
        covs = {k: np.tile(v, m) for k, v in covs.items()}
        covs[SIZE_CLASS] = np.asarray(
            [cls for cls in classes for _ in range(n)], dtype=object
        )
        row_classes = tuple(cls for cls in classes for _ in range(n))
        all_areas = np.tile(areas, m)
        all_ids = seg_ids * m

    if np.any(p_hat <= 0) or not np.all(np.isfinite(p_hat)):
        raise ValidationError("estimated detectability is zero or non-finite")
    offset = np.log(all_areas * p_hat)
    return ModelFrame(
        segment_ids=all_ids,
        row_classes=row_classes,
        y=y,
        areas=all_areas,
        p_hat=p_hat,
        offset=offset,
        covariates=covs,
        n_rows=len(y),
    )


def prior_precision(V_theta, ridge_rel=1e-8, cond_limit=1e12):
    """Invert the detection covariance for use as a penalty block.

    Near-singular covariances get a relative ridge (with a warning) so
    the block stays positive definite.
    """
    V = 0.5 * (np.asarray(V_theta, dtype=float) + np.asarray(V_theta, dtype=float).T)
    eig = np.linalg.eigvalsh(V)
    ridged = False
    if eig[0] <= 0 or eig[-1] / max(eig[0], 1e-300) > cond_limit:
        ridge = ridge_rel * float(np.trace(V)) / V.shape[0]
        V = V + ridge * np.eye(V.shape[0])
        ridged = True
        warnings.warn(
            "detection covariance is near-singular; adding relative ridge "
            f"{ridge_rel:g} before inversion",
            stacklevel=2,
        )
    S = np.linalg.inv(V)
    return 0.5 * (S + S.T), V, ridged


def augment_design(bundle, kappa_values, V_theta, label=DELTA_LABEL):
    """Append the sensitivity columns and their prior-covariance block."""
    kappa_values = np.asarray(kappa_values, dtype=float)
    if kappa_values.shape[0] != bundle.X.shape[0]:
        raise ValidationError(
            f"kappa has {kappa_values.shape[0]} rows for a design with "
            f"{bundle.X.shape[0]} rows"
        )
    if any(pb.label == label for pb in bundle.penalties):
        raise ValidationError(f"penalty label {label!r} already in use")
    q = kappa_values.shape[1]
    S_delta, V_prior, ridged = prior_precision(V_theta)
    if S_delta.shape != (q, q):
        raise ValidationError(
            f"detection covariance is {S_delta.shape} for {q} sensitivity columns"
        )
    p = bundle.n_cols
    block = PenaltyBlock(
        S=S_delta,
        start=p,
        stop=p + q,
        label=label,
        free=False,
        scale_with_phi=True,
    )
    aug = DesignBundle(
        X=np.hstack([bundle.X, kappa_values]),
        penalties=[*bundle.penalties, block],
        terms=list(bundle.terms),
        column_labels=[*bundle.column_labels, *(f"delta.{j}" for j in range(q))],
        n_cols=p + q,
    )
    aug.finalize_groups()
    return aug, V_prior, ridged


def _golden_max(f, lo, hi, tol):
    inv = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv * (b - a)
    d = a + inv * (b - a)
    fc, fd = f(c), f(d)
    while (b - a) > tol:
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - inv * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


@dataclass
class VarpropFit:
    """Joint fit of the surface coefficients and the detection shift."""

    gam: GamFit
    naive: GamFit | None
    kappa: object
    V_theta_prior: np.ndarray
    phi_star: float
    delta_slice: slice
    phi_profile: tuple = ()
    fit_warnings: tuple = ()

    @property
    def lambda_delta(self):
        return 1.0 / self.phi_star

    @property
    def delta_hat(self):
        return self.gam.beta_hat[self.delta_slice]

    @property
    def coef_full(self):
        return self.gam.beta_hat

    @property
    def V_full(self):
        return self.gam.V_beta

    @property
    def delta_dim(self):
        return self.delta_slice.stop - self.delta_slice.start

    @property
    def design(self):
        return self.gam.design

    @property
    def family(self):
        return self.gam.family

    @property
    def frame(self):
        return self.gam.frame

    @property
    def phi_hat(self):
        return self.gam.phi_hat

    @property
    def edf(self):
        return self.gam.edf

    @property
    def edf_blocks(self):
        return self.gam.edf_blocks

    @property
    def reml(self):
        return self.gam.reml

    def delta_prior_cov(self):
        return self.V_theta_prior

    def delta_posterior_cov(self):
        return self.gam.V_beta[self.delta_slice, self.delta_slice]


def fit_varprop(
    bundle,
    frame,
    family,
    kappa,
    V_theta,
    *,
    naive=None,
    phi_range=PHI_RANGE,
    phi_tol=PHI_TOL,
    max_expansions=MAX_RANGE_EXPANSIONS,
    outer_maxiter=200,
):
    """Fit the count model with the detection-shift block included.

    ``naive`` (the fit without the shift block) supplies warm starts and,
    for the tweedie family, the power kept fixed during propagation.  It
    is fitted here when not supplied.
    """
    if naive is None:
        naive = optimize_lambda(
            bundle, frame.y, frame.offset, family,
            outer_maxiter=outer_maxiter, frame=frame,
        )
    fam = naive.family  # carries the selected tweedie power, if any
    warm = np.log(
        [naive.lambda_hat[pb.label] for pb in bundle.penalties if pb.free]
    ) if any(pb.free for pb in bundle.penalties) else None

    kappa_values = kappa.values if hasattr(kappa, "values") else np.asarray(kappa)
    aug, V_prior, _ = augment_design(bundle, kappa_values, V_theta)
    fitw = []

    if fam.kind == POISSON:
        gam = optimize_lambda(
            aug, frame.y, frame.offset, fam,
            fixed_phi=1.0, lambda0=warm, outer_maxiter=outer_maxiter, frame=frame,
        )
        phi_star = 1.0
        profile = ((1.0, gam.reml),)
    else:
        cache = {}
        state = {"lam": warm}

        def crit(logphi):
            key = round(logphi, 12)
            if key not in cache:
                fit = optimize_lambda(
                    aug, frame.y, frame.offset, fam,
                    fixed_phi=math.exp(logphi), lambda0=state["lam"],
                    outer_maxiter=outer_maxiter, frame=frame,
                )
                if any(pb.free for pb in aug.penalties):
                    state["lam"] = np.log(
                        [fit.lambda_hat[pb.label] for pb in aug.penalties if pb.free]
                    )
                cache[key] = fit
            return cache[key].reml

        lo, hi = math.log(phi_range[0]), math.log(phi_range[1])
        expansions = 0
        while True:
            x_star = _golden_max(crit, lo, hi, phi_tol)
            width = hi - lo
            if x_star - lo <= 2.0 * phi_tol and expansions < max_expansions:
                lo -= width
                expansions += 1
                continue
            if hi - x_star <= 2.0 * phi_tol and expansions < max_expansions:
                hi += width
                expansions += 1
                continue
            break
        if x_star - lo <= 2.0 * phi_tol or hi - x_star <= 2.0 * phi_tol:
            fitw.append(
                "scale-parameter search ended at the boundary of its "
                f"(already expanded) range [{math.exp(lo):.3g}, {math.exp(hi):.3g}]"
            )
        phi_star = math.exp(x_star)
        gam = optimize_lambda(
            aug, frame.y, frame.offset, fam,
            fixed_phi=phi_star, lambda0=state["lam"],
            outer_maxiter=outer_maxiter, frame=frame,
        )
        profile = tuple(
            sorted((math.exp(k), f.reml) for k, f in cache.items())
        ) + ((phi_star, gam.reml),)

    p_base = bundle.n_cols
    return VarpropFit(
        gam=gam,
        naive=naive,
        kappa=kappa,
        V_theta_prior=V_prior,
        phi_star=float(phi_star),
        delta_slice=slice(p_base, aug.n_cols),
        phi_profile=profile,
        fit_warnings=tuple(fitw) + gam.warnings,
    )


def fit_dsm(
    segments,
    detection_fit,
    smooth_specs,
    family,
    *,
    method="varprop",
    group_classes=None,
    class_counts=None,
    outer_maxiter=200,
):
    """End-to-end second stage: frame, design, and the chosen fit.

    ``method`` is "varprop" (detection uncertainty propagated, the
    default) or "naive" (offset treated as known).
    """
    if method not in ("varprop", "naive"):
        raise ValidationError(f"unknown method {method!r}")
    frame = build_model_frame(
        segments, detection_fit,
        group_classes=group_classes, class_counts=class_counts,
    )
    missing = sorted(
        {c for sp in smooth_specs for c in sp.covariates} - set(frame.covariates)
    )
    if missing:
        raise ValidationError(
            f"smooth covariates missing from the segment table: {missing}"
        )
    bundle = build_design(frame.covariates, smooth_specs, frame.n_rows)
    naive = optimize_lambda(
        bundle, frame.y, frame.offset, family,
        outer_maxiter=outer_maxiter, frame=frame,
    )
    if method == "naive":
        return naive
    kappa = detection_kappa(detection_fit, segments, group_classes=group_classes)
    return fit_varprop(
        bundle, frame, family, kappa, detection_fit.V_theta,
        naive=naive, outer_maxiter=outer_maxiter,
    )
