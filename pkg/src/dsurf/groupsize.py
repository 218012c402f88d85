"""Group-size-dependent detectability via class-replicated fitting.

Observed group sizes are binned into M classes chosen so detectability
is roughly constant within a class.  The segment table is replicated
class-major (all segments at the first class, then the second, ...),
the response in replicate m being the number of groups of class m in
each segment, with per-row offsets log(area x detectability at that
class).  A factor-smooth lets each class deviate from a shared surface;
fitting happens once, jointly, so per-class abundances share a
coefficient covariance.

Individual abundance combines the per-class group abundances with the
mean observed size per class:

    N = sum_m gbar_m N_m
    Var(N) = gbar' Cov(N_m) gbar + sum_m Var(Gbar_m) N_m^2

where Var(Gbar_m) is the within-class empirical variance of sizes
divided by the class count (the variance of the class mean; zero when
a class holds a single size).
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from .abundance import AbundanceResult
from .data import Segment
from .detection import SIZE_CLASS, detection_kappa
from .exceptions import ValidationError
from .smooth import FACTOR_SMOOTH, build_design
from .varprop import build_model_frame, fit_varprop
from .gam import optimize_lambda


def _bin_label(lo, hi):
    return str(lo) if lo == hi else f"{lo}-{hi}"


@dataclass(frozen=True)
class GroupSizeScheme:
    """Size classes with their observed-mean bookkeeping."""

    bins: tuple          # ((lo, hi), ...) inclusive integer ranges
    labels: tuple
    g_bar: tuple         # mean observed size per class
    var_g_bar: tuple     # variance of the class mean
    counts: tuple        # observations per class

    @property
    def M(self):
        return len(self.bins)

    def class_of(self, size):
        for (lo, hi), label in zip(self.bins, self.labels):
            if lo <= size <= hi:
                return label
        raise ValidationError(f"group size {size} falls outside every class")

    def to_dict(self):
        return {
            "bins": [[int(lo), int(hi)] for lo, hi in self.bins],
            "labels": list(self.labels),
            "g_bar": [float(v) for v in self.g_bar],
            "var_g_bar": [float(v) for v in self.var_g_bar],
            "counts": [int(c) for c in self.counts],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            bins=tuple((int(lo), int(hi)) for lo, hi in d["bins"]),
            labels=tuple(d["labels"]),
            g_bar=tuple(float(v) for v in d["g_bar"]),
            var_g_bar=tuple(float(v) for v in d["var_g_bar"]),
            counts=tuple(int(c) for c in d["counts"]),
        )


def make_scheme(observations, bins):
    """Bin observed group sizes into classes.

    ``bins`` is a sequence of inclusive (lo, hi) integer ranges; a bare
    integer means a single-size class.  Ranges must not overlap, every
    observed size must fall in some range, and no class may be empty.
    """
    norm = []
    for b in bins:
        if isinstance(b, (int, np.integer)):
            norm.append((int(b), int(b)))
        else:
            lo, hi = b
            norm.append((int(lo), int(hi)))
    issues = []
    for (lo, hi) in norm:
        if lo > hi:
            issues.append(f"class ({lo}, {hi}) has lo > hi")
    for i, (lo1, hi1) in enumerate(norm):
        for lo2, hi2 in norm[i + 1:]:
            if max(lo1, lo2) <= min(hi1, hi2):
                issues.append(
                    f"classes ({lo1}, {hi1}) and ({lo2}, {hi2}) overlap"
                )
    if issues:
        raise ValidationError(issues)
    norm.sort()
    sizes = np.asarray([o.group_size for o in observations], dtype=float)
    if sizes.size == 0:
        raise ValidationError("no observations to bin")
    per_class = [[] for _ in norm]
    for g in sizes:
        hit = False
        for m, (lo, hi) in enumerate(norm):
            if lo <= g <= hi:
                per_class[m].append(g)
                hit = True
                break
        if not hit:
            issues.append(f"group size {g:g} is not covered by any class")
    empty = [
        _bin_label(lo, hi)
        for (lo, hi), members in zip(norm, per_class)
        if not members
    ]
    issues += [f"class {lab} holds no observations" for lab in empty]
    if issues:
        raise ValidationError(issues)
    g_bar, var_g_bar, counts = [], [], []
    for members in per_class:
        arr = np.asarray(members)
        g_bar.append(float(arr.mean()))
        var_g_bar.append(
            float(arr.var(ddof=1) / arr.size) if arr.size > 1 else 0.0
        )
        counts.append(int(arr.size))
    return GroupSizeScheme(
        bins=tuple(norm),
        labels=tuple(_bin_label(lo, hi) for lo, hi in norm),
        g_bar=tuple(g_bar),
        var_g_bar=tuple(var_g_bar),
        counts=tuple(counts),
    )


def class_counts(observations, segments, scheme):
    """Per-class group counts per segment, {class label: array}."""
    index = {s.segment_id: i for i, s in enumerate(segments)}
    out = {lab: np.zeros(len(segments)) for lab in scheme.labels}
    for o in observations:
        if o.segment_id not in index:
            raise ValidationError(
                f"observation references unknown segment {o.segment_id!r}"
            )
        out[scheme.class_of(o.group_size)][index[o.segment_id]] += 1
    return out


def replicate_segments(segments, scheme, counts=None, observations=None):
    """The M-fold class-major segment table.

    Row (m, i) repeats segment i with the class label in its effort
    covariates and the count of class-m groups as its response.  The
    total count over all rows equals the original observation count.
    """
    if counts is None:
        if observations is None:
            raise ValidationError("supply per-class counts or observations")
        counts = class_counts(observations, segments, scheme)
    rows = []
    for lab in scheme.labels:
        cnt = counts[lab]
        for i, s in enumerate(segments):
            rows.append(
                Segment(
                    segment_id=s.segment_id,
                    transect_id=s.transect_id,
                    area=s.area,
                    effort={**s.effort, SIZE_CLASS: lab},
                    density=dict(s.density),
                    count=int(cnt[i]),
                    length=s.length,
                )
            )
    return rows


def _resolve_class_smooths(smooth_specs, scheme):
    out = []
    for sp in smooth_specs:
        if (
            sp.smooth_type == FACTOR_SMOOTH
            and sp.factor == SIZE_CLASS
            and sp.factor_levels is None
        ):
            sp = replace(sp, factor_levels=scheme.labels)
        out.append(sp)
    return out


def fit_groupsize_dsm(
    segments,
    observations,
    scheme,
    detection_fit,
    smooth_specs,
    family,
    *,
    method="varprop",
    outer_maxiter=200,
):
    """Joint fit over the class-replicated table.

    The detection model must include the size class as a covariate with
    every scheme class among its levels.  Counts of different classes in
    the same segment are treated as independent given the surface.
    """
    if method not in ("varprop", "naive"):
        raise ValidationError(f"unknown method {method!r}")
    spec = detection_fit.spec
    if SIZE_CLASS not in spec.scale_covariates:
        raise ValidationError(
            f"detection model has no {SIZE_CLASS!r} covariate; refit the "
            "detection function with the size class before the group model"
        )
    fitted_levels = (spec.factor_levels or {}).get(SIZE_CLASS, ())
    missing = [lab for lab in scheme.labels if lab not in fitted_levels]
    if missing:
        raise ValidationError(
            f"size classes absent from the detection fit: {missing}"
        )
    counts = class_counts(observations, segments, scheme)
    frame = build_model_frame(
        segments, detection_fit,
        group_classes=scheme.labels, class_counts=counts,
    )
    specs = _resolve_class_smooths(smooth_specs, scheme)
    bundle = build_design(frame.covariates, specs, frame.n_rows)
    naive = optimize_lambda(
        bundle, frame.y, frame.offset, family,
        outer_maxiter=outer_maxiter, frame=frame,
    )
    if method == "naive":
        return naive
    kappa = detection_kappa(detection_fit, segments, group_classes=scheme.labels)
    return fit_varprop(
        bundle, frame, family, kappa, detection_fit.V_theta,
        naive=naive, outer_maxiter=outer_maxiter,
    )


def predict_by_class(fit, grid, scheme):
    """Per-class abundances and their joint delta-method covariance."""
    beta = fit.coef_full
    V = fit.V_full
    Ns, us, denss = [], [], []
    areas = ids = None
    for lab in scheme.labels:
        cells = [
            replace(c, density={**c.density, SIZE_CLASS: lab}) for c in grid
        ]
        X, areas, ids = _class_design(fit, cells)
        dens = np.exp(X @ beta)
        Ns.append(float(areas @ dens))
        us.append(X.T @ (areas * dens))
        denss.append(dens)
    U = np.column_stack(us)
    cov_N = U.T @ V @ U
    cov_N = 0.5 * (cov_N + cov_N.T)
    return np.asarray(Ns), cov_N, np.column_stack(denss), areas, ids


def _class_design(fit, cells):
    # PredictionCell density maps hold the class label (a string); the
    # generic grid reader coerces to float, so assemble columns directly.
    names = sorted(cells[0].density)
    cols = {}
    for name in names:
        vals = [c.density[name] for c in cells]
        if all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in vals):
            cols[name] = np.asarray(vals, dtype=float)
        else:
            cols[name] = np.asarray([str(v) for v in vals], dtype=object)
    areas = np.asarray([c.area for c in cells], dtype=float)
    ids = tuple(c.cell_id for c in cells)
    X = fit.design.build_matrix(cols, len(cells))
    return X, areas, ids


def combine_group_abundance(per_class_N, cov_N, scheme, *, per_cell=None):
    """Individual abundance from per-class group abundances.

    ``per_cell`` optionally carries (densities[M columns], areas,
    cell_ids) so the combined result keeps a density map (the class
    densities weighted by mean class size, summed cell-wise).
    """
    N_m = np.asarray(per_class_N, dtype=float)
    cov_N = np.asarray(cov_N, dtype=float)
    M = scheme.M
    if N_m.shape != (M,) or cov_N.shape != (M, M):
        raise ValidationError(
            f"expected {M} class abundances with an {M}x{M} covariance, got "
            f"{N_m.shape} and {cov_N.shape}"
        )
    g = np.asarray(scheme.g_bar)
    vg = np.asarray(scheme.var_g_bar)
    N = float(g @ N_m)
    var_surface = float(g @ cov_N @ g)
    var_mean_size = float(np.sum(vg * N_m * N_m))
    var = var_surface + var_mean_size
    if per_cell is not None:
        denss, areas, ids = per_cell
        dens = np.asarray(denss) @ g
    else:
        dens = np.asarray([N / 1.0])
        areas = np.asarray([1.0])
        ids = ("combined",)
    cv = math.sqrt(var) / N if N > 0 else float("nan")
    per_class = {
        "labels": list(scheme.labels),
        "N_m": [float(v) for v in N_m],
        "g_bar": [float(v) for v in g],
        "var_g_bar": [float(v) for v in vg],
        "cov_N": [[float(v) for v in row] for row in cov_N],
        "var_surface": var_surface,
        "var_mean_size": var_mean_size,
    }
    return AbundanceResult(
        N_hat=N,
        per_cell_density=dens,
        cell_ids=ids,
        areas=areas,
        method="delta",
        variance=var,
        cv=cv,
        components={"var_surface": var_surface, "var_mean_size": var_mean_size},
        per_class=per_class,
    )


def predict_group_abundance(fit, grid, scheme):
    """Per-class prediction and total-variance combination in one step."""
    N_m, cov_N, denss, areas, ids = predict_by_class(fit, grid, scheme)
    return combine_group_abundance(
        N_m, cov_N, scheme, per_cell=(denss, areas, ids)
    )
