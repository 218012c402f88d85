"""Detection functions for line-transect distance sampling.

Two forms are supported. Half-normal: pi(y) = exp(-y^2 / (2 sigma^2)).
Hazard-rate: pi(y) = 1 - exp(-(y / sigma)^-b) with shape b > 0. The
scale depends log-linearly on detectability covariates, factors entering
through reference-level indicator coding, so the parameter vector is

    theta = (log scale intercept, covariate coefficients..., log shape)

with the shape term present only for the hazard-rate form. The average
detection probability within the truncation distance w,

    p(theta; z) = (1/w) * integral_0^w pi(y; sigma(z)) dy,

is evaluated with a fixed 64-node Gauss-Legendre rule so that p is a
smooth, deterministic function of theta (finite differences through it
are reliable). The conditional log likelihood of the observed distances
is sum_s log(pi(y_s)/p_s); the constant -n log w is omitted.
"""

import math
from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np
from scipy.optimize import minimize

from .data import effort_values
from .exceptions import NumericalError, ValidationError
from .numdiff import fd_hessian, fd_steps

HALF_NORMAL = "half-normal"
HAZARD_RATE = "hazard-rate"
SIZE_CLASS = "size_class"

_GL_X, _GL_W = np.polynomial.legendre.leggauss(64)


@dataclass(frozen=True)
class DetectionSpec:
    """Detection model declaration.

    ``factor_levels`` is filled in when the model is resolved against
    data; the first level of each factor is the reference.
    """

    form: str
    truncation: float
    scale_covariates: tuple = ()
    factor_levels: Mapping[str, tuple] | None = None

    def __post_init__(self):
        if self.form not in (HALF_NORMAL, HAZARD_RATE):
            raise ValidationError(
                f"unknown detection form {self.form!r}; expected "
                f"{HALF_NORMAL!r} or {HAZARD_RATE!r}"
            )
        if not np.isfinite(self.truncation) or self.truncation <= 0:
            raise ValidationError(
                f"truncation must be finite and > 0, got {self.truncation!r}"
            )
        object.__setattr__(self, "scale_covariates", tuple(self.scale_covariates))

    @property
    def resolved(self):
        return self.factor_levels is not None or not self.scale_covariates

    def param_names(self):
        if not self.resolved:
            raise ValidationError("detection spec not resolved against data yet")
        names = ["log_scale"]
        levels = self.factor_levels or {}
        for cov in self.scale_covariates:
            if cov in levels:
                names += [f"{cov}={lev}" for lev in levels[cov][1:]]
            else:
                names.append(cov)
        if self.form == HAZARD_RATE:
            names.append("log_shape")
        return names


@dataclass(frozen=True)
class DetectionData:
    """Observed distances with per-observation covariate columns."""

    distances: np.ndarray
    covariates: Mapping[str, np.ndarray]
    group_sizes: np.ndarray

    @property
    def n(self):
        return len(self.distances)


def build_detection_data(observations, segments, covariate_names=(), size_class=None):
    """Assemble fitting input, inheriting effort covariates via segments.

    ``size_class`` optionally supplies a per-observation group-size class
    label column (used when detectability depends on group size).
    """
    by_id = {s.segment_id: s for s in segments}
    missing = sorted({o.segment_id for o in observations} - set(by_id))
    if missing:
        raise ValidationError(
            [f"observation references unknown segment {sid!r}" for sid in missing]
        )
    covs = {}
    for name in covariate_names:
        if name == SIZE_CLASS:
            continue
        column = []
        for o in observations:
            seg = by_id[o.segment_id]
            if name not in seg.effort:
                raise ValidationError(
                    f"segment {seg.segment_id}: missing effort covariate {name!r}"
                )
            column.append(seg.effort[name])
        if all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in column):
            covs[name] = np.asarray(column, dtype=float)
        else:
            covs[name] = np.asarray([str(v) for v in column], dtype=object)
    if size_class is not None:
        covs[SIZE_CLASS] = np.asarray(size_class, dtype=object)
    return DetectionData(
        distances=np.asarray([o.distance for o in observations], dtype=float),
        covariates=covs,
        group_sizes=np.asarray([o.group_size for o in observations], dtype=float),
    )


def resolve_spec(spec, covariates, level_order=None):
    """Freeze factor levels into the spec from observed covariate columns.

    Columns with non-numeric values are treated as factors. Levels come
    from ``level_order`` when given (e.g. a binning's label order),
    otherwise sorted; every level must occur at least once.
    """
    level_order = level_order or {}
    levels = {}
    for cov in spec.scale_covariates:
        if cov not in covariates:
            raise ValidationError(f"detection covariate {cov!r} absent from data")
        col = covariates[cov]
        if np.asarray(col).dtype.kind in "fiu":
            continue
        observed = set(str(v) for v in col)
        if cov in level_order:
            declared = [str(v) for v in level_order[cov]]
            empty = sorted(set(declared) - observed)
            if empty:
                raise ValidationError(
                    [f"factor {cov!r}: no observations at level {lev!r}" for lev in empty]
                )
            extra = sorted(observed - set(declared))
            if extra:
                raise ValidationError(
                    [f"factor {cov!r}: undeclared level {lev!r}" for lev in extra]
                )
            levels[cov] = tuple(declared)
        else:
            levels[cov] = tuple(sorted(observed))
    return replace(spec, factor_levels=levels if spec.scale_covariates else None)


def scale_design(spec, covariates, n):
    """Rows of the log-scale linear predictor design, intercept first."""
    cols = [np.ones(n)]
    levels = spec.factor_levels or {}
    for cov in spec.scale_covariates:
        if cov not in covariates:
            raise ValidationError(f"detection covariate {cov!r} absent from data")
        col = covariates[cov]
        if cov in levels:
            vals = np.asarray([str(v) for v in np.asarray(col, dtype=object)])
            known = levels[cov]
            unknown = sorted(set(vals) - set(known))
            if unknown:
                raise ValidationError(
                    [f"factor {cov!r}: level {u!r} not in detection model" for u in unknown]
                )
            for lev in known[1:]:
                cols.append((vals == lev).astype(float))
        else:
            cols.append(np.asarray(col, dtype=float))
    return np.column_stack(cols)


def _split_theta(theta, spec, n_scale):
    theta = np.asarray(theta, dtype=float)
    want = n_scale + (1 if spec.form == HAZARD_RATE else 0)
    if theta.size != want:
        raise ValidationError(
            f"theta has {theta.size} entries, detection model needs {want}"
        )
    if spec.form == HAZARD_RATE:
        return theta[:-1], math.exp(float(np.clip(theta[-1], -20.0, 20.0)))
    return theta, None


def _pi_curve(y, sigma, form, shape):
    """Detection curve values, broadcasting y against sigma."""
    y = np.asarray(y, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if form == HALF_NORMAL:
        return np.exp(-0.5 * (y / sigma) ** 2)
    # hazard-rate: 1 - exp(-(y/sigma)^-shape), continuous limit 1 at y = 0
    with np.errstate(divide="ignore"):
        t = np.exp(np.minimum(-shape * (np.log(y) - np.log(sigma)), 700.0))
    out = -np.expm1(-t)
    return np.where(y == 0.0, 1.0, out)


def eval_pi(y, theta, spec, covariates=None):
    """Detection probability at perpendicular distance y, in [0, w]."""
    y = np.asarray(y, dtype=float)
    if np.any(y < 0) or np.any(y > spec.truncation):
        raise ValidationError(
            f"distances must lie in [0, {spec.truncation:g}]"
        )
    n = y.shape[0] if y.ndim else 1
    Z = scale_design(spec, covariates or {}, n)
    scale_theta, shape = _split_theta(theta, spec, Z.shape[1])
    sigma = np.exp(np.clip(Z @ scale_theta, -30.0, 30.0))
    out = _pi_curve(y, sigma, spec.form, shape)
    return out if y.ndim else float(out)


def detection_probability(theta, spec, covariates=None, n=None):
    """Average detection probability p(theta; z) over [0, w] per row.

    With no covariates, pass ``n`` (or get a length-1 array back).
    """
    if n is None:
        n = len(next(iter(covariates.values()))) if covariates else 1
    Z = scale_design(spec, covariates or {}, n)
    scale_theta, shape = _split_theta(theta, spec, Z.shape[1])
    sigma = np.exp(np.clip(Z @ scale_theta, -30.0, 30.0))
    w = spec.truncation
    y_nodes = 0.5 * w * (_GL_X + 1.0)
    values = _pi_curve(y_nodes[None, :], sigma[:, None], spec.form, shape)
    p = values @ (0.5 * _GL_W)
    return np.clip(p, 0.0, 1.0)


def detection_loglik(data, theta, spec, guard=False):
    """Conditional log likelihood sum_s log(pi_s / p_s).

    With ``guard`` the function returns -inf instead of raising on
    numerically degenerate parameter values, for use inside optimizers.
    """
    y = data.distances
    if np.any(y > spec.truncation):
        raise ValidationError(
            f"observations beyond truncation {spec.truncation:g}; truncate first"
        )
    Z = scale_design(spec, data.covariates, data.n)
    scale_theta, shape = _split_theta(theta, spec, Z.shape[1])
    sigma = np.exp(np.clip(Z @ scale_theta, -30.0, 30.0))
    pi = _pi_curve(y, sigma, spec.form, shape)
    w = spec.truncation
    y_nodes = 0.5 * w * (_GL_X + 1.0)
    p = _pi_curve(y_nodes[None, :], sigma[:, None], spec.form, shape) @ (0.5 * _GL_W)
    if np.any(p < 1e-12) or np.any(pi <= 0.0) or not np.all(np.isfinite(p)):
        if guard:
            return -np.inf
        raise NumericalError(
            "detection probability underflow (p < 1e-12) at current parameters"
        )
    return float(np.sum(np.log(pi)) - np.sum(np.log(p)))


@dataclass
class DetectionFit:
    """Maximum likelihood detection fit with its parameter covariance."""

    spec: DetectionSpec
    theta_hat: np.ndarray
    V_theta: np.ndarray
    loglik: float
    n_obs: int
    param_names: list
    converged: bool
    n_iter: int
    warnings: tuple = ()

    def __post_init__(self):
        V = np.asarray(self.V_theta, dtype=float)
        V = 0.5 * (V + V.T)
        eig = np.linalg.eigvalsh(V)
        if eig.size and eig.min() < -1e-8 * max(eig.max(), 1.0):
            raise NumericalError(
                f"parameter covariance not positive semidefinite "
                f"(min eigenvalue {eig.min():.3e})"
            )
        self.V_theta = V

    @property
    def aic(self):
        return -2.0 * self.loglik + 2.0 * len(self.theta_hat)

    def standard_errors(self):
        return np.sqrt(np.maximum(np.diag(self.V_theta), 0.0))

    def p(self, covariates=None, n=None):
        return detection_probability(self.theta_hat, self.spec, covariates, n)

    def p_gradient(self, covariates=None, n=None, rel_step=1e-4):
        """Three-point derivative of p with respect to theta, one row per input row."""
        theta = self.theta_hat
        h = fd_steps(theta, rel_step)
        cols = []
        for j in range(theta.size):
            tp = theta.copy()
            tm = theta.copy()
            tp[j] += h[j]
            tm[j] -= h[j]
            cols.append(
                (
                    detection_probability(tp, self.spec, covariates, n)
                    - detection_probability(tm, self.spec, covariates, n)
                )
                / (2.0 * h[j])
            )
        return np.column_stack(cols)

    def to_dict(self):
        spec = self.spec
        return {
            "form": spec.form,
            "truncation": spec.truncation,
            "scale_covariates": list(spec.scale_covariates),
            "factor_levels": {k: list(v) for k, v in (spec.factor_levels or {}).items()},
            "theta_hat": [float(v) for v in self.theta_hat],
            "standard_errors": [float(v) for v in self.standard_errors()],
            "V_theta": [[float(v) for v in row] for row in self.V_theta],
            "loglik": float(self.loglik),
            "aic": float(self.aic),
            "n_obs": int(self.n_obs),
            "param_names": list(self.param_names),
            "converged": bool(self.converged),
            "n_iter": int(self.n_iter),
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, d):
        levels = {k: tuple(v) for k, v in d["factor_levels"].items()}
        spec = DetectionSpec(
            form=d["form"],
            truncation=float(d["truncation"]),
            scale_covariates=tuple(d["scale_covariates"]),
            factor_levels=levels if d["scale_covariates"] else None,
        )
        return cls(
            spec=spec,
            theta_hat=np.asarray(d["theta_hat"], dtype=float),
            V_theta=np.asarray(d["V_theta"], dtype=float),
            loglik=float(d["loglik"]),
            n_obs=int(d["n_obs"]),
            param_names=list(d["param_names"]),
            converged=bool(d["converged"]),
            n_iter=int(d["n_iter"]),
            warnings=tuple(d.get("warnings", ())),
        )


def fit_detection(data, spec, level_order=None, max_iter=500):
    """Fit a detection function by maximum likelihood.

    Starting values: log scale at log(mean observed distance / 0.6),
    covariate coefficients at zero, log shape at log 2. The covariance
    V_theta is the inverse negative finite-difference Hessian of the
    log likelihood at the optimum.
    """
    if data.n == 0:
        raise ValidationError("no observations to fit a detection function to")
    spec = resolve_spec(spec, data.covariates, level_order)
    Z = scale_design(spec, data.covariates, data.n)
    names = spec.param_names()
    n_scale = Z.shape[1]

    x0 = np.zeros(n_scale + (1 if spec.form == HAZARD_RATE else 0))
    x0[0] = math.log(max(float(np.mean(data.distances)), 1e-8) / 0.6)
    if spec.form == HAZARD_RATE:
        x0[-1] = math.log(2.0)

    def nll(theta):
        value = detection_loglik(data, theta, spec, guard=True)
        return -value if np.isfinite(value) else 1e12

    res = minimize(nll, x0, method="BFGS", options={"gtol": 1e-9, "maxiter": max_iter})
    theta = res.x
    fit_warnings = []

    def loglik(t):
        return detection_loglik(data, t, spec, guard=True)

    # Convergence contract: gradient sup-norm below 1e-6 relative to |loglik|.
    def grad_ok(t):
        ll = loglik(t)
        h = fd_steps(t)
        g = np.array(
            [
                (loglik(_bump(t, j, h[j])) - loglik(_bump(t, j, -h[j]))) / (2 * h[j])
                for j in range(t.size)
            ]
        )
        return np.max(np.abs(g)) < 1e-6 * max(1.0, abs(ll)), g, ll

    ok, grad, ll = grad_ok(theta)
    n_iter = int(res.nit)
    if not ok:
        # Newton polish with the finite-difference Hessian.
        for _ in range(25):
            H = fd_hessian(loglik, theta)
            try:
                step = np.linalg.solve(H, grad)
            except np.linalg.LinAlgError:
                break
            candidate = theta - step
            for _ in range(30):
                if loglik(candidate) >= ll - 1e-10:
                    break
                candidate = 0.5 * (candidate + theta)
            theta = candidate
            n_iter += 1
            ok, grad, ll = grad_ok(theta)
            if ok:
                break
    if not ok:
        raise NumericalError(
            f"detection fit did not converge in {n_iter} iterations "
            f"(|grad|_inf = {np.max(np.abs(grad)):.3e}, loglik = {ll:.6g})"
        )

    H = fd_hessian(loglik, theta)
    negH = -H
    eig = np.linalg.eigvalsh(0.5 * (negH + negH.T))
    if eig.min() <= 0:
        cond = np.inf if eig.min() <= 0 else eig.max() / eig.min()
        raise NumericalError(
            f"singular Hessian at the detection optimum (condition number "
            f"{np.linalg.cond(negH):.3e}); model may be overparameterized"
        )
    cond = eig.max() / eig.min()
    if cond > 1e10:
        fit_warnings.append(
            f"ill-conditioned detection Hessian (condition number {cond:.3e})"
        )
    V = np.linalg.inv(0.5 * (negH + negH.T))
    return DetectionFit(
        spec=spec,
        theta_hat=theta,
        V_theta=0.5 * (V + V.T),
        loglik=ll,
        n_obs=data.n,
        param_names=names,
        converged=True,
        n_iter=n_iter,
        warnings=tuple(fit_warnings),
    )


def _bump(x, j, dh):
    out = x.copy()
    out[j] += dh
    return out


@dataclass(frozen=True)
class KappaMatrix:
    """Per-row derivatives of log p with respect to theta.

    Rows follow the segment order (replicated class-major when group
    size classes are in play: all segments at class 1, then class 2...).
    """

    values: np.ndarray
    row_segments: tuple
    row_classes: tuple | None
    param_names: tuple

    @property
    def shape(self):
        return self.values.shape


def segment_covariates(segments, names):
    """Effort covariate columns for a list of segments."""
    return {name: effort_values(segments, name) for name in names}


def detection_kappa(fit, segments, group_classes=None, rel_step=1e-4):
    """Sensitivity of per-segment log detectability to theta.

    Central three-point differences with step max(1e-4, 1e-4 |theta_j|).
    With ``group_classes`` the rows are replicated class-major and the
    size-class column is set to each class label in turn.
    """
    spec = fit.spec
    names = [c for c in spec.scale_covariates if c != SIZE_CLASS]
    base = segment_covariates(segments, names)
    seg_ids = tuple(s.segment_id for s in segments)
    n = len(segments)

    blocks = []
    if group_classes is None:
        frames = [(None, base)]
    else:
        if SIZE_CLASS not in spec.scale_covariates:
            raise ValidationError(
                "group classes supplied but the detection model has no "
                f"{SIZE_CLASS!r} covariate"
            )
        frames = [
            (cls, {**base, SIZE_CLASS: np.full(n, cls, dtype=object)})
            for cls in group_classes
        ]

    theta = fit.theta_hat
    h = fd_steps(theta, rel_step)
    for _, covs in frames:
        cols = []
        for j in range(theta.size):
            tp = _bump(theta, j, h[j])
            tm = _bump(theta, j, -h[j])
            pp = detection_probability(tp, spec, covs, n)
            pm = detection_probability(tm, spec, covs, n)
            if np.any(pp <= 0) or np.any(pm <= 0):
                raise NumericalError("log p derivative undefined: p underflow")
            cols.append((np.log(pp) - np.log(pm)) / (2.0 * h[j]))
        blocks.append(np.column_stack(cols))
    values = np.vstack(blocks)
    row_classes = (
        None
        if group_classes is None
        else tuple(cls for cls, _ in frames for _ in range(n))
    )
    return KappaMatrix(
        values=values,
        row_segments=seg_ids * len(frames),
        row_classes=row_classes,
        param_names=tuple(fit.param_names),
    )
