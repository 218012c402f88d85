"""Abundance prediction over grids and its variance, four ways.

Point estimate: N = sum_j area_j exp(x_j' beta).  Detectability never
appears in the prediction rows; on a propagated fit the shift columns
are zero at prediction, so detection uncertainty enters the variance
only through the joint coefficient covariance.

Variance methods:
  delta          quadratic form u' V u with u = X_p' (area * density)
  posterior-sim  draws from N(beta_hat, V) over the full coefficient
                 vector (shift block included), empirical variance and
                 percentiles of the resulting abundances
  independence   squared-CV sum: CV^2(N) = CV^2(N_gam) + CV^2(p_hat),
                 the classical two-stage combination that assumes the
                 stages are independent
  ht-averaged    the independence combination with detectability
                 summarized as p_tilde = (total individuals) / N_HT,
                 N_HT = sum g_i / p_hat_i; flagged not recommended

Intervals are log-normal: N * exp(+-1.96 sqrt(log(1 + CV^2))).
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .exceptions import NumericalError, ValidationError
from .numdiff import fd_steps

DEFAULT_B = 100
SIM_CHUNK = 8192
_Z975 = 1.959963984540054


def lognormal_interval(estimate, cv):
    """95% interval for a positive estimate with the given CV."""
    if estimate <= 0 or cv is None or not np.isfinite(cv):
        return (float("nan"), float("nan"))
    half = _Z975 * math.sqrt(math.log1p(cv * cv))
    return (estimate * math.exp(-half), estimate * math.exp(half))


@dataclass
class AbundanceResult:
    """Total abundance over a grid with per-cell detail."""

    N_hat: float
    per_cell_density: np.ndarray
    cell_ids: tuple
    areas: np.ndarray
    method: str
    variance: float | None = None
    cv: float | None = None
    B: int | None = None
    percentiles: tuple | None = None
    components: dict = field(default_factory=dict)
    notes: tuple = ()
    per_class: dict | None = None

    def __post_init__(self):
        contrib = float(np.sum(self.areas * self.per_cell_density))
        if not math.isclose(self.N_hat, contrib, rel_tol=1e-10, abs_tol=1e-10):
            raise ValidationError(
                "abundance must equal the summed per-cell contributions"
            )
        if self.variance is not None and self.variance < 0:
            raise ValidationError("variance must be nonnegative")

    @property
    def se(self):
        return None if self.variance is None else math.sqrt(self.variance)

    @property
    def interval(self):
        if self.cv is None:
            return (float("nan"), float("nan"))
        return lognormal_interval(self.N_hat, self.cv)

    def per_cell_rows(self):
        """(cell_id, density, contribution) rows for the per-cell table."""
        contrib = self.areas * self.per_cell_density
        return [
            (cid, float(d), float(c))
            for cid, d, c in zip(self.cell_ids, self.per_cell_density, contrib)
        ]

    def to_report(self):
        out = {
            "N_hat": float(self.N_hat),
            "method": self.method,
            "variance": None if self.variance is None else float(self.variance),
            "se": None if self.variance is None else float(self.se),
            "cv": None if self.cv is None else float(self.cv),
            "interval_lower": None,
            "interval_upper": None,
            "n_cells": len(self.cell_ids),
        }
        if self.cv is not None:
            lo, hi = self.interval
            out["interval_lower"] = float(lo)
            out["interval_upper"] = float(hi)
        if self.B is not None:
            out["B"] = int(self.B)
        if self.percentiles is not None:
            out["percentile_2.5"] = float(self.percentiles[0])
            out["percentile_97.5"] = float(self.percentiles[1])
        if self.components:
            out["components"] = {k: float(v) for k, v in self.components.items()}
        if self.notes:
            out["notes"] = list(self.notes)
        if self.per_class is not None:
            out["per_class"] = self.per_class
        return out


def _grid_arrays(grid):
    cells = list(grid)
    if not cells:
        raise ValidationError("prediction grid is empty")
    names = sorted(cells[0].density)
    for c in cells:
        if sorted(c.density) != names:
            raise ValidationError(
                f"cell {c.cell_id}: covariates differ from the rest of the grid"
            )
    data = {
        name: np.asarray([c.density[name] for c in cells], dtype=float)
        for name in names
    }
    areas = np.asarray([c.area for c in cells], dtype=float)
    ids = tuple(c.cell_id for c in cells)
    return data, areas, ids


def prediction_design(fit, grid):
    """Design rows for the grid; shift columns (if any) stay zero."""
    data, areas, ids = _grid_arrays(grid)
    X = fit.design.build_matrix(data, len(areas))
    return X, areas, ids


def predict_abundance(fit, grid):
    """Point estimate only: per-cell density and its area-weighted sum."""
    X, areas, ids = prediction_design(fit, grid)
    dens = np.exp(X @ fit.coef_full)
    return AbundanceResult(
        N_hat=float(areas @ dens),
        per_cell_density=dens,
        cell_ids=ids,
        areas=areas,
        method="point",
    )


def var_delta(fit, grid):
    """First-order variance: u' V u with u = X_p' (area * density)."""
    X, areas, ids = prediction_design(fit, grid)
    beta = fit.coef_full
    V = fit.V_full
    if V.shape != (X.shape[1], X.shape[1]):
        raise ValidationError(
            f"covariance is {V.shape} for a design with {X.shape[1]} columns"
        )
    dens = np.exp(X @ beta)
    u = X.T @ (areas * dens)
    var = float(u @ V @ u)
    N = float(areas @ dens)
    cv = math.sqrt(var) / N if N > 0 else float("nan")
    return AbundanceResult(
        N_hat=N,
        per_cell_density=dens,
        cell_ids=ids,
        areas=areas,
        method="delta",
        variance=max(var, 0.0),
        cv=cv,
    )


def _psd_cholesky(V):
    V = 0.5 * (np.asarray(V, dtype=float) + np.asarray(V, dtype=float).T)
    try:
        return linalg.cholesky(V, lower=True)
    except linalg.LinAlgError:
        eig = np.linalg.eigvalsh(V)
        if eig[0] < -1e-8 * max(eig[-1], 1.0):
            raise NumericalError(
                "coefficient covariance is not positive semidefinite "
                f"(min eigenvalue {eig[0]:.3e})"
            ) from None
        w, Q = np.linalg.eigh(V)
        return Q * np.sqrt(np.maximum(w, 0.0))


def var_sim(fit, grid, B=DEFAULT_B, seed=0):
    """Posterior simulation over the full coefficient vector.

    Draws use fixed per-chunk substreams keyed by (seed, chunk index),
    so results are identical however the chunks are executed.
    """
    if B < 2:
        raise ValidationError("posterior simulation needs B >= 2")
    X, areas, ids = prediction_design(fit, grid)
    beta = fit.coef_full
    L = _psd_cholesky(fit.V_full)
    dens = np.exp(X @ beta)
    N_point = float(areas @ dens)

    draws = np.empty(B)
    p = beta.size
    for chunk, start in enumerate(range(0, B, SIM_CHUNK)):
        m = min(SIM_CHUNK, B - start)
        rng = np.random.default_rng([int(seed), chunk])
        Z = rng.standard_normal((m, p))
        eta_b = (Z @ L.T + beta) @ X.T
        draws[start:start + m] = np.exp(eta_b) @ areas
    var = float(np.var(draws, ddof=1))
    lo, hi = np.percentile(draws, [2.5, 97.5])
    return AbundanceResult(
        N_hat=N_point,
        per_cell_density=dens,
        cell_ids=ids,
        areas=areas,
        method="posterior-sim",
        variance=var,
        cv=math.sqrt(var) / N_point if N_point > 0 else float("nan"),
        B=int(B),
        percentiles=(float(lo), float(hi)),
    )


def ht_averaged_detectability(
    observations, detection_fit, segments=None, size_class=None, rel_step=1e-4
):
    """Survey-averaged detectability through the inverse-probability sum.

    p_tilde(theta) = sum g_i / sum(g_i / p_i(theta)); the variance is the
    quadratic form of its central-difference gradient with the detection
    covariance.  ``segments`` supplies effort covariates when the
    detection model has any; ``size_class`` the per-observation class
    labels when it uses them.
    """
    from .detection import SIZE_CLASS, build_detection_data, detection_probability

    obs = list(observations)
    if not obs:
        raise ValidationError("at least one observation is required")
    spec = detection_fit.spec
    names = list(spec.scale_covariates)
    if names and segments is None:
        raise ValidationError(
            "segments are required to look up detection covariates for the "
            "survey-averaged detectability"
        )
    if SIZE_CLASS in names and size_class is None:
        raise ValidationError(
            "per-observation size-class labels are required by this "
            "detection model"
        )
    if names:
        data = build_detection_data(obs, segments, names, size_class=size_class)
        covs = data.covariates
        g = data.group_sizes
    else:
        covs = None
        g = np.asarray([o.group_size for o in obs], dtype=float)

    def p_tilde_at(theta):
        p = detection_probability(theta, spec, covs, len(obs))
        if np.any(p < 1e-6):
            raise NumericalError(
                "an observation has detectability below 1e-6; the "
                "inverse-probability sum is unstable"
            )
        return float(np.sum(g) / np.sum(g / p))

    theta = detection_fit.theta_hat
    p_tilde = p_tilde_at(theta)
    h = fd_steps(theta, rel_step)
    grad = np.empty(theta.size)
    for j in range(theta.size):
        tp = theta.copy(); tp[j] += h[j]
        tm = theta.copy(); tm[j] -= h[j]
        grad[j] = (p_tilde_at(tp) - p_tilde_at(tm)) / (2.0 * h[j])
    var = float(grad @ detection_fit.V_theta @ grad)
    return p_tilde, max(var, 0.0)


def _cv_combination(fit, grid, p_summary, var_p, method, notes=()):
    base = getattr(fit, "naive", None) or fit
    gam_part = var_delta(base, grid)
    cv_gam = gam_part.cv
    cv_p = math.sqrt(var_p) / p_summary if p_summary > 0 else float("nan")
    cv = math.sqrt(cv_gam * cv_gam + cv_p * cv_p)
    var = (cv * gam_part.N_hat) ** 2
    return AbundanceResult(
        N_hat=gam_part.N_hat,
        per_cell_density=gam_part.per_cell_density,
        cell_ids=gam_part.cell_ids,
        areas=gam_part.areas,
        method=method,
        variance=var,
        cv=cv,
        components={
            "cv_gam": cv_gam,
            "cv_p": cv_p,
            "p_summary": p_summary,
            "var_p": var_p,
        },
        notes=tuple(notes),
    )


def var_independence(fit, grid, detection_fit, observations=None, segments=None,
                     size_class=None):
    """Squared-CV combination assuming the two stages are independent.

    On a propagated fit the surface CV comes from its naive companion,
    so the comparison isolates what propagation adds.  A detection model
    with covariates has no single detectability; the survey-averaged
    value is used (observations required) and a warning notes that the
    combination is hard to justify there.
    """
    notes = []
    if detection_fit.spec.scale_covariates:
        warnings.warn(
            "independence CV combination with a covariate detection model "
            "is hard to justify; using survey-averaged detectability",
            stacklevel=2,
        )
        notes.append("covariate detection model: survey-averaged detectability")
        if observations is None:
            raise ValidationError(
                "observations are required to average detectability over a "
                "covariate detection model"
            )
        p_summary, var_p = ht_averaged_detectability(
            observations, detection_fit, segments=segments, size_class=size_class
        )
    else:
        p_summary = float(detection_fit.p(None, 1)[0])
        grad = detection_fit.p_gradient(None, 1)[0]
        var_p = float(grad @ detection_fit.V_theta @ grad)
    return _cv_combination(fit, grid, p_summary, var_p, "independence", notes)


def var_ht_averaged(fit, grid, detection_fit, observations, segments=None,
                    size_class=None):
    """CV combination with inverse-probability-averaged detectability.

    Flagged not recommended: the averaging has no small-area analogue
    and understates structure in the detection model.
    """
    p_tilde, var_p = ht_averaged_detectability(
        observations, detection_fit, segments=segments, size_class=size_class
    )
    return _cv_combination(
        fit, grid, p_tilde, var_p, "ht-averaged", ("not recommended",)
    )
