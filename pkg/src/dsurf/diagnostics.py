"""Model-tension checks for the two-stage fit.

The detection-shift table compares detectability evaluated at the
detection estimate against detectability at the estimate plus the
fitted shift coefficients; a shift much larger than the detection-stage
standard error flags tension between the two stages.  Observed-versus-
expected count tables grouped by a detectability covariate surface the
same tension on the count scale.  Randomized quantile residuals check
the count family itself.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .detection import detection_probability
from .exceptions import ValidationError
from .families import GAUSSIAN, POISSON, QUASIPOISSON, TWEEDIE, tweedie_cdf
from .numdiff import fd_steps

SHIFT_THRESHOLD = 1.0


@dataclass(frozen=True)
class ShiftRow:
    level: str
    p_hat: float
    se: float
    p_shifted: float
    shift_in_sd: float
    flagged: bool


@dataclass(frozen=True)
class ShiftReport:
    """Detectability before and after applying the fitted shift."""

    covariate: str | None
    threshold: float
    rows: tuple

    @property
    def any_flagged(self):
        return any(r.flagged for r in self.rows)

    def to_rows(self):
        return [
            (r.level, r.p_hat, r.se, r.p_shifted, r.shift_in_sd, r.flagged)
            for r in self.rows
        ]

    def to_dict(self):
        return {
            "covariate": self.covariate,
            "threshold": self.threshold,
            "rows": [
                {
                    "level": r.level,
                    "p_hat": r.p_hat,
                    "se": r.se,
                    "p_shifted": r.p_shifted,
                    "shift_in_sd": r.shift_in_sd,
                    "flagged": r.flagged,
                }
                for r in self.rows
            ],
        }


def _p_and_se(theta, V_theta, spec, covs, rel_step=1e-4):
    p = float(detection_probability(theta, spec, covs, 1)[0])
    h = fd_steps(theta, rel_step)
    grad = np.empty(theta.size)
    for j in range(theta.size):
        tp = theta.copy(); tp[j] += h[j]
        tm = theta.copy(); tm[j] -= h[j]
        grad[j] = (
            float(detection_probability(tp, spec, covs, 1)[0])
            - float(detection_probability(tm, spec, covs, 1)[0])
        ) / (2.0 * h[j])
    return p, math.sqrt(max(float(grad @ V_theta @ grad), 0.0))


def shift_report(
    varprop_fit,
    detection_fit,
    covariate=None,
    threshold=SHIFT_THRESHOLD,
    at=None,
):
    """Per-level detectability at the estimate and at estimate + shift.

    ``covariate`` names the factor whose levels index the table (the
    single factor covariate by default; a model without factors yields
    one overall row).  ``at`` pins any remaining covariates.
    """
    spec = detection_fit.spec
    theta = detection_fit.theta_hat
    delta = np.asarray(varprop_fit.delta_hat, dtype=float)
    if delta.shape != theta.shape:
        raise ValidationError(
            f"shift has {delta.size} entries for {theta.size} detection "
            "parameters"
        )
    levels_by_factor = spec.factor_levels or {}
    if covariate is None:
        factors = sorted(levels_by_factor)
        if len(factors) > 1:
            raise ValidationError(
                f"several factor covariates ({factors}); name one"
            )
        covariate = factors[0] if factors else None
    elif covariate not in levels_by_factor:
        raise ValidationError(
            f"covariate {covariate!r} is not a factor in the detection model"
        )
    pinned = dict(at or {})
    needed = [
        c for c in spec.scale_covariates if c != covariate and c not in pinned
    ]
    if needed:
        raise ValidationError(
            f"values required for detection covariates: {needed}; pass at="
        )

    rows = []
    level_list = levels_by_factor[covariate] if covariate else (None,)
    for level in level_list:
        covs = {k: np.asarray([v], dtype=object) for k, v in pinned.items()}
        if covariate is not None:
            covs[covariate] = np.asarray([level], dtype=object)
        covs = covs or None
        p0, se = _p_and_se(theta, detection_fit.V_theta, spec, covs)
        p1 = float(detection_probability(theta + delta, spec, covs, 1)[0])
        shift = abs(p1 - p0) / se if se > 0 else (0.0 if p1 == p0 else math.inf)
        rows.append(
            ShiftRow(
                level="overall" if level is None else str(level),
                p_hat=p0,
                se=se,
                p_shifted=p1,
                shift_in_sd=shift,
                flagged=shift > threshold,
            )
        )
    return ShiftReport(covariate=covariate, threshold=threshold, rows=tuple(rows))


@dataclass(frozen=True)
class ObsExpectedTable:
    """Observed and fitted-total counts per covariate level."""

    covariate: str
    levels: tuple
    observed: tuple
    expected: tuple

    @property
    def total_observed(self):
        return float(sum(self.observed))

    @property
    def total_expected(self):
        return float(sum(self.expected))

    def to_rows(self):
        return list(zip(self.levels, self.observed, self.expected))

    def to_dict(self):
        return {
            "covariate": self.covariate,
            "rows": [
                {"level": lv, "observed": o, "expected": e}
                for lv, o, e in self.to_rows()
            ],
            "total_observed": self.total_observed,
            "total_expected": self.total_expected,
        }


def obs_vs_expected(fit, group_by):
    """Total observed versus total fitted counts per level of a covariate."""
    frame = fit.frame
    if frame is None:
        raise ValidationError("fit carries no model frame")
    if group_by not in frame.covariates:
        raise ValidationError(
            f"covariate {group_by!r} is not in the model frame"
        )
    values = frame.covariates[group_by]
    mu = fit.gam.mu if hasattr(fit, "gam") else fit.mu
    y = frame.y
    levels = []
    seen = set()
    for v in values:
        key = str(v)
        if key not in seen:
            seen.add(key)
            levels.append(key)
    obs, exp = [], []
    labels = np.asarray([str(v) for v in values])
    for lv in levels:
        mask = labels == lv
        obs.append(float(np.sum(y[mask])))
        exp.append(float(np.sum(mu[mask])))
    return ObsExpectedTable(
        covariate=group_by,
        levels=tuple(levels),
        observed=tuple(obs),
        expected=tuple(exp),
    )


def quantile_residuals(fit, seed=0):
    """Randomized quantile residuals; standard normal when the family fits.

    Counts use the randomized construction (uniform between the CDF just
    below and at the observation); the quasi family with excess
    dispersion maps to the matching negative binomial, tweedie zeros use
    the zero atom, and the gaussian case is the standardized residual.
    """
    gam = fit.gam if hasattr(fit, "gam") else fit
    y = gam.y
    mu = gam.mu
    fam = gam.family
    phi = gam.phi_hat
    rng = np.random.default_rng(seed)
    n = len(y)

    if fam.kind == GAUSSIAN:
        return (y - mu) / math.sqrt(phi)

    if fam.kind in (POISSON, QUASIPOISSON):
        counts = np.rint(y).astype(int)
        if not np.allclose(y, counts):
            raise ValidationError("count residuals require integer responses")
        if fam.kind == QUASIPOISSON and phi > 1.0:
            # negative binomial with mean mu and variance phi * mu
            r = mu / (phi - 1.0)
            pr = 1.0 / phi
            hi = stats.nbinom.cdf(counts, r, pr)
            lo = stats.nbinom.cdf(counts - 1, r, pr)
        else:
            hi = stats.poisson.cdf(counts, mu)
            lo = stats.poisson.cdf(counts - 1, mu)
        u = lo + rng.uniform(size=n) * (hi - lo)
    elif fam.kind == TWEEDIE:
        q = fam.tweedie_power
        u = tweedie_cdf(y, mu, phi, q)
        zero = y <= 0
        if np.any(zero):
            atom = tweedie_cdf(np.zeros(zero.sum()), mu[zero], phi, q)
            u[zero] = rng.uniform(size=int(zero.sum())) * atom
    else:
        raise ValidationError(f"no residual construction for family {fam.kind!r}")
    u = np.clip(u, 1e-12, 1.0 - 1e-12)
    return stats.norm.ppf(u)
