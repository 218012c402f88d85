"""Response families for the count stage.

Counts are modelled on the log link with variance function V(mu):
poisson (V = mu, phi = 1), quasipoisson (V = mu, phi free) and tweedie
(V = mu^q, 1.2 <= q < 2, phi free). The tweedie family is handled
entirely through its unit deviance,

    d(y, mu) = 2 [ y^(2-q)/((1-q)(2-q)) - y mu^(1-q)/(1-q) + mu^(2-q)/(2-q) ],

with the y = 0 limit 2 mu^(2-q)/(2-q); the density's infinite series is
never evaluated. A gaussian identity-link family is included so the
restricted-likelihood machinery can be checked against closed forms.
"""

from dataclasses import dataclass, replace

import numpy as np
from scipy import special, stats

from .exceptions import ValidationError

POISSON = "poisson"
QUASIPOISSON = "quasipoisson"
TWEEDIE = "tweedie"
GAUSSIAN = "gaussian"

TWEEDIE_POWER_GRID = tuple(np.round(np.arange(1.2, 1.95, 0.1), 10))
TWEEDIE_MIN_POWER = 1.2


@dataclass(frozen=True)
class Family:
    """A response family: variance function, deviance, link."""

    kind: str
    phi: float | None = None
    tweedie_power: float | None = None

    def __post_init__(self):
        if self.kind not in (POISSON, QUASIPOISSON, TWEEDIE, GAUSSIAN):
            raise ValidationError(f"unknown family {self.kind!r}")
        if self.kind == POISSON:
            if self.phi is not None and self.phi != 1.0:
                raise ValidationError("poisson has scale fixed at 1")
            object.__setattr__(self, "phi", 1.0)
        if self.kind == TWEEDIE:
            q = self.tweedie_power
            if q is not None and not (TWEEDIE_MIN_POWER <= q < 2.0):
                raise ValidationError(
                    f"tweedie power must lie in [{TWEEDIE_MIN_POWER}, 2), got {q!r}"
                )
        elif self.tweedie_power is not None:
            raise ValidationError("tweedie_power only applies to the tweedie family")
        if self.phi is not None and self.phi <= 0:
            raise ValidationError(f"scale parameter must be > 0, got {self.phi!r}")

    @property
    def log_link(self):
        return self.kind != GAUSSIAN

    @property
    def has_dispersion(self):
        return self.kind != POISSON

    def with_power(self, q):
        return replace(self, tweedie_power=float(q))

    def variance(self, mu):
        mu = np.asarray(mu, dtype=float)
        if self.kind == GAUSSIAN:
            return np.ones_like(mu)
        if self.kind == TWEEDIE:
            return mu ** self._power()
        return mu

    def _power(self):
        if self.tweedie_power is None:
            raise ValidationError("tweedie power not set; select it or fix it first")
        return self.tweedie_power

    def unit_deviance(self, y, mu):
        y = np.asarray(y, dtype=float)
        mu = np.asarray(mu, dtype=float)
        if self.kind == GAUSSIAN:
            return (y - mu) ** 2
        if self.kind == TWEEDIE:
            q = self._power()
            term_y = np.where(
                y > 0, y ** (2.0 - q) / ((1.0 - q) * (2.0 - q)), 0.0
            )
            return 2.0 * (
                term_y - y * mu ** (1.0 - q) / (1.0 - q) + mu ** (2.0 - q) / (2.0 - q)
            )
        # poisson / quasipoisson; xlogy(y, y) - xlogy(y, mu) rather than
        # xlogy(y, y / mu): the ratio underflows to 0 for subnormal y,
        # which would turn a finite deviance into -inf
        return 2.0 * (special.xlogy(y, y) - special.xlogy(y, mu) - (y - mu))

    def deviance(self, y, mu):
        return float(np.sum(self.unit_deviance(y, mu)))

    def initial_mu(self, y):
        y = np.asarray(y, dtype=float)
        if self.kind == GAUSSIAN:
            return y.copy()
        return y + 0.1 * max(float(np.mean(y)), 1.0)

    def pearson_phi(self, y, mu, residual_dof):
        """Pearson scale estimate sum((y-mu)^2/V(mu)) / (n - edf)."""
        if self.kind == POISSON:
            return 1.0
        y = np.asarray(y, dtype=float)
        mu = np.asarray(mu, dtype=float)
        dof = max(float(residual_dof), 1.0)
        return float(np.sum((y - mu) ** 2 / self.variance(mu)) / dof)

    def log_saturated_variance(self, y):
        """sum log V(y + 1/6), the scale-carrying saturated term.

        The 1/6 offset keeps zero counts finite (extended
        quasi-likelihood small-count adjustment); for the gaussian
        family this is identically zero.
        """
        y = np.asarray(y, dtype=float)
        if self.kind == GAUSSIAN:
            return 0.0
        if self.kind == TWEEDIE:
            return float(self._power() * np.sum(np.log(y + 1.0 / 6.0)))
        return float(np.sum(np.log(y + 1.0 / 6.0)))


def tweedie_cdf(y, mu, phi, power, max_terms=400):
    """Compound Poisson-gamma distribution function.

    Evaluates F(y) = sum_k Poisson(k; lam) * GammaCDF(y; k alpha, scale)
    with lam = mu^(2-q) / (phi (2-q)), alpha = (2-q)/(q-1) and
    scale = phi (q-1) mu^(q-1); the k = 0 atom is exp(-lam) at zero.
    Partial sums converge quickly, truncated at lam + 12 sqrt(lam) + 30.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    mu = np.broadcast_to(np.asarray(mu, dtype=float), y.shape)
    q = power
    lam = mu ** (2.0 - q) / (phi * (2.0 - q))
    alpha = (2.0 - q) / (q - 1.0)
    scale = phi * (q - 1.0) * mu ** (q - 1.0)
    kmax = int(min(np.ceil(lam.max() + 12.0 * np.sqrt(lam.max()) + 30.0), max_terms))
    k = np.arange(0, kmax + 1)
    log_pois = k[None, :] * np.log(lam[:, None]) - lam[:, None] - special.gammaln(k[None, :] + 1.0)
    pois = np.exp(log_pois)
    gamma_cdf = np.empty_like(pois)
    gamma_cdf[:, 0] = (y >= 0).astype(float)
    for j in range(1, kmax + 1):
        gamma_cdf[:, j] = stats.gamma.cdf(y, a=j * alpha, scale=scale)
    return np.clip((pois * gamma_cdf).sum(axis=1), 0.0, 1.0)


def tweedie_zero_mass(mu, phi, power):
    """P(Y = 0) = exp(-mu^(2-q) / (phi (2-q)))."""
    mu = np.asarray(mu, dtype=float)
    return np.exp(-(mu ** (2.0 - power)) / (phi * (2.0 - power)))
