"""Response families: deviance, scale estimation, and the compound CDF."""

import math

import numpy as np
import pytest
from scipy import integrate

from dsurf.exceptions import ValidationError
from dsurf.families import (
    GAUSSIAN,
    POISSON,
    QUASIPOISSON,
    TWEEDIE,
    Family,
    tweedie_cdf,
    tweedie_zero_mass,
)


def _definitional_unit_deviance(y, mu, variance):
    """2 * integral_mu^y (y - u) / V(u) du, evaluated by quadrature."""
    val, _ = integrate.quad(lambda u: (y - u) / variance(u), mu, y, limit=400)
    return 2.0 * val


class TestDeviance:
    # deviance must agree with its defining integral for every family
    @pytest.mark.parametrize(
        "family,variance",
        [
            (Family(POISSON), lambda u: u),
            (Family(QUASIPOISSON), lambda u: u),
            (Family(GAUSSIAN), lambda u: 1.0),
            (Family(TWEEDIE, tweedie_power=1.5), lambda u: u**1.5),
            (Family(TWEEDIE, tweedie_power=1.2), lambda u: u**1.2),
        ],
    )
    def test_matches_definitional_integral(self, family, variance):
        for y, mu in [(3.0, 1.0), (0.5, 2.0), (4.0, 4.0), (1.0, 0.25)]:
            oracle = _definitional_unit_deviance(y, mu, variance)
            got = family.unit_deviance(np.array([y]), np.array([mu]))[0]
            assert got == pytest.approx(oracle, abs=1e-9)

    def test_zero_at_equality_and_positive_elsewhere(self):
        y = np.array([0.0, 1.0, 2.5, 7.0])
        for fam in (
            Family(POISSON),
            Family(GAUSSIAN),
            Family(TWEEDIE, tweedie_power=1.4),
        ):
            mu = np.maximum(y, 0.05) if fam.kind != GAUSSIAN else y
            assert fam.deviance(mu, mu) == pytest.approx(0.0, abs=1e-12)
            assert fam.deviance(y, np.full_like(y, 3.0)) > 0

    def test_poisson_zero_counts_finite(self):
        fam = Family(POISSON)
        d = fam.unit_deviance(np.array([0.0]), np.array([2.0]))[0]
        # 2 * (0 - (0 - 2)) = 4
        assert d == pytest.approx(4.0, abs=1e-12)

    def test_tweedie_zero_counts_finite(self):
        fam = Family(TWEEDIE, tweedie_power=1.5)
        d = fam.unit_deviance(np.array([0.0]), np.array([2.0]))[0]
        # term_y = 0; d = 2 * mu^{0.5} / 0.5 = 4 sqrt(2)
        assert d == pytest.approx(4.0 * math.sqrt(2.0), rel=1e-12)


class TestScale:
    def test_pearson_phi_hand_value(self):
        fam = Family(QUASIPOISSON)
        y = np.array([2.0, 0.0, 5.0])
        mu = np.array([1.0, 1.0, 4.0])
        # sum((y-mu)^2 / mu) = 1 + 1 + 0.25 = 2.25; dof = 1.5
        assert fam.pearson_phi(y, mu, 1.5) == pytest.approx(1.5)

    def test_poisson_phi_pinned_at_one(self):
        fam = Family(POISSON)
        assert fam.pearson_phi(np.array([5.0]), np.array([1.0]), 1.0) == 1.0
        assert not fam.has_dispersion
        with pytest.raises(ValidationError):
            Family(POISSON, phi=2.0)

    def test_saturated_term_definitional(self):
        y = np.array([1.0, 3.0])
        # quasipoisson: sum log(y + 1/6)
        expect = math.log(7.0 / 6.0) + math.log(19.0 / 6.0)
        assert Family(QUASIPOISSON).log_saturated_variance(y) == pytest.approx(expect)
        # tweedie: power * same sum
        assert Family(TWEEDIE, tweedie_power=1.5).log_saturated_variance(
            y
        ) == pytest.approx(1.5 * expect)
        assert Family(GAUSSIAN).log_saturated_variance(y) == 0.0


class TestValidation:
    def test_power_range_enforced(self):
        with pytest.raises(ValidationError):
            Family(TWEEDIE, tweedie_power=2.0)
        with pytest.raises(ValidationError):
            Family(TWEEDIE, tweedie_power=1.05)
        with pytest.raises(ValidationError):
            Family(POISSON, tweedie_power=1.5)

    def test_with_power(self):
        fam = Family(TWEEDIE).with_power(1.3)
        assert fam.tweedie_power == 1.3
        assert fam.variance(np.array([4.0]))[0] == pytest.approx(4.0**1.3)

    def test_link_flags(self):
        assert Family(POISSON).log_link
        assert not Family(GAUSSIAN).log_link
        assert Family(GAUSSIAN).has_dispersion


def _simulate_compound(mu, phi, power, n, rng):
    """Poisson-sum-of-gammas sampler; the tweedie construction."""
    lam = mu ** (2.0 - power) / (phi * (2.0 - power))
    shape = (2.0 - power) / (power - 1.0)
    scale = phi * (power - 1.0) * mu ** (power - 1.0)
    counts = rng.poisson(lam, size=n)
    out = np.zeros(n)
    pos = counts > 0
    out[pos] = rng.gamma(shape * counts[pos], scale)
    return out


class TestTweedieCdf:
    def test_zero_mass_closed_form(self):
        mu, phi, power = 2.0, 1.3, 1.5
        lam = mu ** (2.0 - power) / (phi * (2.0 - power))
        assert tweedie_zero_mass(mu, phi, power) == pytest.approx(
            math.exp(-lam), rel=1e-12
        )
        # CDF at zero equals the atom
        assert tweedie_cdf(np.array([0.0]), np.array([mu]), phi, power)[
            0
        ] == pytest.approx(math.exp(-lam), rel=1e-8)

    def test_matches_monte_carlo(self):
        # 200k draws give MC se <= 0.0011 per point; tolerance 4e-3
        rng = np.random.default_rng(42)
        mu, phi, power = 1.8, 1.1, 1.6
        draws = _simulate_compound(mu, phi, power, 200_000, rng)
        ys = np.array([0.5, 1.0, 2.0, 4.0])
        cdf = tweedie_cdf(ys, np.full(4, mu), phi, power)
        for yv, cv in zip(ys, cdf):
            mc = float(np.mean(draws <= yv))
            assert cv == pytest.approx(mc, abs=4e-3)

    def test_monotone_in_y(self):
        ys = np.linspace(0.0, 8.0, 40)
        cdf = tweedie_cdf(ys, np.full(40, 2.0), 1.2, 1.5)
        assert np.all(np.diff(cdf) >= -1e-12)
        assert cdf[-1] > 0.95
