"""Survey simulator and the interval-coverage machinery."""

import math
import pickle

import numpy as np
import pytest
from scipy import integrate

from dsurf.detection import DetectionSpec
from dsurf.exceptions import NumericalError, ValidationError
from dsurf.families import POISSON, Family
from dsurf.sim import (
    ConstantField,
    CoverageConfig,
    GaussianBlobField,
    GroupSizeModel,
    PlaneField,
    SimScenario,
    coverage_study,
    default_grid,
    field_from_dict,
    simulate_survey,
    true_abundance,
)
from dsurf.smooth import SmoothSpec

from test_detection import _halfnormal_avg_p


def _flat_scenario(rho=6.0, seed=0, **kw):
    args = dict(
        width=20.0,
        height=10.0,
        density=ConstantField(rho),
        detection=DetectionSpec(form="half-normal", truncation=0.5),
        theta_true=(math.log(0.55),),
        spacing=2.5,
        segment_length=2.0,
        seed=seed,
    )
    args.update(kw)
    return SimScenario(**args)


class TestFields:
    def test_plane_and_blob_values(self):
        pf = PlaneField(1.0, 0.5, -0.25)
        assert pf.values(np.array([2.0]), np.array([4.0]))[0] == pytest.approx(1.0)
        gb = GaussianBlobField(
            base=0.2, amplitude=3.0, center_x=5.0, center_y=5.0,
            scale_x=2.0, scale_y=1.0,
        )
        assert gb.values(np.array([5.0]), np.array([5.0]))[0] == pytest.approx(3.2)
        # one x-scale away the bump drops by exp(-1/2)
        assert gb.values(np.array([7.0]), np.array([5.0]))[0] == pytest.approx(
            0.2 + 3.0 * math.exp(-0.5)
        )

    def test_upper_bounds_hold_on_dense_grid(self):
        fields = [
            ConstantField(4.0),
            PlaneField(1.0, 0.3, -0.2),
            GaussianBlobField(
                base=0.1, amplitude=2.0, center_x=3.0, center_y=9.0,
                scale_x=1.5, scale_y=2.5,
            ),
        ]
        x = np.linspace(0.0, 12.0, 121)
        y = np.linspace(0.0, 10.0, 101)
        gx, gy = np.meshgrid(x, y)
        for f in fields:
            bound = f.upper_bound(12.0, 10.0)
            assert np.all(f.values(gx.ravel(), gy.ravel()) <= bound + 1e-12)

    def test_round_trip_through_dict(self):
        fields = [
            ConstantField(4.0),
            PlaneField(1.0, 0.3, -0.2),
            GaussianBlobField(
                base=0.1, amplitude=2.0, center_x=3.0, center_y=9.0,
                scale_x=1.5, scale_y=2.5,
            ),
        ]
        for f in fields:
            assert field_from_dict(f.to_dict()) == f

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValidationError, match="ripple"):
            field_from_dict({"kind": "ripple"})


class TestGroupSizes:
    def test_probabilities_normalize_and_tilt(self):
        gm = GroupSizeModel(
            sizes=(1, 4),
            weights=(0.7, 0.3),
            tilt=0.5,
            tilt_field=PlaneField(0.0, 1.0, 0.0),
        )
        x = np.array([0.0, 2.0])
        y = np.zeros(2)
        probs = gm.probabilities(x, y)
        assert np.allclose(probs.sum(axis=1), 1.0)
        # at x = 0 the field is 0 so the base mixture applies
        assert probs[0, 0] == pytest.approx(0.7)
        # a positive tilt moves mass toward the larger size as x grows
        assert probs[1, 1] > probs[0, 1]
        assert gm.mean_size(x, y)[1] > gm.mean_size(x, y)[0]

    def test_draw_frequencies_match_probabilities(self):
        gm = GroupSizeModel(sizes=(1, 3), weights=(0.6, 0.4))
        rng = np.random.default_rng(0)
        n = 40_000
        draws = gm.draw(np.zeros(n), np.zeros(n), rng)
        frac = float(np.mean(draws == 3))
        assert frac == pytest.approx(0.4, abs=3 * math.sqrt(0.24 / n))

    def test_round_trip(self):
        gm = GroupSizeModel(
            sizes=(1, 2, 5),
            weights=(0.5, 0.3, 0.2),
            tilt=0.2,
            tilt_field=PlaneField(0.0, 0.1, 0.0),
        )
        assert GroupSizeModel.from_dict(gm.to_dict()) == gm


class TestScenarioValidation:
    def test_overlapping_strips_rejected(self):
        with pytest.raises(ValidationError, match="spacing"):
            _flat_scenario(spacing=0.9)  # 2 * truncation = 1.0

    def test_detection_covariate_needs_field(self):
        det = DetectionSpec(
            form="half-normal", truncation=0.5, scale_covariates=("weather",)
        )
        with pytest.raises(ValidationError, match="weather"):
            _flat_scenario(detection=det, theta_true=(0.0, 0.1))

    def test_round_trip_and_pickle(self, weather_scenario):
        back = SimScenario.from_dict(weather_scenario.to_dict())
        assert back == weather_scenario
        assert pickle.loads(pickle.dumps(weather_scenario)) == weather_scenario


class TestSimulateSurvey:
    def test_zero_density_zero_everything(self):
        sv = simulate_survey(_flat_scenario(rho=0.0))
        assert sv.observations == ()
        assert sv.truth.realized_groups == 0
        assert all(s.count == 0 for s in sv.segments)

    def test_seed_reproducibility(self):
        a = simulate_survey(_flat_scenario(seed=5))
        b = simulate_survey(_flat_scenario(seed=5))
        c = simulate_survey(_flat_scenario(seed=6))
        assert a.observations == b.observations
        assert a.segments == b.segments
        assert a.observations != c.observations
        # explicit seed overrides the scenario's
        d = simulate_survey(_flat_scenario(seed=5), seed=6)
        assert d.observations == c.observations

    def test_strips_stay_inside_region(self):
        for seed in range(12):
            sv = simulate_survey(_flat_scenario(seed=seed))
            xs = np.array([s.density["x"] for s in sv.segments])
            assert xs.min() - 0.5 >= -1e-9
            assert xs.max() + 0.5 <= 20.0 + 1e-9

    def test_segment_geometry(self):
        sv = simulate_survey(_flat_scenario())
        for s in sv.segments:
            assert s.area == pytest.approx(2.0 * 0.5 * s.length)
        by_transect = {}
        for s in sv.segments:
            by_transect.setdefault(s.transect_id, []).append(s.length)
        for lengths in by_transect.values():
            assert sum(lengths) == pytest.approx(10.0)

    def test_detection_rate_matches_constant_density(self):
        """Total detected individuals over the searched area.

        With unit groups, E[detected per strip area] = rho * p_bar where
        p_bar is the strip-averaged detectability; 40 replicates leave a
        relative Monte Carlo error near 0.9%, tested at 3 sigma.
        """
        rho = 6.0
        p_bar = _halfnormal_avg_p(0.55, 0.5)
        total, searched = 0.0, 0.0
        for seed in range(40):
            sv = simulate_survey(_flat_scenario(rho=rho, seed=100 + seed))
            total += sum(s.count for s in sv.segments)
            searched += sum(s.area for s in sv.segments)
        rate = total / (searched * p_bar)
        se = math.sqrt(total) / (searched * p_bar)
        assert abs(rate - rho) < 3 * se

    def test_doubling_density_doubles_counts(self):
        totals = []
        for rho in (3.0, 6.0):
            t = 0
            for seed in range(30):
                sv = simulate_survey(_flat_scenario(rho=rho, seed=200 + seed))
                t += sv.truth.realized_groups
            totals.append(t)
        assert totals[1] / totals[0] == pytest.approx(2.0, rel=0.06)
        # the expected-abundance bookkeeping scales exactly
        a = simulate_survey(_flat_scenario(rho=3.0)).truth
        b = simulate_survey(_flat_scenario(rho=6.0)).truth
        assert b.expected_groups == pytest.approx(2 * a.expected_groups, rel=1e-9)

    def test_detected_fraction_matches_detectability(self):
        """detected / in-strip groups is a binomial draw at p_bar."""
        p_bar = _halfnormal_avg_p(0.55, 0.5)
        det, instrip = 0, 0
        for seed in range(40):
            t = simulate_survey(_flat_scenario(seed=300 + seed)).truth
            det += t.detected_groups
            instrip += t.strip_groups
        se = math.sqrt(p_bar * (1 - p_bar) / instrip)
        assert det / instrip == pytest.approx(p_bar, abs=3 * se)

    def test_counts_are_individuals_not_groups(self):
        gm = GroupSizeModel(sizes=(3,), weights=(1.0,))
        sv = simulate_survey(_flat_scenario(group_sizes=gm, seed=2))
        assert sv.truth.detected_groups > 0
        assert sum(s.count for s in sv.segments) == 3 * sv.truth.detected_groups
        assert sv.truth.realized_individuals == 3 * sv.truth.realized_groups

    def test_covariates_sampled_at_segment_midpoints(self):
        field = PlaneField(0.3, 0.1, 0.02)
        det = DetectionSpec(
            form="half-normal", truncation=0.5, scale_covariates=("weather",)
        )
        sc = _flat_scenario(
            detection=det,
            theta_true=(math.log(0.55), -0.2),
            covariate_fields={"weather": field},
        )
        sv = simulate_survey(sc)
        for s in sv.segments:
            expect = field.values(
                np.array([s.density["x"]]), np.array([s.density["y"]])
            )[0]
            assert s.effort["weather"] == pytest.approx(expect, rel=1e-12)

    def test_lying_upper_bound_raises(self):
        class LyingField:
            kind = "lying"

            def values(self, x, y):
                return np.full(np.asarray(x).shape, 5.0)

            def upper_bound(self, width, height):
                return 1.0

            def to_dict(self):
                return {"kind": "lying"}

        with pytest.raises(NumericalError, match="upper bound"):
            simulate_survey(_flat_scenario(density=LyingField()))


class TestTruthIntegrals:
    def test_constant_field_exact(self):
        sc = _flat_scenario(rho=4.0)
        grid = default_grid(sc, nx=7, ny=3)
        assert sum(c.area for c in grid) == pytest.approx(200.0, rel=1e-12)
        assert true_abundance(sc, grid) == pytest.approx(800.0, rel=1e-12)

    def test_blob_field_matches_quadrature(self, weather_scenario):
        oracle, err = integrate.dblquad(
            lambda y, x: weather_scenario.density.values(
                np.array([x]), np.array([y])
            )[0],
            0.0,
            weather_scenario.width,
            0.0,
            weather_scenario.height,
            epsabs=1e-8,
        )
        grid = default_grid(weather_scenario, nx=80, ny=50)
        got = true_abundance(weather_scenario, grid)
        assert got == pytest.approx(oracle, rel=2e-4)
        # and the simulator's own bookkeeping agrees with quadrature
        truth = simulate_survey(weather_scenario).truth
        assert truth.expected_groups == pytest.approx(oracle, rel=2e-4)


def _coverage_scenario(seed=21):
    return SimScenario(
        width=24.0,
        height=12.0,
        density=GaussianBlobField(
            base=0.1, amplitude=1.2, center_x=15.0, center_y=6.0,
            scale_x=5.0, scale_y=4.0,
        ),
        detection=DetectionSpec(form="half-normal", truncation=1.0),
        theta_true=(math.log(0.55),),
        spacing=4.0,
        segment_length=1.5,
        seed=seed,
    )


class TestCoverage:
    def test_study_runs_and_aggregates(self):
        config = CoverageConfig(
            smooth_specs=(
                SmoothSpec(covariates=("x",), basis_dim=5),
                SmoothSpec(covariates=("y",), basis_dim=5),
            ),
            family=Family(POISSON),
            grid_nx=8,
            grid_ny=6,
        )
        sc = _coverage_scenario()
        result = coverage_study(sc, 50, config)
        assert set(result.methods) == {"naive", "varprop"}
        for m in result.methods.values():
            assert 0.0 <= m.coverage <= 1.0
            assert m.n_used + len(result.failures) >= 45
            assert m.mean_estimate > 0
            assert m.mc_se > 0
        reps = [row["replicate"] for row in result.rows]
        assert reps == sorted(reps)
        assert result.truth == pytest.approx(
            true_abundance(sc, default_grid(sc, nx=8, ny=6)), rel=1e-12
        )
        # deterministic: same call, same numbers
        again = coverage_study(sc, 50, config)
        assert again.rows == result.rows

        # worker scheduling must not leak into the output
        threaded = coverage_study(sc, 50, config, workers=2)
        assert threaded.rows == result.rows

    def test_replicate_floor_enforced(self):
        config = CoverageConfig(
            smooth_specs=(SmoothSpec(covariates=("x",), basis_dim=5),),
            family=Family(POISSON),
        )
        with pytest.raises(ValidationError, match="50"):
            coverage_study(_coverage_scenario(), 10, config)

    def test_alpha_pinned(self):
        config = CoverageConfig(
            smooth_specs=(SmoothSpec(covariates=("x",), basis_dim=5),),
            family=Family(POISSON),
        )
        with pytest.raises(ValidationError, match="0.05"):
            coverage_study(_coverage_scenario(), 50, config, alpha=0.1)

    def test_config_requires_smooths(self):
        with pytest.raises(ValidationError, match="smooth"):
            CoverageConfig(smooth_specs=(), family=Family(POISSON))
