"""Propagating detection-parameter uncertainty into the count model."""

import math
import warnings

import numpy as np
import pytest

from dsurf.data import Segment
from dsurf.detection import DetectionFit, DetectionSpec, detection_loglik
from dsurf.exceptions import ValidationError
from dsurf.families import GAUSSIAN, POISSON, QUASIPOISSON, Family
from dsurf.gam import optimize_lambda
from dsurf.smooth import SmoothSpec, build_design
from dsurf.varprop import (
    VarpropFit,
    augment_design,
    build_model_frame,
    fit_dsm,
    fit_varprop,
    prior_precision,
)


def _plain_fit(sigma=0.7, v=0.04, truncation=1.0):
    spec = DetectionSpec(form="half-normal", truncation=truncation)
    return DetectionFit(
        spec=spec,
        theta_hat=np.array([math.log(sigma)]),
        V_theta=np.array([[v]]),
        loglik=-10.0,
        n_obs=40,
        param_names=["log_scale"],
        converged=True,
        n_iter=3,
    )


def _segments(counts, area=2.0):
    return [
        Segment(
            segment_id=f"s{i}",
            transect_id="t0",
            area=area,
            count=int(c),
            density={"x": float(i)},
        )
        for i, c in enumerate(counts)
    ]


class TestModelFrame:
    def test_offset_is_log_area_times_p(self):
        det = _plain_fit(sigma=0.7)
        segs = _segments([3, 0, 5], area=2.5)
        frame = build_model_frame(segs, det)
        p = det.p(n=1)[0]
        assert np.allclose(frame.offset, math.log(2.5 * p))
        assert np.array_equal(frame.y, [3.0, 0.0, 5.0])
        assert frame.segment_ids == ("s0", "s1", "s2")

    def test_unset_counts_rejected(self):
        det = _plain_fit()
        segs = [Segment(segment_id="s0", transect_id="t", area=1.0)]
        with pytest.raises(ValidationError, match="count"):
            build_model_frame(segs, det)

    def test_class_major_frame(self):
        from dsurf.detection import SIZE_CLASS

        spec = DetectionSpec(
            form="half-normal",
            truncation=1.0,
            scale_covariates=(SIZE_CLASS,),
            factor_levels={SIZE_CLASS: ("small", "big")},
        )
        det = DetectionFit(
            spec=spec,
            theta_hat=np.array([0.0, 0.4]),
            V_theta=0.01 * np.eye(2),
            loglik=-5.0,
            n_obs=20,
            param_names=["log_scale", f"{SIZE_CLASS}=big"],
            converged=True,
            n_iter=2,
        )
        segs = _segments([0, 0])
        counts = {"small": np.array([2.0, 1.0]), "big": np.array([0.0, 4.0])}
        frame = build_model_frame(
            segs, det, group_classes=("small", "big"), class_counts=counts
        )
        assert frame.n_rows == 4
        assert np.array_equal(frame.y, [2.0, 1.0, 0.0, 4.0])
        assert frame.row_classes == ("small", "small", "big", "big")
        # detectability differs by class, so the offsets must too
        assert frame.p_hat[0] != frame.p_hat[2]

    def test_missing_class_counts_rejected(self):
        det = _plain_fit()
        with pytest.raises(ValidationError, match="class_counts"):
            build_model_frame(
                _segments([1, 2]), det, group_classes=("a",), class_counts=None
            )


class TestPriorPrecision:
    def test_inverse_of_healthy_covariance(self):
        V = np.array([[0.04, 0.01], [0.01, 0.09]])
        S, V_used, ridged = prior_precision(V)
        assert not ridged
        assert np.allclose(S @ V, np.eye(2), atol=1e-12)
        assert np.array_equal(V_used, 0.5 * (V + V.T))

    def test_singular_covariance_gets_ridge_and_warns(self):
        V = np.array([[1.0, 1.0], [1.0, 1.0]])  # rank 1
        with pytest.warns(UserWarning, match="near-singular"):
            S, V_used, ridged = prior_precision(V)
        assert ridged
        assert np.all(np.isfinite(S))
        assert np.linalg.eigvalsh(V_used).min() > 0


class TestAugmentDesign:
    def _bundle(self, n=10):
        rng = np.random.default_rng(0)
        data = {"x": rng.uniform(0, 1, n)}
        spec = SmoothSpec(covariates=("x",), basis_dim=(5,))
        return build_design(data, [spec])

    def test_columns_and_block(self):
        bundle = self._bundle()
        kappa = np.full((10, 1), 0.3)
        aug, V_prior, _ = augment_design(bundle, kappa, np.array([[0.02]]))
        assert aug.n_cols == bundle.n_cols + 1
        assert aug.column_labels[-1] == "delta.0"
        assert np.allclose(aug.X[:, -1], 0.3)
        block = aug.penalties[-1]
        assert block.scale_with_phi and not block.free
        assert block.S[0, 0] == pytest.approx(1.0 / 0.02)

    def test_row_mismatch_rejected(self):
        bundle = self._bundle()
        with pytest.raises(ValidationError, match="rows"):
            augment_design(bundle, np.ones((7, 1)), np.array([[0.1]]))

    def test_shape_mismatch_rejected(self):
        bundle = self._bundle()
        with pytest.raises(ValidationError):
            augment_design(bundle, np.ones((10, 2)), np.array([[0.1]]))


class TestClosedForm:
    def test_intercept_variance_splits_into_count_and_detection_parts(self):
        """Intercept-only model with a constant sensitivity column.

        With counts y ~ poisson(exp(b0 + offset + kappa * delta)) and the
        prior delta ~ N(0, v), the penalized-information inverse gives
        exactly
            Var(b0)    = 1 / sum(y) + kappa^2 v
            Var(delta) = v
            Cov        = -kappa v
        since the score equation forces sum(mu) = sum(y).
        """
        rng = np.random.default_rng(5)
        counts = rng.poisson(6.0, size=40)
        det = _plain_fit(sigma=0.7, v=0.05)
        segs = _segments(counts)
        frame = build_model_frame(segs, det)
        bundle = build_design({}, [], n_rows=len(segs))
        kappa_val = 0.8
        fit = fit_varprop(
            bundle, frame, Family(POISSON), np.full((len(segs), 1), kappa_val),
            det.V_theta,
        )
        total = float(np.sum(counts))
        V = fit.V_full
        assert V[0, 0] == pytest.approx(1.0 / total + kappa_val**2 * 0.05, rel=1e-8)
        assert V[1, 1] == pytest.approx(0.05, rel=1e-8)
        assert V[0, 1] == pytest.approx(-kappa_val * 0.05, rel=1e-8)
        # the poisson path never searches the scale parameter
        assert fit.phi_star == 1.0
        assert fit.lambda_delta == 1.0
        assert fit.phi_profile == ((1.0, fit.reml),)

    def test_degenerate_prior_reduces_to_naive(self, weather_survey,
                                               weather_detection, xy_smooths):
        """A vanishing detection covariance must reproduce the plain fit."""
        det = weather_detection
        tiny = DetectionFit(
            spec=det.spec,
            theta_hat=det.theta_hat,
            V_theta=det.V_theta * 1e-8,
            loglik=det.loglik,
            n_obs=det.n_obs,
            param_names=det.param_names,
            converged=True,
            n_iter=det.n_iter,
        )
        naive = fit_dsm(
            weather_survey.segments, tiny, xy_smooths, Family(POISSON),
            method="naive",
        )
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # the tiny prior is near-singular
            vp = fit_dsm(
                weather_survey.segments, tiny, xy_smooths, Family(POISSON),
                method="varprop",
            )
        p = naive.design.n_cols
        assert np.allclose(vp.coef_full[:p], naive.beta_hat, atol=1e-5)
        assert np.allclose(vp.gam.mu, naive.mu, rtol=1e-6)
        se_naive = math.sqrt(naive.V_beta[0, 0])
        se_vp = math.sqrt(vp.V_full[0, 0])
        assert se_vp == pytest.approx(se_naive, abs=1e-5)
        # and the shift itself collapses to zero
        assert np.all(np.abs(vp.delta_hat) < 1e-4)


class TestScaleProfile:
    def test_delta_block_multiplier_tracks_phi(self, weather_varprop):
        """The prior covariance of the shift must not depend on the scale.

        The block's multiplier is the profiled scale itself, so the
        implied prior precision multiplier/phi * S stays exactly S.
        """
        fit = weather_varprop
        assert fit.gam.lambda_hat["detection"] == pytest.approx(
            fit.phi_star, rel=1e-12
        )
        assert fit.lambda_delta == pytest.approx(1.0 / fit.phi_star, rel=1e-12)

    def test_profiled_scale_beats_grid(self, weather_varprop):
        fit = weather_varprop
        aug = fit.design
        frame = fit.frame
        fam = fit.gam.family
        warm = np.log([
            fit.gam.lambda_hat[pb.label] for pb in aug.penalties if pb.free
        ])
        best_grid = -np.inf
        for phi in np.exp(np.linspace(math.log(0.05), math.log(50.0), 21)):
            g = optimize_lambda(
                aug, frame.y, frame.offset, fam, fixed_phi=float(phi),
                lambda0=warm,
            )
            best_grid = max(best_grid, g.reml)
        assert fit.reml >= best_grid - 1e-3

    def test_interior_phi_and_profile_recorded(self, weather_varprop):
        fit = weather_varprop
        assert 0.05 < fit.phi_star < 50.0
        phis = [p for p, _ in fit.phi_profile]
        crits = [c for _, c in fit.phi_profile]
        assert len(phis) > 5  # the golden search actually probed the range
        best = crits.index(max(crits))
        assert phis[best] == pytest.approx(fit.phi_star, rel=0.05)

    def test_posterior_never_exceeds_prior(self, weather_varprop):
        prior = weather_varprop.delta_prior_cov()
        post = weather_varprop.delta_posterior_cov()
        eig = np.linalg.eigvalsh(prior - post)
        assert eig.min() > -1e-8


class TestLinearization:
    def test_sensitivity_columns_linearize_log_p(self, weather_detection,
                                                 weather_survey):
        from dsurf.detection import detection_kappa, detection_probability

        det = weather_detection
        segs = weather_survey.segments[:25]
        kappa = detection_kappa(det, segs)
        covs = {"weather": np.array([s.effort["weather"] for s in segs])}
        logp0 = np.log(detection_probability(det.theta_hat, det.spec, covs))
        rng = np.random.default_rng(2)
        se = np.sqrt(np.diag(det.V_theta))
        for _ in range(20):
            d = rng.normal(0.0, 0.5) * se * rng.choice([-1.0, 1.0], size=se.size)
            logp1 = np.log(
                detection_probability(det.theta_hat + d, det.spec, covs)
            )
            err = np.abs(logp1 - logp0 - kappa.values @ d)
            # quadratic remainder: bounded by C * |d|^2 with a modest C
            assert err.max() <= 5.0 * float(d @ d) + 1e-12


class TestFitDsm:
    def test_method_validated(self, weather_survey, weather_detection, xy_smooths):
        with pytest.raises(ValidationError, match="method"):
            fit_dsm(
                weather_survey.segments, weather_detection, xy_smooths,
                Family(POISSON), method="bootstrap",
            )

    def test_missing_smooth_covariate_named(self, weather_survey,
                                            weather_detection):
        spec = SmoothSpec(covariates=("depth",), basis_dim=(5,))
        with pytest.raises(ValidationError, match="depth"):
            fit_dsm(
                weather_survey.segments, weather_detection, [spec],
                Family(POISSON),
            )

    def test_varprop_inflates_uncertainty(self, weather_survey,
                                          weather_detection, xy_smooths,
                                          weather_varprop):
        naive = fit_dsm(
            weather_survey.segments, weather_detection, xy_smooths,
            Family(QUASIPOISSON), method="naive",
        )
        assert isinstance(weather_varprop, VarpropFit)
        se_naive = math.sqrt(naive.V_beta[0, 0])
        se_vp = math.sqrt(weather_varprop.V_full[0, 0])
        assert se_vp > se_naive
        # deviation block bookkeeping is visible per penalty label
        assert "detection" in weather_varprop.edf_blocks
