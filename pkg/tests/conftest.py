"""Shared fixtures: one simulated survey and its fits, reused across modules."""

import numpy as np
import pytest

from dsurf.detection import DetectionSpec, build_detection_data, fit_detection
from dsurf.families import Family, QUASIPOISSON
from dsurf.sim import GaussianBlobField, PlaneField, SimScenario, simulate_survey
from dsurf.smooth import SmoothSpec
from dsurf.varprop import fit_dsm


@pytest.fixture(scope="session")
def hn_spec():
    return DetectionSpec(form="half-normal", truncation=1.0)


@pytest.fixture(scope="session")
def weather_scenario():
    """Blob density with a detectability covariate trending along x."""
    det = DetectionSpec(
        form="half-normal", truncation=1.0, scale_covariates=("weather",)
    )
    return SimScenario(
        width=40.0,
        height=25.0,
        density=GaussianBlobField(
            base=0.0, amplitude=1.5, center_x=28.0, center_y=12.0,
            scale_x=8.0, scale_y=7.0,
        ),
        detection=det,
        theta_true=(np.log(0.55), -0.35),
        spacing=4.0,
        segment_length=2.5,
        seed=11,
        covariate_fields={"weather": PlaneField(0.0, 0.05, 0.0)},
    )


@pytest.fixture(scope="session")
def weather_survey(weather_scenario):
    return simulate_survey(weather_scenario)


@pytest.fixture(scope="session")
def weather_detection(weather_scenario, weather_survey):
    data = build_detection_data(
        weather_survey.observations,
        weather_survey.segments,
        covariate_names=("weather",),
    )
    return fit_detection(data, weather_scenario.detection)


@pytest.fixture(scope="session")
def xy_smooths():
    return (
        SmoothSpec(covariates=("x",), basis_dim=6),
        SmoothSpec(covariates=("y",), basis_dim=6),
    )


@pytest.fixture(scope="session")
def weather_varprop(weather_survey, weather_detection, xy_smooths):
    return fit_dsm(
        weather_survey.segments,
        weather_detection,
        xy_smooths,
        Family(QUASIPOISSON),
        method="varprop",
    )
