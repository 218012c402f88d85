"""Two-stage density surface modelling for line-transect surveys.

Stage one fits a detection function to perpendicular distances; stage two
fits a spatial smooth to per-segment counts with an effective-area offset.
The defining feature is variance propagation: the detection fit's
parameter uncertainty enters the spatial model as a random shift along
the log-detectability gradient, so abundance intervals reflect both
stages. Plain (naive) fitting, posterior-simulation and squared-CV
variance alternatives, group-size decompositions, misfit diagnostics, a
survey simulator, and a batch CLI round out the pipeline.
"""

from .abundance import (
    AbundanceResult,
    lognormal_interval,
    predict_abundance,
    var_delta,
    var_ht_averaged,
    var_independence,
    var_sim,
)
from .bundle import LoadedBundle, load_fit_bundle, save_fit_bundle
from .config import (
    RunConfig,
    config_hash,
    load_run_config,
    load_scenario_config,
)
from .data import (
    CovariateBinning,
    Observation,
    PredictionCell,
    Segment,
    load_observations,
    load_prediction_grid,
    load_segments,
    recount_segments,
    save_survey,
    validate_survey,
)
from .detection import (
    SIZE_CLASS,
    DetectionFit,
    DetectionSpec,
    build_detection_data,
    detection_kappa,
    detection_probability,
    fit_detection,
)
from .diagnostics import (
    ObsExpectedTable,
    ShiftReport,
    obs_vs_expected,
    quantile_residuals,
    shift_report,
)
from .exceptions import (
    ConfigError,
    DsurfError,
    NumericalError,
    ValidationError,
)
from .families import GAUSSIAN, POISSON, QUASIPOISSON, TWEEDIE, Family
from .gam import GamFit, optimize_lambda
from .groupsize import (
    GroupSizeScheme,
    combine_group_abundance,
    fit_groupsize_dsm,
    make_scheme,
    predict_by_class,
    predict_group_abundance,
)
from .sim import (
    ConstantField,
    CoverageConfig,
    CoverageResult,
    GaussianBlobField,
    GroupSizeModel,
    PlaneField,
    SimScenario,
    coverage_study,
    default_grid,
    simulate_survey,
    true_abundance,
)
from .smooth import SmoothSpec, build_design
from .varprop import (
    ModelFrame,
    VarpropFit,
    build_model_frame,
    fit_dsm,
    fit_varprop,
)

__version__ = "0.1.0"

__all__ = [
    "AbundanceResult",
    "lognormal_interval",
    "predict_abundance",
    "var_delta",
    "var_ht_averaged",
    "var_independence",
    "var_sim",
    "LoadedBundle",
    "load_fit_bundle",
    "save_fit_bundle",
    "RunConfig",
    "config_hash",
    "load_run_config",
    "load_scenario_config",
    "CovariateBinning",
    "Observation",
    "PredictionCell",
    "Segment",
    "load_observations",
    "load_prediction_grid",
    "load_segments",
    "recount_segments",
    "save_survey",
    "validate_survey",
    "SIZE_CLASS",
    "DetectionFit",
    "DetectionSpec",
    "build_detection_data",
    "detection_kappa",
    "detection_probability",
    "fit_detection",
    "ObsExpectedTable",
    "ShiftReport",
    "obs_vs_expected",
    "quantile_residuals",
    "shift_report",
    "ConfigError",
    "DsurfError",
    "NumericalError",
    "ValidationError",
    "GAUSSIAN",
    "POISSON",
    "QUASIPOISSON",
    "TWEEDIE",
    "Family",
    "GamFit",
    "optimize_lambda",
    "GroupSizeScheme",
    "combine_group_abundance",
    "fit_groupsize_dsm",
    "make_scheme",
    "predict_by_class",
    "predict_group_abundance",
    "ConstantField",
    "CoverageConfig",
    "CoverageResult",
    "GaussianBlobField",
    "GroupSizeModel",
    "PlaneField",
    "SimScenario",
    "coverage_study",
    "default_grid",
    "simulate_survey",
    "true_abundance",
    "SmoothSpec",
    "build_design",
    "ModelFrame",
    "VarpropFit",
    "build_model_frame",
    "fit_dsm",
    "fit_varprop",
    "__version__",
]
