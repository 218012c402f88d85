"""Synthetic line-transect surveys with known truth, plus coverage studies.

Every piece of the generating process is explicit and picklable: the
density surface, the detectability covariate fields, the group-size
distribution, and the true detection parameters. ``simulate_survey``
produces the same (observations, segments) shapes the fitting pipeline
consumes, together with a truth record that can integrate the true
intensity over any prediction grid. ``coverage_study`` replays the whole
two-stage pipeline over many simulated surveys and tabulates interval
coverage per variance method.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .abundance import lognormal_interval, var_delta
from .data import Observation, PredictionCell, Segment
from .detection import DetectionSpec, build_detection_data, eval_pi, fit_detection
from .exceptions import DsurfError, NumericalError, ValidationError
from .families import Family
from .varprop import fit_dsm

__all__ = [
    "ConstantField",
    "PlaneField",
    "GaussianBlobField",
    "field_from_dict",
    "GroupSizeModel",
    "SimScenario",
    "SimulatedSurvey",
    "TruthRecord",
    "simulate_survey",
    "default_grid",
    "true_abundance",
    "CoverageConfig",
    "CoverageResult",
    "coverage_study",
]


# ---------------------------------------------------------------------------
# spatial fields


@dataclass(frozen=True)
class ConstantField:
    """Same value everywhere."""

    value: float

    kind = "constant"

    def values(self, x, y):
        x = np.asarray(x, dtype=float)
        return np.full(x.shape, float(self.value))

    def upper_bound(self, width, height):
        return float(self.value)

    def to_dict(self):
        return {"kind": self.kind, "value": float(self.value)}


@dataclass(frozen=True)
class PlaneField:
    """Affine trend ``intercept + slope_x * x + slope_y * y``."""

    intercept: float
    slope_x: float = 0.0
    slope_y: float = 0.0

    kind = "plane"

    def values(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return self.intercept + self.slope_x * x + self.slope_y * y

    def upper_bound(self, width, height):
        corners = [
            self.values(np.array([cx]), np.array([cy]))[0]
            for cx in (0.0, width)
            for cy in (0.0, height)
        ]
        return float(max(corners))

    def to_dict(self):
        return {
            "kind": self.kind,
            "intercept": float(self.intercept),
            "slope_x": float(self.slope_x),
            "slope_y": float(self.slope_y),
        }


@dataclass(frozen=True)
class GaussianBlobField:
    """Baseline plus a Gaussian bump centred at (center_x, center_y)."""

    base: float
    amplitude: float
    center_x: float
    center_y: float
    scale_x: float
    scale_y: float

    kind = "gaussian_blob"

    def __post_init__(self):
        if self.scale_x <= 0 or self.scale_y <= 0:
            raise ValidationError("gaussian blob scales must be > 0")

    def values(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        u = (x - self.center_x) / self.scale_x
        v = (y - self.center_y) / self.scale_y
        return self.base + self.amplitude * np.exp(-0.5 * (u * u + v * v))

    def upper_bound(self, width, height):
        return float(self.base + max(self.amplitude, 0.0))

    def to_dict(self):
        return {
            "kind": self.kind,
            "base": float(self.base),
            "amplitude": float(self.amplitude),
            "center_x": float(self.center_x),
            "center_y": float(self.center_y),
            "scale_x": float(self.scale_x),
            "scale_y": float(self.scale_y),
        }


FIELD_KINDS = {
    ConstantField.kind: ConstantField,
    PlaneField.kind: PlaneField,
    GaussianBlobField.kind: GaussianBlobField,
}


def field_from_dict(d):
    """Rebuild a spatial field from its ``to_dict`` form."""
    d = dict(d)
    kind = d.pop("kind", None)
    if kind not in FIELD_KINDS:
        raise ValidationError(
            f"unknown field kind {kind!r}; expected one of {sorted(FIELD_KINDS)}"
        )
    return FIELD_KINDS[kind](**d)


# ---------------------------------------------------------------------------
# group sizes


@dataclass(frozen=True)
class GroupSizeModel:
    """Categorical group-size distribution, optionally tilted over space.

    With ``tilt_field`` set, the probability of size ``k`` at location
    (x, y) is proportional to ``weights[k] * exp(tilt * field(x, y) * k)``,
    so positive tilt shifts mass toward larger groups where the field is
    high. ``tilt = 0`` (default) gives the same categorical everywhere.
    """

    sizes: tuple = (1,)
    weights: tuple = (1.0,)
    tilt: float = 0.0
    tilt_field: object = None

    def __post_init__(self):
        if len(self.sizes) != len(self.weights) or not self.sizes:
            raise ValidationError("sizes and weights must be equal-length, non-empty")
        if any(int(s) < 1 for s in self.sizes):
            raise ValidationError("group sizes must be integers >= 1")
        if any(w < 0 for w in self.weights) or sum(self.weights) <= 0:
            raise ValidationError("weights must be >= 0 and sum to > 0")
        if self.tilt != 0.0 and self.tilt_field is None:
            raise ValidationError("tilt requires a tilt_field")

    def probabilities(self, x, y):
        """(n, K) matrix of size probabilities at each location."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        k = np.asarray(self.sizes, dtype=float)
        if self.tilt == 0.0 or self.tilt_field is None:
            p = np.tile(w / w.sum(), (x.shape[0], 1))
            return p
        z = np.asarray(self.tilt_field.values(x, y), dtype=float)
        logits = np.log(w)[None, :] + self.tilt * z[:, None] * k[None, :]
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)

    def mean_size(self, x, y):
        p = self.probabilities(x, y)
        return p @ np.asarray(self.sizes, dtype=float)

    def draw(self, x, y, rng):
        """One size per location."""
        p = self.probabilities(x, y)
        cum = np.cumsum(p, axis=1)
        u = rng.uniform(size=p.shape[0])
        idx = (u[:, None] > cum).sum(axis=1)
        return np.asarray(self.sizes, dtype=int)[idx]

    def to_dict(self):
        return {
            "sizes": [int(s) for s in self.sizes],
            "weights": [float(w) for w in self.weights],
            "tilt": float(self.tilt),
            "tilt_field": None if self.tilt_field is None else self.tilt_field.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            sizes=tuple(int(s) for s in d["sizes"]),
            weights=tuple(float(w) for w in d["weights"]),
            tilt=float(d.get("tilt", 0.0)),
            tilt_field=(
                field_from_dict(d["tilt_field"]) if d.get("tilt_field") else None
            ),
        )


# ---------------------------------------------------------------------------
# scenario


@dataclass(frozen=True)
class SimScenario:
    """Complete generating process for one synthetic survey.

    The study region is the rectangle [0, width] x [0, height]. Transects
    are parallel vertical lines with the given spacing and a random start
    offset, each cut into segments of ``segment_length`` (the final piece
    of a transect may be shorter). ``density`` is the group intensity
    (groups per unit area); ``covariate_fields`` supplies every
    detectability covariate named by ``detection`` as a function of space.
    """

    width: float
    height: float
    density: object
    detection: DetectionSpec
    theta_true: tuple
    spacing: float
    segment_length: float
    seed: int = 0
    covariate_fields: dict = field(default_factory=dict)
    group_sizes: GroupSizeModel = field(default_factory=GroupSizeModel)

    def __post_init__(self):
        issues = []
        if self.width <= 0 or self.height <= 0:
            issues.append("region width and height must be > 0")
        if self.spacing <= 0:
            issues.append("transect spacing must be > 0")
        elif self.spacing <= 2.0 * self.detection.truncation:
            issues.append(
                f"transect spacing {self.spacing:g} must exceed twice the "
                f"truncation distance {self.detection.truncation:g} so that "
                "searched strips do not overlap"
            )
        if self.segment_length <= 0:
            issues.append("segment_length must be > 0")
        for cov in self.detection.scale_covariates:
            if cov not in self.covariate_fields:
                issues.append(
                    f"detection covariate {cov!r} has no covariate field"
                )
        if issues:
            raise ValidationError(issues)

    def to_dict(self):
        return {
            "width": float(self.width),
            "height": float(self.height),
            "density": self.density.to_dict(),
            "detection": {
                "form": self.detection.form,
                "truncation": float(self.detection.truncation),
                "scale_covariates": list(self.detection.scale_covariates),
            },
            "theta_true": [float(t) for t in self.theta_true],
            "spacing": float(self.spacing),
            "segment_length": float(self.segment_length),
            "seed": int(self.seed),
            "covariate_fields": {
                name: f.to_dict() for name, f in self.covariate_fields.items()
            },
            "group_sizes": self.group_sizes.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        det = d["detection"]
        return cls(
            width=float(d["width"]),
            height=float(d["height"]),
            density=field_from_dict(d["density"]),
            detection=DetectionSpec(
                form=det["form"],
                truncation=float(det["truncation"]),
                scale_covariates=tuple(det.get("scale_covariates", ())),
            ),
            theta_true=tuple(float(t) for t in d["theta_true"]),
            spacing=float(d["spacing"]),
            segment_length=float(d["segment_length"]),
            seed=int(d.get("seed", 0)),
            covariate_fields={
                name: field_from_dict(f)
                for name, f in (d.get("covariate_fields") or {}).items()
            },
            group_sizes=GroupSizeModel.from_dict(
                d["group_sizes"]
            )
            if d.get("group_sizes")
            else GroupSizeModel(),
        )


# ---------------------------------------------------------------------------
# survey generation


@dataclass(frozen=True)
class TruthRecord:
    """What actually generated the survey, for scoring estimators.

    ``expected_*`` integrate the true intensity over the region (the
    estimand a density surface model targets); ``realized_*`` count what
    this one replicate produced.
    """

    scenario: SimScenario
    expected_groups: float
    expected_individuals: float
    realized_groups: int
    realized_individuals: int
    strip_groups: int
    detected_groups: int

    def expected_over(self, cells, individuals=True):
        """True expected abundance summed over a prediction grid."""
        return true_abundance(self.scenario, cells, individuals=individuals)


@dataclass(frozen=True)
class SimulatedSurvey:
    observations: tuple
    segments: tuple
    truth: TruthRecord


def _transect_offsets(scenario, rng):
    # Random-start systematic layout, buffered so every searched strip lies
    # fully inside the region (otherwise segment areas would overstate the
    # surveyed area near the x boundaries).
    w = scenario.detection.truncation
    start = w + rng.uniform(0.0, scenario.spacing)
    return np.arange(start, scenario.width - w + 1e-12, scenario.spacing)


def _segment_lengths(height, segment_length):
    n_full = int(math.floor(height / segment_length + 1e-12))
    lengths = [segment_length] * n_full
    rem = height - n_full * segment_length
    if rem > 1e-9 * max(height, 1.0):
        lengths.append(rem)
    return lengths


def _fine_grid(scenario, per_unit=4):
    """Cell centres + areas for integrating truth fields."""
    nx = max(int(math.ceil(scenario.width * per_unit)), 50)
    ny = max(int(math.ceil(scenario.height * per_unit)), 50)
    dx = scenario.width / nx
    dy = scenario.height / ny
    cx = (np.arange(nx) + 0.5) * dx
    cy = (np.arange(ny) + 0.5) * dy
    gx, gy = np.meshgrid(cx, cy, indexing="ij")
    return gx.ravel(), gy.ravel(), dx * dy


def simulate_survey(scenario, seed=None):
    """Generate one survey: thinned Poisson groups, Bernoulli detection.

    ``seed`` overrides the scenario's own seed (used by coverage studies
    to give each replicate an independent stream).
    """
    rng = np.random.default_rng(scenario.seed if seed is None else seed)
    w = scenario.detection.truncation

    # Transects and segments.
    offsets = _transect_offsets(scenario, rng)
    if offsets.size == 0:
        raise ValidationError(
            "no transects fall inside the region; reduce the spacing"
        )
    lengths = _segment_lengths(scenario.height, scenario.segment_length)
    seg_edges = np.concatenate([[0.0], np.cumsum(lengths)])

    # Group locations: inhomogeneous Poisson by thinning against the
    # field's stated maximum.
    area = scenario.width * scenario.height
    rho_max = float(scenario.density.upper_bound(scenario.width, scenario.height))
    if rho_max < 0:
        raise ValidationError("density upper bound is negative")
    n_cand = rng.poisson(rho_max * area) if rho_max > 0 else 0
    if n_cand > 0:
        gx = rng.uniform(0.0, scenario.width, size=n_cand)
        gy = rng.uniform(0.0, scenario.height, size=n_cand)
        rho = np.asarray(scenario.density.values(gx, gy), dtype=float)
        if np.any(rho < -1e-12):
            raise ValidationError("density field is negative inside the region")
        if np.any(rho > rho_max * (1.0 + 1e-9) + 1e-12):
            raise NumericalError(
                "density field exceeds its stated upper bound during thinning"
            )
        keep = rng.uniform(0.0, rho_max, size=n_cand) < rho
        gx, gy = gx[keep], gy[keep]
    else:
        gx = np.empty(0)
        gy = np.empty(0)
    n_groups = gx.size

    sizes = (
        scenario.group_sizes.draw(gx, gy, rng) if n_groups else np.empty(0, dtype=int)
    )

    # Perpendicular distance to the nearest transect. Strips never overlap
    # (spacing > 2w), so the nearest line is the only one that can detect.
    if n_groups:
        dists = np.abs(gx[:, None] - offsets[None, :])
        nearest = np.argmin(dists, axis=1)
        perp = dists[np.arange(n_groups), nearest]
    else:
        nearest = np.empty(0, dtype=int)
        perp = np.empty(0)

    in_strip = perp <= w
    det_prob = np.zeros(n_groups)
    if np.any(in_strip):
        covs = {
            name: np.asarray(f.values(gx[in_strip], gy[in_strip]), dtype=float)
            for name, f in scenario.covariate_fields.items()
        }
        det_prob[in_strip] = eval_pi(
            perp[in_strip], np.asarray(scenario.theta_true, dtype=float),
            scenario.detection, covariates=covs or None,
        )
    detected = (rng.uniform(size=n_groups) < det_prob) & in_strip

    # Segment bookkeeping. Counts follow the survey-table convention:
    # animals (summed group sizes), matching how counts are rederived
    # from observation linkage when data come from files.
    seg_index = np.clip(
        np.searchsorted(seg_edges, gy, side="right") - 1, 0, len(lengths) - 1
    )
    counts = {}
    observations = []
    for i in np.flatnonzero(detected):
        t, s = int(nearest[i]), int(seg_index[i])
        counts[(t, s)] = counts.get((t, s), 0) + int(sizes[i])
        observations.append(
            Observation(
                transect_id=f"t{t:03d}",
                segment_id=f"t{t:03d}-s{s:03d}",
                distance=float(perp[i]),
                group_size=int(sizes[i]),
            )
        )

    segments = []
    for t, x0 in enumerate(offsets):
        for s, ln in enumerate(lengths):
            mid_y = 0.5 * (seg_edges[s] + seg_edges[s + 1])
            effort = {
                name: float(f.values(np.array([x0]), np.array([mid_y]))[0])
                for name, f in scenario.covariate_fields.items()
            }
            segments.append(
                Segment(
                    segment_id=f"t{t:03d}-s{s:03d}",
                    transect_id=f"t{t:03d}",
                    area=2.0 * w * ln,
                    effort=effort,
                    density={"x": float(x0), "y": float(mid_y)},
                    count=counts.get((t, s), 0),
                    length=float(ln),
                )
            )

    # Truth: expected totals integrate the intensity on a fine grid.
    fx, fy, cell_area = _fine_grid(scenario)
    rho_f = np.asarray(scenario.density.values(fx, fy), dtype=float)
    mean_size_f = scenario.group_sizes.mean_size(fx, fy)
    truth = TruthRecord(
        scenario=scenario,
        expected_groups=float(np.sum(rho_f) * cell_area),
        expected_individuals=float(np.sum(rho_f * mean_size_f) * cell_area),
        realized_groups=int(n_groups),
        realized_individuals=int(sizes.sum()) if n_groups else 0,
        strip_groups=int(in_strip.sum()),
        detected_groups=int(detected.sum()),
    )
    return SimulatedSurvey(
        observations=tuple(observations), segments=tuple(segments), truth=truth
    )


def default_grid(scenario, nx=20, ny=20):
    """Uniform prediction grid over the scenario's region."""
    if nx < 1 or ny < 1:
        raise ValidationError("grid must have at least one cell per axis")
    dx = scenario.width / nx
    dy = scenario.height / ny
    cells = []
    for i in range(nx):
        for j in range(ny):
            cells.append(
                PredictionCell(
                    cell_id=f"c{i:03d}-{j:03d}",
                    area=dx * dy,
                    density={"x": (i + 0.5) * dx, "y": (j + 0.5) * dy},
                )
            )
    return cells


def true_abundance(scenario, cells, individuals=True):
    """Grid-discretised true abundance: sum of area x intensity at centres."""
    x = np.array([c.density["x"] for c in cells], dtype=float)
    y = np.array([c.density["y"] for c in cells], dtype=float)
    areas = np.array([c.area for c in cells], dtype=float)
    rho = np.asarray(scenario.density.values(x, y), dtype=float)
    if individuals:
        rho = rho * scenario.group_sizes.mean_size(x, y)
    return float(np.sum(areas * rho))


# ---------------------------------------------------------------------------
# coverage study


@dataclass(frozen=True)
class CoverageConfig:
    """How each replicate is fitted and scored."""

    smooth_specs: tuple
    family: Family
    grid_nx: int = 10
    grid_ny: int = 10
    individuals: bool = True
    min_observations: int = 10

    def __post_init__(self):
        if not self.smooth_specs:
            raise ValidationError("coverage study needs at least one smooth")
        if self.min_observations < 1:
            raise ValidationError("min_observations must be >= 1")


@dataclass(frozen=True)
class MethodCoverage:
    method: str
    n_used: int
    covered: int
    mean_cv: float
    mean_estimate: float

    @property
    def coverage(self):
        return self.covered / self.n_used if self.n_used else float("nan")

    @property
    def mc_se(self):
        """Binomial Monte Carlo standard error of the coverage estimate."""
        if not self.n_used:
            return float("nan")
        c = self.coverage
        return math.sqrt(max(c * (1.0 - c), 0.0) / self.n_used)


@dataclass(frozen=True)
class CoverageResult:
    truth: float
    n_replicates: int
    n_used: int
    failures: tuple
    methods: dict
    rows: tuple

    @property
    def failure_rate(self):
        return len(self.failures) / self.n_replicates

    def to_rows(self):
        """Per-method summary rows for tabular output."""
        out = []
        for name in sorted(self.methods):
            m = self.methods[name]
            out.append(
                {
                    "method": name,
                    "n_used": m.n_used,
                    "coverage": m.coverage,
                    "mc_se": m.mc_se,
                    "mean_cv": m.mean_cv,
                    "mean_estimate": m.mean_estimate,
                    "truth": self.truth,
                    "n_replicates": self.n_replicates,
                    "failure_rate": self.failure_rate,
                }
            )
        return out


def _replicate_estimates(scenario, config, rep_seed):
    """One replicate: simulate, fit both ways, return (N_hat, cv) per method."""
    survey = simulate_survey(scenario, seed=rep_seed)
    if len(survey.observations) < config.min_observations:
        raise ValidationError(
            f"only {len(survey.observations)} detections; "
            f"need {config.min_observations}"
        )
    det_data = build_detection_data(
        survey.observations,
        survey.segments,
        covariate_names=scenario.detection.scale_covariates,
    )
    det_fit = fit_detection(det_data, scenario.detection)
    grid = default_grid(scenario, nx=config.grid_nx, ny=config.grid_ny)

    out = {}
    vfit = fit_dsm(
        survey.segments, det_fit, config.smooth_specs, config.family,
        method="varprop",
    )
    with warnings.catch_warnings():
        # Grid cells at the region edge sit slightly beyond the outermost
        # transect; linear extrapolation there is expected, not notable.
        warnings.filterwarnings("ignore", message=".*outside the training range.*")
        for name, fit in (("varprop", vfit), ("naive", vfit.naive)):
            res = var_delta(fit, grid)
            out[name] = (res.N_hat, res.cv)
    return out


def _coverage_worker(args):
    scenario, config, rep, base_seed = args
    try:
        est = _replicate_estimates(scenario, config, [base_seed, rep])
        return (rep, est, None)
    except (DsurfError, np.linalg.LinAlgError, FloatingPointError) as exc:
        return (rep, None, f"replicate {rep}: {type(exc).__name__}: {exc}")


def coverage_study(scenario, n_replicates, config, workers=1, alpha=0.05):
    """Empirical interval coverage of each variance method.

    Each replicate simulates a fresh survey (independent seeded stream),
    refits detection + spatial model, and checks whether the log-normal
    interval ``N_hat * exp(+-z * sqrt(log(1 + cv^2)))`` captures the true
    expected abundance. Replicates whose fits fail are excluded and
    reported via ``failures``. Aggregation is sorted by replicate index,
    so results do not depend on worker scheduling.
    """
    if n_replicates < 50:
        raise ValidationError("coverage studies need n_replicates >= 50")
    if abs(alpha - 0.05) > 1e-12:
        raise ValidationError("only 95% intervals are supported (alpha = 0.05)")
    grid = default_grid(scenario, nx=config.grid_nx, ny=config.grid_ny)
    truth = true_abundance(scenario, grid, individuals=config.individuals)

    tasks = [(scenario, config, rep, int(scenario.seed)) for rep in range(n_replicates)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            raw = list(pool.map(_coverage_worker, tasks, chunksize=1))
    else:
        raw = [_coverage_worker(t) for t in tasks]
    raw.sort(key=lambda r: r[0])

    failures = []
    rows = []
    tallies = {}
    for rep, est, err in raw:
        if err is not None:
            failures.append(err)
            continue
        row = {"replicate": rep}
        for name, (n_hat, cv) in est.items():
            lo, hi = lognormal_interval(n_hat, cv)
            covered = bool(lo <= truth <= hi)
            row[name] = {
                "N_hat": n_hat, "cv": cv, "lo": lo, "hi": hi, "covered": covered,
            }
            t = tallies.setdefault(name, {"covered": 0, "cv": 0.0, "n": 0, "est": 0.0})
            t["covered"] += covered
            t["cv"] += cv
            t["est"] += n_hat
            t["n"] += 1
        rows.append(row)

    methods = {
        name: MethodCoverage(
            method=name,
            n_used=t["n"],
            covered=t["covered"],
            mean_cv=t["cv"] / t["n"] if t["n"] else float("nan"),
            mean_estimate=t["est"] / t["n"] if t["n"] else float("nan"),
        )
        for name, t in tallies.items()
    }
    return CoverageResult(
        truth=truth,
        n_replicates=n_replicates,
        n_used=len(rows),
        failures=tuple(failures),
        methods=methods,
        rows=tuple(rows),
    )
