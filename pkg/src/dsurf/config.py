"""Run configuration: YAML parsing, validation, and content hashing.

A run config is a plain YAML mapping naming the input files and the model
to fit. Every output the batch front end writes embeds the config's
content hash and the seed, so a rerun can be matched to exactly the
settings that produced it.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import yaml

from .detection import DetectionSpec
from .exceptions import ConfigError
from .families import Family
from .smooth import SmoothSpec
from .sim import SimScenario

__all__ = [
    "RunConfig",
    "canonical_json",
    "config_hash",
    "read_config",
    "load_run_config",
    "load_scenario_config",
]


def canonical_json(obj):
    """Deterministic JSON: sorted keys, no whitespace, no NaN."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(cfg):
    """Content hash of a config mapping (first 16 hex digits of SHA-256)."""
    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()[:16]


def read_config(path):
    """Load a YAML mapping, raising ConfigError on anything else."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must contain a mapping at top level")
    return raw


def _require(cfg, key, path):
    if key not in cfg:
        raise ConfigError(f"config {path}: missing required key {key!r}")
    return cfg[key]


def _detection_spec(d, path):
    if not isinstance(d, dict):
        raise ConfigError(f"config {path}: 'detection' must be a mapping")
    unknown = set(d) - {"form", "truncation", "covariates"}
    if unknown:
        raise ConfigError(
            f"config {path}: unknown detection keys {sorted(unknown)}"
        )
    try:
        return DetectionSpec(
            form=d.get("form", "half-normal"),
            truncation=float(_require(d, "truncation", path)),
            scale_covariates=tuple(d.get("covariates") or ()),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config {path}: bad detection spec: {exc}") from exc


def _smooth_specs(items, path):
    if not isinstance(items, list) or not items:
        raise ConfigError(f"config {path}: 'smooths' must be a non-empty list")
    specs = []
    for i, d in enumerate(items):
        if not isinstance(d, dict):
            raise ConfigError(f"config {path}: smooths[{i}] must be a mapping")
        unknown = set(d) - {"covariates", "basis_dim", "type", "factor", "name"}
        if unknown:
            raise ConfigError(
                f"config {path}: smooths[{i}] unknown keys {sorted(unknown)}"
            )
        covs = d.get("covariates")
        if not covs:
            raise ConfigError(f"config {path}: smooths[{i}] needs 'covariates'")
        kwargs = {
            "covariates": tuple(covs),
            "basis_dim": d.get("basis_dim", 10),
        }
        if "type" in d:
            kwargs["smooth_type"] = d["type"]
        if "factor" in d:
            kwargs["factor"] = d["factor"]
        if "name" in d:
            kwargs["name"] = d["name"]
        specs.append(SmoothSpec(**kwargs))
    return tuple(specs)


def _family(d, path):
    if isinstance(d, str):
        d = {"kind": d}
    if not isinstance(d, dict):
        raise ConfigError(f"config {path}: 'family' must be a mapping or a name")
    unknown = set(d) - {"kind", "tweedie_power", "phi"}
    if unknown:
        raise ConfigError(f"config {path}: unknown family keys {sorted(unknown)}")
    return Family(
        kind=_require(d, "kind", path),
        tweedie_power=d.get("tweedie_power"),
        phi=d.get("phi"),
    )


def _group_bins(items, path):
    if items is None:
        return None
    if not isinstance(items, list) or not items:
        raise ConfigError(f"config {path}: 'group_size_bins' must be a non-empty list")
    bins = []
    for i, b in enumerate(items):
        if isinstance(b, int):
            bins.append(b)
        elif isinstance(b, list) and len(b) == 2:
            bins.append((int(b[0]), int(b[1])))
        else:
            raise ConfigError(
                f"config {path}: group_size_bins[{i}] must be an int or [lo, hi]"
            )
    return tuple(bins)


_RUN_KEYS = {
    "observations",
    "segments",
    "grid",
    "out",
    "seed",
    "detection",
    "detection_fit",
    "smooths",
    "family",
    "group_size_bins",
    "method",
    "variance",
    "B",
}

_VARIANCE_METHODS = ("delta", "sim", "independence", "ht-averaged")


@dataclass(frozen=True)
class RunConfig:
    """Parsed and validated batch-run settings."""

    path: str
    raw: dict
    observations: str | None
    segments: str | None
    grid: str | None
    out_dir: str | None
    seed: int
    detection: DetectionSpec | None
    detection_fit: str | None
    smooths: tuple
    family: Family | None
    group_size_bins: tuple | None
    method: str
    variance: tuple
    B: int

    @property
    def hash(self):
        return config_hash(self.raw)

    def require_inputs(self, *names):
        """Check the named input files are configured and exist."""
        missing = []
        for name in names:
            p = getattr(self, name)
            if p is None:
                missing.append(f"config {self.path}: missing required key {name!r}")
            elif not os.path.exists(p):
                missing.append(f"config {self.path}: {name} file not found: {p}")
        if missing:
            raise ConfigError("; ".join(missing))


def load_run_config(path):
    raw = read_config(path)
    unknown = set(raw) - _RUN_KEYS
    if unknown:
        raise ConfigError(f"config {path}: unknown keys {sorted(unknown)}")

    def _resolve(key):
        p = raw.get(key)
        if p is None:
            return None
        if not isinstance(p, str):
            raise ConfigError(f"config {path}: {key!r} must be a path string")
        if os.path.isabs(p):
            return p
        return os.path.join(os.path.dirname(os.path.abspath(path)), p)

    method = raw.get("method", "varprop")
    if method not in ("varprop", "naive"):
        raise ConfigError(
            f"config {path}: method must be 'varprop' or 'naive', got {method!r}"
        )
    variance = raw.get("variance", ["delta"])
    if isinstance(variance, str):
        variance = [variance]
    bad = [v for v in variance if v not in _VARIANCE_METHODS]
    if bad:
        raise ConfigError(
            f"config {path}: unknown variance methods {bad}; "
            f"expected subset of {list(_VARIANCE_METHODS)}"
        )
    b = int(raw.get("B", 100))
    if b < 2:
        raise ConfigError(f"config {path}: B must be >= 2, got {b}")
    seed = int(raw.get("seed", 0))

    return RunConfig(
        path=path,
        raw=raw,
        observations=_resolve("observations"),
        segments=_resolve("segments"),
        grid=_resolve("grid"),
        out_dir=_resolve("out"),
        seed=seed,
        detection=_detection_spec(raw["detection"], path) if "detection" in raw else None,
        detection_fit=_resolve("detection_fit"),
        smooths=_smooth_specs(raw["smooths"], path) if "smooths" in raw else (),
        family=_family(raw["family"], path) if "family" in raw else None,
        group_size_bins=_group_bins(raw.get("group_size_bins"), path),
        method=method,
        variance=tuple(variance),
        B=b,
    )


@dataclass(frozen=True)
class ScenarioConfig:
    """Parsed simulation-scenario settings (simulate / coverage commands)."""

    path: str
    raw: dict
    scenario: SimScenario
    n_replicates: int
    workers: int
    grid_nx: int
    grid_ny: int
    smooths: tuple = ()
    family: Family | None = None
    min_observations: int = 10

    @property
    def hash(self):
        return config_hash(self.raw)


def load_scenario_config(path):
    raw = read_config(path)
    unknown = set(raw) - {"scenario", "coverage"}
    if unknown:
        raise ConfigError(f"config {path}: unknown keys {sorted(unknown)}")
    try:
        scenario = SimScenario.from_dict(_require(raw, "scenario", path))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"config {path}: bad scenario: {exc}") from exc

    cov = raw.get("coverage") or {}
    if not isinstance(cov, dict):
        raise ConfigError(f"config {path}: 'coverage' must be a mapping")
    unknown = set(cov) - {
        "n_replicates", "workers", "grid", "smooths", "family", "min_observations",
    }
    if unknown:
        raise ConfigError(f"config {path}: unknown coverage keys {sorted(unknown)}")
    grid = cov.get("grid", [10, 10])
    if not (isinstance(grid, list) and len(grid) == 2):
        raise ConfigError(f"config {path}: coverage grid must be [nx, ny]")

    return ScenarioConfig(
        path=path,
        raw=raw,
        scenario=scenario,
        n_replicates=int(cov.get("n_replicates", 200)),
        workers=int(cov.get("workers", 1)),
        grid_nx=int(grid[0]),
        grid_ny=int(grid[1]),
        smooths=_smooth_specs(cov["smooths"], path) if "smooths" in cov else (),
        family=_family(cov["family"], path) if "family" in cov else None,
        min_observations=int(cov.get("min_observations", 10)),
    )
