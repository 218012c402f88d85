"""Config parsing, validation, and content hashing."""

import math
import os

import pytest
import yaml

from dsurf.config import (
    canonical_json,
    config_hash,
    load_run_config,
    load_scenario_config,
    read_config,
)
from dsurf.detection import DetectionSpec
from dsurf.exceptions import ConfigError
from dsurf.sim import ConstantField, SimScenario


def _write(tmp_path, name, payload):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(payload))
    return str(p)


def _touch(tmp_path, name):
    p = tmp_path / name
    p.write_text("x\n")
    return str(p)


FULL_RUN = {
    "observations": "obs.csv",
    "segments": "seg.csv",
    "grid": "grid.csv",
    "out": "results",
    "seed": 7,
    "detection": {"form": "hazard-rate", "truncation": 1.5, "covariates": ["sea"]},
    "smooths": [
        {"covariates": ["x"], "basis_dim": 8},
        {"covariates": ["x", "y"], "basis_dim": 5, "type": "tensor-2d"},
    ],
    "family": {"kind": "tweedie", "tweedie_power": 1.4},
    "method": "varprop",
    "variance": ["delta", "sim"],
    "B": 250,
}


class TestHashing:
    def test_canonical_json_is_key_order_invariant(self):
        a = {"b": 1, "a": {"y": [1, 2], "x": "s"}}
        b = {"a": {"x": "s", "y": [1, 2]}, "b": 1}
        assert canonical_json(a) == canonical_json(b)
        assert config_hash(a) == config_hash(b)

    def test_hash_is_16_hex_and_value_sensitive(self):
        h = config_hash({"a": 1})
        assert len(h) == 16
        int(h, 16)  # parses as hex
        assert config_hash({"a": 2}) != h

    def test_nan_rejected(self):
        with pytest.raises(ValueError):
            canonical_json({"a": float("nan")})


class TestReadConfig:
    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            read_config(str(tmp_path / "nope.yaml"))

    def test_invalid_yaml(self, tmp_path):
        p = tmp_path / "bad.yaml"
        p.write_text("a: [1, 2\n")
        with pytest.raises(ConfigError, match="not valid YAML"):
            read_config(str(p))

    def test_non_mapping_top_level(self, tmp_path):
        p = tmp_path / "list.yaml"
        p.write_text("- 1\n- 2\n")
        with pytest.raises(ConfigError, match="mapping"):
            read_config(str(p))


class TestRunConfig:
    def test_full_config_parses(self, tmp_path):
        path = _write(tmp_path, "run.yaml", FULL_RUN)
        cfg = load_run_config(path)
        assert cfg.seed == 7
        assert cfg.method == "varprop"
        assert cfg.variance == ("delta", "sim")
        assert cfg.B == 250
        assert cfg.detection == DetectionSpec(
            form="hazard-rate", truncation=1.5, scale_covariates=("sea",)
        )
        assert [s.covariates for s in cfg.smooths] == [("x",), ("x", "y")]
        assert cfg.smooths[1].smooth_type == "tensor-2d"
        assert cfg.family.kind == "tweedie"
        assert cfg.family.tweedie_power == 1.4
        # relative paths resolve against the config's own directory
        assert cfg.observations == str(tmp_path / "obs.csv")
        assert cfg.out_dir == str(tmp_path / "results")
        assert cfg.hash == config_hash(FULL_RUN)

    def test_absolute_paths_kept(self, tmp_path):
        payload = {"observations": "/elsewhere/obs.csv"}
        cfg = load_run_config(_write(tmp_path, "run.yaml", payload))
        assert cfg.observations == "/elsewhere/obs.csv"

    def test_defaults(self, tmp_path):
        cfg = load_run_config(_write(tmp_path, "run.yaml", {}))
        assert cfg.method == "varprop"
        assert cfg.variance == ("delta",)
        assert cfg.B == 100
        assert cfg.seed == 0
        assert cfg.smooths == ()
        assert cfg.family is None

    def test_unknown_key_named(self, tmp_path):
        path = _write(tmp_path, "run.yaml", {"varaince": ["delta"]})
        with pytest.raises(ConfigError, match="varaince"):
            load_run_config(path)

    def test_unknown_detection_key(self, tmp_path):
        payload = {"detection": {"truncation": 1.0, "sigma": 2.0}}
        with pytest.raises(ConfigError, match="sigma"):
            load_run_config(_write(tmp_path, "run.yaml", payload))

    def test_unknown_smooth_key(self, tmp_path):
        payload = {"smooths": [{"covariates": ["x"], "knots": 4}]}
        with pytest.raises(ConfigError, match="knots"):
            load_run_config(_write(tmp_path, "run.yaml", payload))

    def test_bad_method(self, tmp_path):
        with pytest.raises(ConfigError, match="method"):
            load_run_config(_write(tmp_path, "run.yaml", {"method": "bayes"}))

    def test_bad_variance(self, tmp_path):
        with pytest.raises(ConfigError, match="bootstrap"):
            load_run_config(
                _write(tmp_path, "run.yaml", {"variance": ["bootstrap"]})
            )

    def test_variance_string_promoted(self, tmp_path):
        cfg = load_run_config(_write(tmp_path, "run.yaml", {"variance": "sim"}))
        assert cfg.variance == ("sim",)

    def test_small_B_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="B"):
            load_run_config(_write(tmp_path, "run.yaml", {"B": 1}))

    def test_group_bins_forms(self, tmp_path):
        payload = {"group_size_bins": [1, [2, 3], [4, 6]]}
        cfg = load_run_config(_write(tmp_path, "run.yaml", payload))
        assert cfg.group_size_bins == (1, (2, 3), (4, 6))
        bad = {"group_size_bins": [[1, 2, 3]]}
        with pytest.raises(ConfigError, match="group_size_bins"):
            load_run_config(_write(tmp_path, "bad.yaml", bad))

    def test_require_inputs(self, tmp_path):
        payload = {"observations": "obs.csv"}
        cfg = load_run_config(_write(tmp_path, "run.yaml", payload))
        with pytest.raises(ConfigError, match="segments"):
            cfg.require_inputs("segments")
        with pytest.raises(ConfigError, match="obs.csv"):
            cfg.require_inputs("observations")
        _touch(tmp_path, "obs.csv")
        cfg.require_inputs("observations")  # now satisfied


class TestScenarioConfig:
    def _scenario(self):
        return SimScenario(
            width=10.0,
            height=5.0,
            density=ConstantField(2.0),
            detection=DetectionSpec(form="half-normal", truncation=0.5),
            theta_true=(math.log(0.4),),
            spacing=2.0,
            segment_length=1.0,
            seed=3,
        )

    def test_round_trip(self, tmp_path):
        sc = self._scenario()
        payload = {
            "scenario": sc.to_dict(),
            "coverage": {
                "n_replicates": 80,
                "workers": 2,
                "grid": [6, 4],
                "smooths": [{"covariates": ["x"], "basis_dim": 5}],
                "family": "poisson",
                "min_observations": 15,
            },
        }
        cfg = load_scenario_config(_write(tmp_path, "sc.yaml", payload))
        assert cfg.scenario == sc
        assert cfg.n_replicates == 80
        assert cfg.workers == 2
        assert (cfg.grid_nx, cfg.grid_ny) == (6, 4)
        assert cfg.family.kind == "poisson"
        assert cfg.min_observations == 15
        assert cfg.hash == config_hash(payload)

    def test_defaults(self, tmp_path):
        payload = {"scenario": self._scenario().to_dict()}
        cfg = load_scenario_config(_write(tmp_path, "sc.yaml", payload))
        assert cfg.n_replicates == 200
        assert cfg.workers == 1
        assert (cfg.grid_nx, cfg.grid_ny) == (10, 10)

    def test_bad_scenario(self, tmp_path):
        with pytest.raises(ConfigError, match="scenario"):
            load_scenario_config(_write(tmp_path, "sc.yaml", {"scenario": {}}))

    def test_unknown_keys(self, tmp_path):
        payload = {"scenario": self._scenario().to_dict(), "replicates": 10}
        with pytest.raises(ConfigError, match="replicates"):
            load_scenario_config(_write(tmp_path, "sc.yaml", payload))
        payload2 = {
            "scenario": self._scenario().to_dict(),
            "coverage": {"nrep": 10},
        }
        with pytest.raises(ConfigError, match="nrep"):
            load_scenario_config(_write(tmp_path, "sc.yaml", payload2))

    def test_bad_grid(self, tmp_path):
        payload = {
            "scenario": self._scenario().to_dict(),
            "coverage": {"grid": [4]},
        }
        with pytest.raises(ConfigError, match="grid"):
            load_scenario_config(_write(tmp_path, "sc.yaml", payload))
