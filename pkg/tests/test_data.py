"""Survey tables: validation, counting, and CSV round trips."""

import numpy as np
import pytest

from dsurf.data import (
    CovariateBinning,
    Observation,
    PredictionCell,
    Segment,
    bin_covariate,
    load_observations,
    load_prediction_grid,
    load_segments,
    recount_segments,
    save_survey,
    validate_survey,
)
from dsurf.exceptions import ValidationError


def _segments():
    return [
        Segment(
            segment_id=f"s{i}",
            transect_id="t0",
            area=2.0,
            effort={"weather": float(i)},
            density={"x": float(i), "y": 0.5},
            length=1.0,
        )
        for i in range(4)
    ]


def _observations():
    return [
        Observation(transect_id="t0", segment_id="s0", distance=0.2, group_size=1),
        Observation(transect_id="t0", segment_id="s0", distance=0.7, group_size=3),
        Observation(transect_id="t0", segment_id="s2", distance=0.1, group_size=2),
    ]


class TestTypes:
    def test_negative_distance_rejected(self):
        with pytest.raises(ValidationError):
            Observation(transect_id="t", segment_id="s", distance=-0.1)

    def test_zero_group_size_rejected(self):
        with pytest.raises(ValidationError):
            Observation(transect_id="t", segment_id="s", distance=0.1, group_size=0)

    def test_nonpositive_area_rejected(self):
        with pytest.raises(ValidationError):
            Segment(segment_id="s", transect_id="t", area=0.0)
        with pytest.raises(ValidationError):
            PredictionCell(cell_id="c", area=-1.0)


class TestRecount:
    def test_counts_are_summed_group_sizes(self):
        segs = recount_segments(_segments(), _observations())
        assert [s.count for s in segs] == [4, 0, 2, 0]

    def test_unlinked_observation_rejected(self):
        obs = [Observation(transect_id="t0", segment_id="nope", distance=0.1)]
        with pytest.raises(ValidationError, match="nope"):
            recount_segments(_segments(), obs)


class TestBinning:
    def test_default_labels_and_assignment(self):
        b = CovariateBinning(source="beaufort", breaks=(0, 2, 4))
        assert b.labels == ("[0,2]", "(2,4]")
        assert list(bin_covariate(np.array([0.0, 2.0, 2.1, 4.0]), b)) == [
            "[0,2]", "[0,2]", "(2,4]", "(2,4]",
        ]

    def test_out_of_range_rejected(self):
        b = CovariateBinning(source="z", breaks=(0, 1))
        with pytest.raises(ValidationError):
            bin_covariate(np.array([1.5]), b)

    def test_non_increasing_breaks_rejected(self):
        with pytest.raises(ValidationError):
            CovariateBinning(source="z", breaks=(1, 1))


class TestCsvRoundTrip:
    def test_survey_round_trips(self, tmp_path):
        segs = recount_segments(_segments(), _observations())
        grid = [
            PredictionCell(cell_id=f"c{i}", area=1.5, density={"x": float(i), "y": 0.0})
            for i in range(3)
        ]
        save_survey(tmp_path, _observations(), segs, grid=grid)

        obs2 = load_observations(tmp_path / "observations.csv")
        assert [(o.segment_id, o.distance, o.group_size) for o in obs2] == [
            (o.segment_id, o.distance, o.group_size) for o in _observations()
        ]

        segs2 = load_segments(
            tmp_path / "segments.csv",
            effort_covariates=("weather",),
            density_covariates=("x", "y"),
        )
        assert [s.segment_id for s in segs2] == [s.segment_id for s in segs]
        assert [s.area for s in segs2] == [s.area for s in segs]
        assert [s.effort["weather"] for s in segs2] == [
            s.effort["weather"] for s in segs
        ]

        grid2 = load_prediction_grid(
            tmp_path / "predgrid.csv", density_covariates=("x", "y")
        )
        assert [c.cell_id for c in grid2] == [c.cell_id for c in grid]
        assert [c.density["x"] for c in grid2] == [c.density["x"] for c in grid]

    def test_float_precision_survives(self, tmp_path):
        val = 0.1234567890123456789
        segs = [
            Segment(segment_id="s0", transect_id="t", area=val, density={"x": val})
        ]
        save_survey(tmp_path, [], segs)
        seg2 = load_segments(tmp_path / "segments.csv", density_covariates=("x",))[0]
        assert seg2.area == float(val)
        assert seg2.density["x"] == float(val)

    def test_missing_column_is_named(self, tmp_path):
        save_survey(tmp_path, [], _segments())
        with pytest.raises(ValidationError, match="depth"):
            load_segments(tmp_path / "segments.csv", density_covariates=("depth",))


class TestValidateSurvey:
    def test_clean_survey_passes(self):
        report = validate_survey(
            _observations(),
            _segments(),
            detection_covariates=("weather",),
            smooth_covariates=("x", "y"),
            truncation=1.0,
            distance_to_area_length=1.0,
        )
        assert report.ok
        report.raise_if_failed()  # no-op when clean

    def test_all_issues_collected(self):
        obs = _observations() + [
            Observation(transect_id="t0", segment_id="missing", distance=0.3)
        ]
        segs = _segments() + [
            Segment(segment_id="bare", transect_id="t1", area=1.0)
        ]
        report = validate_survey(
            obs,
            segs,
            detection_covariates=("weather",),
            smooth_covariates=("x",),
            truncation=0.25,
            distance_to_area_length=1.0,
        )
        assert not report.ok
        with pytest.raises(ValidationError) as err:
            report.raise_if_failed()
        text = str(err.value)
        assert "missing" in text  # unlinked observation
        assert "0.25" in text  # beyond-truncation distances
        assert "weather" in text and "bare" in text  # absent covariates
