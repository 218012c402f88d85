"""Survey data model: observations, segments, prediction grids, binning.

Distances (observation perpendicular distances, truncation) are in the
distance unit declared by the run configuration (metres by default);
segment and prediction-cell areas are in the declared area unit (square
kilometres by default). Loaders never convert units; validation only
checks that the declared units are mutually consistent.
"""

import csv
import warnings
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np
import pandas as pd

from .exceptions import ValidationError


@dataclass(frozen=True)
class Observation:
    """A detected group: which segment saw it, how far off the line, how big."""

    transect_id: str
    segment_id: str
    distance: float
    group_size: int = 1

    def __post_init__(self):
        if not np.isfinite(self.distance) or self.distance < 0:
            raise ValidationError(
                f"observation in segment {self.segment_id}: distance must be "
                f"finite and >= 0, got {self.distance!r}"
            )
        if self.group_size < 1:
            raise ValidationError(
                f"observation in segment {self.segment_id}: group size must be "
                f">= 1, got {self.group_size!r}"
            )


@dataclass(frozen=True)
class Segment:
    """A contiguous piece of searched transect with its covariates.

    ``effort`` holds detectability covariates (factor levels as strings,
    continuous values as floats); ``density`` holds the covariates the
    spatial model smooths over (always numeric).
    """

    segment_id: str
    transect_id: str
    area: float
    effort: Mapping[str, object] = field(default_factory=dict)
    density: Mapping[str, float] = field(default_factory=dict)
    count: int | None = None
    length: float | None = None

    def __post_init__(self):
        if not np.isfinite(self.area) or self.area <= 0:
            raise ValidationError(
                f"segment {self.segment_id}: area must be finite and > 0, "
                f"got {self.area!r}"
            )


@dataclass(frozen=True)
class PredictionCell:
    """One cell of the prediction grid: area plus density covariates."""

    cell_id: str
    area: float
    density: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not np.isfinite(self.area) or self.area <= 0:
            raise ValidationError(
                f"cell {self.cell_id}: area must be finite and > 0, got {self.area!r}"
            )


@dataclass(frozen=True)
class CovariateBinning:
    """Recode a continuous covariate into ordered interval labels.

    Intervals are left-closed for the first bin and left-open afterwards:
    breaks (b0, b1, ..., bK) produce [b0,b1], (b1,b2], ..., (b_{K-1},bK].
    """

    source: str
    breaks: tuple
    labels: tuple | None = None
    output: str | None = None

    def __post_init__(self):
        breaks = tuple(float(b) for b in self.breaks)
        if len(breaks) < 2 or any(
            breaks[i] >= breaks[i + 1] for i in range(len(breaks) - 1)
        ):
            raise ValidationError(
                f"binning for {self.source!r}: breaks must be strictly "
                f"increasing with at least two values, got {self.breaks!r}"
            )
        object.__setattr__(self, "breaks", breaks)
        if self.labels is None:
            labels = [f"[{_num(breaks[0])},{_num(breaks[1])}]"]
            labels += [
                f"({_num(breaks[i])},{_num(breaks[i + 1])}]"
                for i in range(1, len(breaks) - 1)
            ]
            object.__setattr__(self, "labels", tuple(labels))
        else:
            labels = tuple(str(s) for s in self.labels)
            if len(labels) != len(breaks) - 1:
                raise ValidationError(
                    f"binning for {self.source!r}: {len(labels)} labels for "
                    f"{len(breaks) - 1} intervals"
                )
            if len(set(labels)) != len(labels):
                raise ValidationError(
                    f"binning for {self.source!r}: labels must be unique"
                )
            object.__setattr__(self, "labels", labels)
        if self.output is None:
            object.__setattr__(self, "output", self.source + "_bin")


def _num(x):
    return f"{x:g}"


def bin_covariate(values, binning):
    """Map numeric values to the binning's interval labels.

    Every input must fall inside [breaks[0], breaks[-1]]; out-of-range
    values are all reported together.
    """
    vals = np.asarray(values, dtype=float)
    breaks = np.asarray(binning.breaks)
    bad = [
        f"value {v!r} at position {i} outside [{breaks[0]:g}, {breaks[-1]:g}] "
        f"for binning of {binning.source!r}"
        for i, v in enumerate(vals)
        if not np.isfinite(v) or v < breaks[0] or v > breaks[-1]
    ]
    if bad:
        raise ValidationError(bad)
    idx = np.searchsorted(breaks, vals, side="left") - 1
    idx = np.clip(idx, 0, len(binning.labels) - 1)
    labels = np.asarray(binning.labels, dtype=object)
    return labels[idx]


def apply_binnings(segments, binnings):
    """Return segments with each binning's output added to ``effort``."""
    out = list(segments)
    for binning in binnings:
        values = []
        for s in out:
            if binning.source not in s.effort:
                raise ValidationError(
                    f"segment {s.segment_id}: missing covariate "
                    f"{binning.source!r} required by a binning"
                )
            values.append(s.effort[binning.source])
        labels = bin_covariate(values, binning)
        out = [
            replace(s, effort={**s.effort, binning.output: lab})
            for s, lab in zip(out, labels)
        ]
    return out


def truncate_observations(observations, truncation):
    """Keep observations with distance <= truncation (boundary included)."""
    if not np.isfinite(truncation) or truncation <= 0:
        raise ValidationError(
            f"truncation distance must be finite and > 0, got {truncation!r}"
        )
    kept = [o for o in observations if o.distance <= truncation]
    if observations and not kept:
        warnings.warn(
            f"truncation at {truncation:g} removed every observation",
            stacklevel=2,
        )
    return kept


def recount_segments(segments, observations):
    """Recompute per-segment counts (animals) from observation linkage."""
    known = {s.segment_id for s in segments}
    orphans = sorted({o.segment_id for o in observations} - known)
    if orphans:
        raise ValidationError(
            [f"observation references unknown segment {sid!r}" for sid in orphans]
        )
    counts = Counter()
    for o in observations:
        counts[o.segment_id] += o.group_size
    return [replace(s, count=counts.get(s.segment_id, 0)) for s in segments]


def effort_values(segments, name):
    """Per-segment values of one effort covariate, missing names reported."""
    missing = [s.segment_id for s in segments if name not in s.effort]
    if missing:
        raise ValidationError(
            [f"segment {sid}: missing effort covariate {name!r}" for sid in missing]
        )
    vals = [s.effort[name] for s in segments]
    if all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in vals):
        return np.asarray(vals, dtype=float)
    return np.asarray([str(v) for v in vals], dtype=object)


def density_values(rows, name):
    """Per-row values of one density covariate from segments or cells."""
    missing = []
    vals = []
    for r in rows:
        rid = getattr(r, "segment_id", None) or getattr(r, "cell_id", "?")
        if name not in r.density:
            missing.append(f"row {rid}: missing density covariate {name!r}")
        else:
            vals.append(float(r.density[name]))
    if missing:
        raise ValidationError(missing)
    return np.asarray(vals, dtype=float)


# ---------------------------------------------------------------------------
# CSV ingestion


def _read_table(path):
    try:
        return pd.read_csv(path, comment="#", float_precision="round_trip")
    except FileNotFoundError:
        raise ValidationError(f"file not found: {path}") from None


def _require_columns(df, needed, path):
    missing = [c for c in needed if c not in df.columns]
    if missing:
        raise ValidationError(
            [f"{path}: missing column {c!r}" for c in missing]
        )


def load_observations(path, schema=None):
    """Read observations.csv. Extra columns are ignored.

    ``schema`` maps the canonical names (transect_id, segment_id,
    distance, size) to the file's column names when they differ.
    """
    cols = {"transect_id": "transect_id", "segment_id": "segment_id",
            "distance": "distance", "size": "size"}
    cols.update(schema or {})
    df = _read_table(path)
    _require_columns(df, cols.values(), path)
    issues = []
    out = []
    for i in range(len(df)):
        row = df.iloc[i]
        rec = {k: row[c] for k, c in cols.items()}
        try:
            dist = float(rec["distance"])
        except (TypeError, ValueError):
            issues.append(f"{path} row {i + 1}: distance {rec['distance']!r} not numeric")
            continue
        size_raw = rec["size"]
        try:
            size = int(size_raw)
            if size != float(size_raw):
                raise ValueError
        except (TypeError, ValueError):
            issues.append(f"{path} row {i + 1}: size {size_raw!r} not a positive integer")
            continue
        if not np.isfinite(dist) or dist < 0:
            issues.append(f"{path} row {i + 1}: distance {dist!r} must be >= 0")
            continue
        if size < 1:
            issues.append(f"{path} row {i + 1}: size {size!r} must be >= 1")
            continue
        out.append(
            Observation(
                transect_id=str(rec["transect_id"]),
                segment_id=str(rec["segment_id"]),
                distance=dist,
                group_size=size,
            )
        )
    if issues:
        raise ValidationError(issues)
    return out


def load_segments(path, effort_covariates=(), density_covariates=(), schema=None):
    """Read segments.csv with the named covariate columns.

    Counts present in the file are ignored; they are always rederived
    from observation linkage.
    """
    cols = {"segment_id": "segment_id", "transect_id": "transect_id", "area": "area"}
    cols.update(schema or {})
    df = _read_table(path)
    needed = list(cols.values()) + list(effort_covariates) + list(density_covariates)
    _require_columns(df, needed, path)
    has_length = "length" in df.columns
    issues = []
    out = []
    for i in range(len(df)):
        row = df.iloc[i]
        try:
            area = float(row[cols["area"]])
        except (TypeError, ValueError):
            issues.append(f"{path} row {i + 1}: area {row[cols['area']]!r} not numeric")
            continue
        if not np.isfinite(area) or area <= 0:
            issues.append(f"{path} row {i + 1}: area {area!r} must be > 0")
            continue
        effort = {}
        for name in effort_covariates:
            v = row[name]
            if pd.isna(v):
                issues.append(f"{path} row {i + 1}: missing value for {name!r}")
            elif isinstance(v, str):
                effort[name] = v
            else:
                effort[name] = float(v)
        density = {}
        for name in density_covariates:
            v = row[name]
            if pd.isna(v) or not np.isfinite(float(v)):
                issues.append(f"{path} row {i + 1}: non-finite value for {name!r}")
            else:
                density[name] = float(v)
        length = float(row["length"]) if has_length and not pd.isna(row["length"]) else None
        if issues and issues[-1].startswith(f"{path} row {i + 1}"):
            continue
        out.append(
            Segment(
                segment_id=str(row[cols["segment_id"]]),
                transect_id=str(row[cols["transect_id"]]),
                area=area,
                effort=effort,
                density=density,
                length=length,
            )
        )
    if issues:
        raise ValidationError(issues)
    ids = [s.segment_id for s in out]
    dupes = sorted({i for i, n in Counter(ids).items() if n > 1})
    if dupes:
        raise ValidationError([f"{path}: duplicate segment_id {d!r}" for d in dupes])
    return out


def load_prediction_grid(path, density_covariates=(), schema=None):
    """Read predgrid.csv: cell_id, area, density covariates."""
    cols = {"cell_id": "cell_id", "area": "area"}
    cols.update(schema or {})
    df = _read_table(path)
    _require_columns(df, list(cols.values()) + list(density_covariates), path)
    issues = []
    out = []
    for i in range(len(df)):
        row = df.iloc[i]
        try:
            area = float(row[cols["area"]])
        except (TypeError, ValueError):
            issues.append(f"{path} row {i + 1}: area not numeric")
            continue
        if not np.isfinite(area) or area <= 0:
            issues.append(f"{path} row {i + 1}: area {area!r} must be > 0")
            continue
        density = {}
        for name in density_covariates:
            v = row[name]
            if pd.isna(v) or not np.isfinite(float(v)):
                issues.append(f"{path} row {i + 1}: non-finite value for {name!r}")
            else:
                density[name] = float(v)
        if issues and issues[-1].startswith(f"{path} row {i + 1}"):
            continue
        out.append(PredictionCell(cell_id=str(row[cols["cell_id"]]), area=area, density=density))
    if issues:
        raise ValidationError(issues)
    return out


# ---------------------------------------------------------------------------
# Validation


@dataclass(frozen=True)
class ValidationIssue:
    kind: str
    message: str


@dataclass
class ValidationReport:
    issues: list

    @property
    def ok(self):
        return not self.issues

    def raise_if_failed(self):
        if self.issues:
            raise ValidationError([i.message for i in self.issues])

    def __str__(self):
        if self.ok:
            return "validation passed"
        return "\n".join(f"[{i.kind}] {i.message}" for i in self.issues)


def validate_survey(
    observations,
    segments,
    grid=None,
    *,
    detection_covariates=(),
    smooth_covariates=(),
    truncation=None,
    sides=2.0,
    distance_to_area_length=1e-3,
):
    """Cross-check a survey before modelling; collects every failure.

    ``distance_to_area_length`` converts the distance unit into the
    length unit implied by the area unit (metres to kilometres by
    default), used only for the strip-area consistency check.
    """
    issues = []

    seg_ids = {s.segment_id for s in segments}
    for o in observations:
        if o.segment_id not in seg_ids:
            issues.append(
                ValidationIssue(
                    "linkage",
                    f"observation references unknown segment {o.segment_id!r}",
                )
            )
    for name in detection_covariates:
        for s in segments:
            if name not in s.effort:
                issues.append(
                    ValidationIssue(
                        "covariate",
                        f"segment {s.segment_id}: missing effort covariate {name!r}",
                    )
                )
    for name in smooth_covariates:
        for s in segments:
            if name not in s.density:
                issues.append(
                    ValidationIssue(
                        "covariate",
                        f"segment {s.segment_id}: missing density covariate {name!r}",
                    )
                )
        if grid is not None:
            for c in grid:
                if name not in c.density:
                    issues.append(
                        ValidationIssue(
                            "grid",
                            f"cell {c.cell_id}: missing density covariate {name!r}",
                        )
                    )
    if truncation is not None:
        for o in observations:
            if o.distance > truncation:
                issues.append(
                    ValidationIssue(
                        "truncation",
                        f"observation in segment {o.segment_id}: distance "
                        f"{o.distance:g} exceeds truncation {truncation:g} "
                        f"(truncate first)",
                    )
                )
        w_len = truncation * distance_to_area_length
        for s in segments:
            if s.length is None:
                continue
            expected = sides * w_len * (s.length * distance_to_area_length)
            if expected > 0 and abs(s.area - expected) > 0.2 * expected:
                issues.append(
                    ValidationIssue(
                        "units",
                        f"segment {s.segment_id}: area {s.area:g} differs from "
                        f"{sides:g}*w*length = {expected:g} by more than 20%; "
                        "check declared units",
                    )
                )
    return ValidationReport(issues)


# ---------------------------------------------------------------------------
# Deterministic CSV output for survey tables


def _fmt_cell(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, columns, header_comment=None):
    """Write columns (name, values) pairs as CSV with an optional comment."""
    names = [c[0] for c in columns]
    series = [list(c[1]) for c in columns]
    n = len(series[0]) if series else 0
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names)
        for i in range(n):
            writer.writerow([_fmt_cell(col[i]) for col in series])


def save_survey(outdir, observations, segments, grid=None, header_comment=None):
    """Write observations.csv / segments.csv / predgrid.csv under outdir."""
    import os

    os.makedirs(outdir, exist_ok=True)
    write_csv(
        os.path.join(outdir, "observations.csv"),
        [
            ("transect_id", [o.transect_id for o in observations]),
            ("segment_id", [o.segment_id for o in observations]),
            ("distance", [o.distance for o in observations]),
            ("size", [o.group_size for o in observations]),
        ],
        header_comment,
    )
    effort_names = sorted({k for s in segments for k in s.effort})
    density_names = sorted({k for s in segments for k in s.density})
    cols = [
        ("segment_id", [s.segment_id for s in segments]),
        ("transect_id", [s.transect_id for s in segments]),
        ("area", [s.area for s in segments]),
    ]
    if any(s.length is not None for s in segments):
        cols.append(("length", [s.length if s.length is not None else "" for s in segments]))
    for name in effort_names:
        cols.append((name, [s.effort.get(name, "") for s in segments]))
    for name in density_names:
        cols.append((name, [s.density.get(name, "") for s in segments]))
    write_csv(os.path.join(outdir, "segments.csv"), cols, header_comment)
    if grid is not None:
        gnames = sorted({k for c in grid for k in c.density})
        gcols = [
            ("cell_id", [c.cell_id for c in grid]),
            ("area", [c.area for c in grid]),
        ]
        for name in gnames:
            gcols.append((name, [c.density.get(name, "") for c in grid]))
        write_csv(os.path.join(outdir, "predgrid.csv"), gcols, header_comment)
