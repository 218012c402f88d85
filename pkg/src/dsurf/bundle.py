"""Persist fitted models as an inspectable directory of text files.

A fit bundle is a plain directory — JSON for structured pieces, CSV for
matrices — so a fit can be archived, diffed, inspected with standard
tools, or re-read by another implementation. Layout::

    bundle/
      manifest.json      format version, fit kind, family, scalar summaries
      design.json        basis definitions, penalty matrices, column labels
      frame.json         response, offsets, areas, covariates per model row
      coefficients.csv   column label, estimate
      covariance.csv     coefficient covariance (labelled columns)
      detection.json     stage-one detection fit
      kappa.csv          log-detectability gradient rows (varprop fits)
      scheme.json        group-size scheme (per-class fits only)
      naive/             companion fit without the shift block (varprop)

Reloading reconstructs the same fit objects the in-memory pipeline
produces; linear predictors and fitted means are recomputed from the
stored design and coefficients, which round-trip exactly (floats are
written with full ``repr`` precision).
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from .data import write_csv
from .detection import DetectionFit, KappaMatrix
from .exceptions import ConfigError, ValidationError
from .families import Family
from .gam import GamFit
from .groupsize import GroupSizeScheme
from .smooth import DesignBundle
from .varprop import ModelFrame, VarpropFit

__all__ = ["FORMAT_VERSION", "save_fit_bundle", "load_fit_bundle", "LoadedBundle"]

FORMAT_VERSION = 1


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _read_json(path):
    if not os.path.exists(path):
        raise ConfigError(f"fit bundle is missing {os.path.basename(path)}: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _read_csv_columns(path):
    if not os.path.exists(path):
        raise ConfigError(f"fit bundle is missing {os.path.basename(path)}: {path}")
    with open(path, "r", newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    header, body = rows[0], rows[1:]
    return header, body


def _family_dict(family, phi_hat):
    return {
        "kind": family.kind,
        "tweedie_power": family.tweedie_power,
        "phi_hat": float(phi_hat),
    }


def _gam_manifest(gam):
    return {
        "family": _family_dict(gam.family, gam.phi_hat),
        "lambda_hat": {k: float(v) for k, v in gam.lambda_hat.items()},
        "phi_hat": float(gam.phi_hat),
        "edf": {k: float(v) for k, v in gam.edf.items()},
        "edf_blocks": {k: float(v) for k, v in gam.edf_blocks.items()},
        "edf_total": float(gam.edf_total),
        "reml": float(gam.reml),
        "deviance": float(gam.deviance),
        "null_deviance": float(gam.null_deviance),
        "outer_iterations": int(gam.outer_iterations),
        "multipliers": [float(v) for v in gam.multipliers],
        "warnings": list(gam.warnings),
    }


def _save_gam_files(outdir, gam):
    _write_json(os.path.join(outdir, "design.json"), gam.design.to_dict())
    labels = list(gam.design.column_labels)
    write_csv(
        os.path.join(outdir, "coefficients.csv"),
        [("column", labels), ("estimate", [float(b) for b in gam.beta_hat])],
    )
    write_csv(
        os.path.join(outdir, "covariance.csv"),
        [(lab, [float(v) for v in gam.V_beta[:, j]]) for j, lab in enumerate(labels)],
    )


def _rebuild_family(d):
    kind = d["kind"]
    if kind in ("poisson",):
        return Family(kind=kind)
    return Family(kind=kind, tweedie_power=d.get("tweedie_power"))


def _load_gam_files(outdir, manifest, frame, kappa=None, delta=None):
    design = DesignBundle.from_dict(_read_json(os.path.join(outdir, "design.json")))

    header, body = _read_csv_columns(os.path.join(outdir, "coefficients.csv"))
    if header != ["column", "estimate"]:
        raise ConfigError(f"unexpected coefficients.csv header in {outdir}")
    labels = [r[0] for r in body]
    if labels != list(design.column_labels):
        raise ConfigError(
            f"coefficients.csv in {outdir} does not match the design's columns"
        )
    beta = np.array([float(r[1]) for r in body])

    vheader, vbody = _read_csv_columns(os.path.join(outdir, "covariance.csv"))
    if vheader != labels:
        raise ConfigError(
            f"covariance.csv in {outdir} does not match the design's columns"
        )
    V = np.array([[float(v) for v in row] for row in vbody])
    if V.shape != (len(labels), len(labels)):
        raise ConfigError(f"covariance.csv in {outdir} is not square")

    family = _rebuild_family(manifest["family"])
    X = design.build_matrix(frame.covariates, frame.n_rows, warn_extrapolation=False)
    if delta is not None:
        X[:, delta] = kappa.values
    eta = X @ beta + frame.offset
    mu = np.exp(eta) if family.log_link else eta.copy()

    return GamFit(
        design=design,
        family=family,
        beta_hat=beta,
        V_beta=V,
        lambda_hat=dict(manifest["lambda_hat"]),
        phi_hat=float(manifest["phi_hat"]),
        edf=dict(manifest["edf"]),
        edf_blocks=dict(manifest["edf_blocks"]),
        edf_total=float(manifest["edf_total"]),
        reml=float(manifest["reml"]),
        y=frame.y,
        offset=frame.offset,
        eta=eta,
        mu=mu,
        deviance=float(manifest["deviance"]),
        null_deviance=float(manifest["null_deviance"]),
        outer_iterations=int(manifest["outer_iterations"]),
        multipliers=np.array(manifest["multipliers"], dtype=float),
        warnings=tuple(manifest["warnings"]),
        frame=frame,
    )


def _save_kappa(path, kappa):
    cols = [("segment_id", list(kappa.row_segments))]
    if kappa.row_classes is not None:
        cols.append(("size_class", list(kappa.row_classes)))
    for j, name in enumerate(kappa.param_names):
        cols.append((name, [float(v) for v in kappa.values[:, j]]))
    write_csv(path, cols)


def _load_kappa(path, param_names):
    header, body = _read_csv_columns(path)
    want_classes = header[1] == "size_class" if len(header) > 1 else False
    first_param = 2 if want_classes else 1
    if header[first_param:] != list(param_names):
        raise ConfigError(
            f"kappa.csv parameter columns {header[first_param:]} do not match "
            f"the detection fit's parameters {list(param_names)}"
        )
    values = np.array([[float(v) for v in r[first_param:]] for r in body])
    return KappaMatrix(
        values=values,
        row_segments=tuple(r[0] for r in body),
        row_classes=tuple(r[1] for r in body) if want_classes else None,
        param_names=tuple(param_names),
    )


def save_fit_bundle(outdir, fit, detection_fit, scheme=None, meta=None):
    """Write a fitted model (with its stage-one fit) to a bundle directory.

    ``fit`` may be a plain spatial fit or a variance-propagating fit; the
    optional ``scheme`` records group-size binning for per-class fits.
    ``meta`` is merged into the manifest (the batch front end records the
    config hash and seed there).
    """
    os.makedirs(outdir, exist_ok=True)
    is_varprop = isinstance(fit, VarpropFit)
    gam = fit.gam if is_varprop else fit
    if gam.frame is None:
        raise ValidationError("fit carries no model frame; cannot persist it")

    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "varprop" if is_varprop else "naive",
        "per_class": scheme is not None,
        "fit": _gam_manifest(gam),
    }
    if is_varprop:
        manifest["varprop"] = {
            "phi_star": float(fit.phi_star),
            "lambda_delta": float(fit.lambda_delta),
            "delta_start": int(fit.delta_slice.start),
            "delta_stop": int(fit.delta_slice.stop),
            "phi_profile": [[float(a), float(b)] for a, b in fit.phi_profile],
            "V_theta_prior": [[float(v) for v in row] for row in fit.V_theta_prior],
            "warnings": list(fit.fit_warnings),
        }
    if meta:
        overlap = set(meta) & set(manifest)
        if overlap:
            raise ValidationError(f"meta keys collide with manifest: {sorted(overlap)}")
        manifest.update(meta)

    _write_json(os.path.join(outdir, "manifest.json"), manifest)
    _write_json(os.path.join(outdir, "frame.json"), gam.frame.to_dict())
    _write_json(os.path.join(outdir, "detection.json"), detection_fit.to_dict())
    _save_gam_files(outdir, gam)
    if is_varprop:
        _save_kappa(os.path.join(outdir, "kappa.csv"), fit.kappa)
        if fit.naive is not None:
            sub = os.path.join(outdir, "naive")
            os.makedirs(sub, exist_ok=True)
            _write_json(
                os.path.join(sub, "manifest.json"),
                {"format_version": FORMAT_VERSION, "kind": "naive",
                 "fit": _gam_manifest(fit.naive)},
            )
            _save_gam_files(sub, fit.naive)
    if scheme is not None:
        _write_json(os.path.join(outdir, "scheme.json"), scheme.to_dict())
    return manifest


@dataclass(frozen=True)
class LoadedBundle:
    """A reloaded fit bundle: the fit objects plus the raw manifest."""

    fit: object
    detection: DetectionFit
    scheme: GroupSizeScheme | None
    manifest: dict

    @property
    def kind(self):
        return self.manifest["kind"]


def load_fit_bundle(outdir):
    """Reconstruct the fit objects saved by ``save_fit_bundle``."""
    if not os.path.isdir(outdir):
        raise ConfigError(f"fit bundle directory not found: {outdir}")
    manifest = _read_json(os.path.join(outdir, "manifest.json"))
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise ConfigError(
            f"fit bundle {outdir} has format version {version!r}; "
            f"this build reads version {FORMAT_VERSION}"
        )
    frame = ModelFrame.from_dict(_read_json(os.path.join(outdir, "frame.json")))
    detection = DetectionFit.from_dict(_read_json(os.path.join(outdir, "detection.json")))
    scheme_path = os.path.join(outdir, "scheme.json")
    scheme = (
        GroupSizeScheme.from_dict(_read_json(scheme_path))
        if os.path.exists(scheme_path)
        else None
    )

    if manifest["kind"] == "naive":
        fit = _load_gam_files(outdir, manifest["fit"], frame)
        return LoadedBundle(fit=fit, detection=detection, scheme=scheme, manifest=manifest)

    vp = manifest["varprop"]
    kappa = _load_kappa(os.path.join(outdir, "kappa.csv"), detection.param_names)
    delta = slice(int(vp["delta_start"]), int(vp["delta_stop"]))
    gam = _load_gam_files(outdir, manifest["fit"], frame, kappa=kappa, delta=delta)
    naive_dir = os.path.join(outdir, "naive")
    naive = None
    if os.path.isdir(naive_dir):
        naive_manifest = _read_json(os.path.join(naive_dir, "manifest.json"))
        naive = _load_gam_files(naive_dir, naive_manifest["fit"], frame)
    fit = VarpropFit(
        gam=gam,
        naive=naive,
        kappa=kappa,
        V_theta_prior=np.array(vp["V_theta_prior"], dtype=float),
        phi_star=float(vp["phi_star"]),
        delta_slice=delta,
        phi_profile=tuple((float(a), float(b)) for a, b in vp["phi_profile"]),
        fit_warnings=tuple(vp["warnings"]),
    )
    return LoadedBundle(fit=fit, detection=detection, scheme=scheme, manifest=manifest)
