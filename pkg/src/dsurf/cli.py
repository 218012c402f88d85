"""Batch command-line front end for file-driven, reproducible runs.

Subcommands mirror the pipeline stages: ``fit-detection`` produces a
reloadable stage-one fit, ``fit-dsm`` fits the spatial model and persists
a fit bundle, ``predict`` turns a bundle plus a grid into abundance
tables, ``diagnose`` emits residual and misfit tables, and ``simulate`` /
``coverage`` drive the synthetic-survey machinery.

Every output file embeds the config content hash and the seed, and no
output contains timestamps or machine identifiers, so rerunning a command
with identical inputs produces byte-identical files. Exit codes: 0
success, 2 validation/configuration failure, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .abundance import var_delta, var_ht_averaged, var_independence, var_sim
from .bundle import load_fit_bundle, save_fit_bundle
from .config import load_run_config, load_scenario_config
from .data import (
    load_observations,
    load_prediction_grid,
    load_segments,
    recount_segments,
    save_survey,
    write_csv,
)
from .detection import SIZE_CLASS, DetectionFit, build_detection_data, fit_detection
from .diagnostics import obs_vs_expected, quantile_residuals, shift_report
from .exceptions import ConfigError, DsurfError, NumericalError, ValidationError
from .groupsize import fit_groupsize_dsm, make_scheme, predict_group_abundance
from .sim import CoverageConfig, coverage_study, default_grid, simulate_survey
from .varprop import VarpropFit, fit_dsm

__all__ = ["main"]


def _stamp(cfg_hash, seed):
    return f"config={cfg_hash} seed={seed}"


def _out_dir(args, cfg_out, what):
    out = args.out or cfg_out
    if not out:
        raise ConfigError(f"{what}: no output directory (set 'out' or pass --out)")
    os.makedirs(out, exist_ok=True)
    return out


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _segment_columns(cfg, detection_spec, smooths=()):
    """Which segment-file columns each stage needs."""
    effort = [c for c in detection_spec.scale_covariates if c != SIZE_CLASS]
    density = []
    for spec in smooths:
        for cov in spec.covariates:
            if cov not in density:
                density.append(cov)
        if spec.factor and spec.factor != SIZE_CLASS and spec.factor not in effort:
            effort.append(spec.factor)
    return tuple(effort), tuple(density)


def _load_survey(cfg, detection_spec, smooths=(), need_observations=True):
    effort, density = _segment_columns(cfg, detection_spec, smooths)
    segments = load_segments(
        cfg.segments, effort_covariates=effort, density_covariates=density
    )
    observations = load_observations(cfg.observations) if need_observations else None
    if observations is not None:
        segments = recount_segments(segments, observations)
    return observations, segments


def _detection_size_classes(cfg, observations):
    """Per-observation class labels when detectability uses size classes."""
    if cfg.group_size_bins is None:
        raise ConfigError(
            f"config {cfg.path}: detection uses '{SIZE_CLASS}' but "
            "'group_size_bins' is not set"
        )
    scheme = make_scheme(observations, cfg.group_size_bins)
    labels = [scheme.class_of(o.group_size) for o in observations]
    return scheme, labels


def cmd_fit_detection(args):
    cfg = load_run_config(args.config)
    seed = args.seed if args.seed is not None else cfg.seed
    if cfg.detection is None:
        raise ConfigError(f"config {cfg.path}: missing required key 'detection'")
    cfg.require_inputs("observations", "segments")
    out = _out_dir(args, cfg.out_dir, "fit-detection")

    observations, segments = _load_survey(cfg, cfg.detection)
    size_labels = None
    level_order = None
    if SIZE_CLASS in cfg.detection.scale_covariates:
        scheme, size_labels = _detection_size_classes(cfg, observations)
        level_order = {SIZE_CLASS: scheme.labels}
    data = build_detection_data(
        observations,
        segments,
        covariate_names=cfg.detection.scale_covariates,
        size_class=size_labels,
    )
    fit = fit_detection(data, cfg.detection, level_order=level_order)

    stamp = _stamp(cfg.hash, seed)
    payload = fit.to_dict()
    payload["config_hash"] = cfg.hash
    payload["seed"] = seed
    _write_json(os.path.join(out, "detection.json"), payload)
    se = fit.standard_errors()
    write_csv(
        os.path.join(out, "detection_report.csv"),
        [
            ("parameter", list(fit.param_names)),
            ("estimate", [float(v) for v in fit.theta_hat]),
            ("se", [float(v) for v in se]),
        ],
        header_comment=(
            f"{stamp} n={data.n} loglik={fit.loglik!r} aic={fit.aic!r}"
        ),
    )
    print(f"fit-detection: wrote {out}/detection.json (aic={fit.aic:.3f})")
    return 0


def _mean_pins(fit, detection):
    """Continuous detection covariates pinned at their model-frame means."""
    frame = fit.frame
    pins = {}
    levels = detection.spec.factor_levels or {}
    for cov in detection.spec.scale_covariates:
        if cov in levels:
            continue
        if frame is not None and cov in frame.covariates:
            pins[cov] = float(np.mean(np.asarray(frame.covariates[cov], dtype=float)))
        else:
            raise ValidationError(
                f"cannot pin detection covariate {cov!r}: not in the model frame"
            )
    return pins


def _write_shift(out, fit, detection, stamp):
    pins = _mean_pins(fit, detection)
    report = shift_report(fit, detection, at=pins or None)
    note = stamp
    if pins:
        pinned = " ".join(f"{k}={v!r}" for k, v in sorted(pins.items()))
        note = f"{stamp} pinned: {pinned}"
    write_csv(
        os.path.join(out, "shift.csv"),
        [
            ("level", [r.level for r in report.rows]),
            ("p_hat", [r.p_hat for r in report.rows]),
            ("se", [r.se for r in report.rows]),
            ("p_shifted", [r.p_shifted for r in report.rows]),
            ("shift_in_sd", [r.shift_in_sd for r in report.rows]),
            ("flagged", [str(r.flagged) for r in report.rows]),
        ],
        header_comment=note,
    )


def _write_obs_expected(out, fit, detection, stamp):
    levels_by_factor = detection.spec.factor_levels or {}
    for cov in sorted(levels_by_factor):
        table = obs_vs_expected(fit, cov)
        write_csv(
            os.path.join(out, f"obs_expected_{cov}.csv"),
            [
                ("level", list(table.levels)),
                ("observed", [float(v) for v in table.observed]),
                ("expected", [float(v) for v in table.expected]),
            ],
            header_comment=stamp,
        )


def cmd_fit_dsm(args):
    cfg = load_run_config(args.config)
    seed = args.seed if args.seed is not None else cfg.seed
    method = args.method or cfg.method
    if method not in ("varprop", "naive"):
        raise ConfigError(f"method must be 'varprop' or 'naive', got {method!r}")
    if cfg.detection_fit is None:
        raise ConfigError(
            f"config {cfg.path}: missing required key 'detection_fit' "
            "(path to a saved stage-one fit)"
        )
    if not cfg.smooths:
        raise ConfigError(f"config {cfg.path}: missing required key 'smooths'")
    if cfg.family is None:
        raise ConfigError(f"config {cfg.path}: missing required key 'family'")
    cfg.require_inputs("segments", "detection_fit")
    out = _out_dir(args, cfg.out_dir, "fit-dsm")

    with open(cfg.detection_fit, "r", encoding="utf-8") as fh:
        detection = DetectionFit.from_dict(json.load(fh))

    needs_obs = cfg.group_size_bins is not None or cfg.observations is not None
    if cfg.group_size_bins is not None:
        cfg.require_inputs("observations")
    observations, segments = _load_survey(
        cfg, detection.spec, cfg.smooths, need_observations=needs_obs
    )

    scheme = None
    if cfg.group_size_bins is not None:
        scheme = make_scheme(observations, cfg.group_size_bins)
        fit = fit_groupsize_dsm(
            segments, observations, scheme, detection, cfg.smooths, cfg.family,
            method=method,
        )
    else:
        if segments and segments[0].count is None:
            raise ConfigError(
                f"config {cfg.path}: segments carry no counts; provide "
                "'observations' so counts can be derived"
            )
        fit = fit_dsm(segments, detection, cfg.smooths, cfg.family, method=method)

    stamp = _stamp(cfg.hash, seed)
    bundle_dir = os.path.join(out, "fit")
    save_fit_bundle(
        bundle_dir, fit, detection, scheme=scheme,
        meta={"config_hash": cfg.hash, "seed": seed},
    )

    gam = fit.gam if isinstance(fit, VarpropFit) else fit
    summary = {
        "config_hash": cfg.hash,
        "seed": seed,
        "method": method,
        "n_rows": int(gam.frame.n_rows),
        "deviance_explained": float(gam.deviance_explained),
        "edf": {k: float(v) for k, v in gam.edf.items()},
        "edf_total": float(gam.edf_total),
        "lambda_hat": {k: float(v) for k, v in gam.lambda_hat.items()},
        "phi_hat": float(gam.phi_hat),
        "reml": float(gam.reml),
        "warnings": list(gam.warnings),
    }
    if isinstance(fit, VarpropFit):
        summary["phi_star"] = float(fit.phi_star)
        summary["lambda_delta"] = float(fit.lambda_delta)
        summary["varprop_warnings"] = list(fit.fit_warnings)
    _write_json(os.path.join(out, "fit_summary.json"), summary)

    if isinstance(fit, VarpropFit):
        _write_shift(out, fit, detection, stamp)
    _write_obs_expected(out, fit, detection, stamp)

    print(
        f"fit-dsm: wrote {bundle_dir} "
        f"(method={method}, deviance explained {gam.deviance_explained:.1%})"
    )
    return 0


def _bundle_dir(args, cfg_out):
    if args.bundle:
        return args.bundle
    if cfg_out:
        return os.path.join(cfg_out, "fit")
    raise ConfigError("no fit bundle: pass --bundle or set 'out' in the config")


def cmd_predict(args):
    cfg = load_run_config(args.config)
    seed = args.seed if args.seed is not None else cfg.seed
    b = args.B or cfg.B
    methods = tuple(args.method.split(",")) if args.method else cfg.variance
    cfg.require_inputs("grid")
    out = _out_dir(args, cfg.out_dir, "predict")
    loaded = load_fit_bundle(_bundle_dir(args, cfg.out_dir))
    fit, detection, scheme = loaded.fit, loaded.detection, loaded.scheme

    density_names = sorted(
        {
            m
            for term in fit.design.terms
            for m in ([mb.covariate for mb in term.marginals])
        }
    )
    grid = load_prediction_grid(cfg.grid, density_covariates=density_names)
    stamp = _stamp(cfg.hash, seed)

    if scheme is not None:
        bad = [m for m in methods if m != "delta"]
        if bad:
            raise ConfigError(
                f"per-class fits support variance method 'delta' only; got {bad}"
            )
        results = {"delta": predict_group_abundance(fit, grid, scheme)}
    else:
        results = {}
        for m in methods:
            if m == "delta":
                results[m] = var_delta(fit, grid)
            elif m == "sim":
                results[m] = var_sim(fit, grid, B=b, seed=seed)
            elif m == "independence" or m == "ht-averaged":
                if cfg.observations is None and detection.spec.scale_covariates:
                    raise ConfigError(
                        f"variance method {m!r} with detection covariates needs "
                        "'observations' (and 'segments') in the config"
                    )
                obs = seg = labels = None
                if cfg.observations is not None:
                    cfg.require_inputs("observations", "segments")
                    obs, seg = _load_survey(cfg, detection.spec)
                    if SIZE_CLASS in detection.spec.scale_covariates:
                        if cfg.group_size_bins is None:
                            raise ConfigError(
                                f"variance method {m!r}: detection uses "
                                f"'{SIZE_CLASS}' but 'group_size_bins' is not set"
                            )
                        sch = make_scheme(obs, cfg.group_size_bins)
                        labels = [sch.class_of(o.group_size) for o in obs]
                kwargs = dict(observations=obs, segments=seg, size_class=labels)
                if m == "independence":
                    results[m] = var_independence(fit, grid, detection, **kwargs)
                else:
                    results[m] = var_ht_averaged(fit, grid, detection, **kwargs)
            else:
                raise ConfigError(f"unknown variance method {m!r}")

    first = next(iter(results.values()))
    rows = first.per_cell_rows()
    write_csv(
        os.path.join(out, "abundance_percell.csv"),
        [
            ("cell_id", [r[0] for r in rows]),
            ("density", [float(r[1]) for r in rows]),
            ("abundance", [float(r[2]) for r in rows]),
        ],
        header_comment=stamp,
    )

    names = sorted(results)
    summary_cols = [
        ("method", names),
        ("N_hat", [float(results[m].N_hat) for m in names]),
        ("se", [float(results[m].se) for m in names]),
        ("cv", [float(results[m].cv) for m in names]),
        ("lo95", [float(results[m].interval[0]) for m in names]),
        ("hi95", [float(results[m].interval[1]) for m in names]),
        ("B", [results[m].B if results[m].B is not None else "" for m in names]),
        ("notes", ["; ".join(results[m].notes) for m in names]),
    ]
    write_csv(
        os.path.join(out, "abundance_summary.csv"), summary_cols, header_comment=stamp
    )
    for m in names:
        r = results[m]
        print(
            f"predict[{m}]: N_hat={r.N_hat:.2f} cv={r.cv:.4f} "
            f"95% [{r.interval[0]:.2f}, {r.interval[1]:.2f}]"
        )
    return 0


def cmd_diagnose(args):
    if not args.bundle:
        raise ConfigError("diagnose needs --bundle")
    loaded = load_fit_bundle(args.bundle)
    fit, detection = loaded.fit, loaded.detection
    out = args.out or args.bundle
    os.makedirs(out, exist_ok=True)
    seed = args.seed if args.seed is not None else 0
    stamp = _stamp(loaded.manifest.get("config_hash", "none"), seed)

    gam = fit.gam if isinstance(fit, VarpropFit) else fit
    frame = gam.frame
    resid = quantile_residuals(fit, seed=seed)
    cols = [("segment_id", list(frame.segment_ids))]
    if frame.row_classes is not None:
        cols.append((SIZE_CLASS, list(frame.row_classes)))
    cols += [
        ("count", [float(v) for v in frame.y]),
        ("fitted", [float(v) for v in gam.mu]),
        ("quantile_residual", [float(v) for v in resid]),
    ]
    write_csv(os.path.join(out, "residuals.csv"), cols, header_comment=stamp)

    if isinstance(fit, VarpropFit):
        _write_shift(out, fit, detection, stamp)
    if args.by:
        table = obs_vs_expected(fit, args.by)
        write_csv(
            os.path.join(out, f"obs_expected_{args.by}.csv"),
            [
                ("level", list(table.levels)),
                ("observed", [float(v) for v in table.observed]),
                ("expected", [float(v) for v in table.expected]),
            ],
            header_comment=stamp,
        )
    else:
        _write_obs_expected(out, fit, detection, stamp)
    print(f"diagnose: wrote residuals and misfit tables under {out}")
    return 0


def cmd_simulate(args):
    sc = load_scenario_config(args.config)
    scenario = sc.scenario
    seed = args.seed if args.seed is not None else scenario.seed
    out = _out_dir(args, None, "simulate")
    survey = simulate_survey(scenario, seed=seed)
    stamp = _stamp(sc.hash, seed)
    grid = default_grid(scenario, nx=sc.grid_nx, ny=sc.grid_ny)
    save_survey(
        out, survey.observations, survey.segments, grid=grid, header_comment=stamp
    )
    truth = {
        "config_hash": sc.hash,
        "seed": seed,
        "expected_groups": survey.truth.expected_groups,
        "expected_individuals": survey.truth.expected_individuals,
        "realized_groups": survey.truth.realized_groups,
        "realized_individuals": survey.truth.realized_individuals,
        "strip_groups": survey.truth.strip_groups,
        "detected_groups": survey.truth.detected_groups,
        "true_abundance_over_grid": survey.truth.expected_over(grid),
    }
    _write_json(os.path.join(out, "truth.json"), truth)
    print(
        f"simulate: {len(survey.observations)} detections over "
        f"{len(survey.segments)} segments -> {out}"
    )
    return 0


def cmd_coverage(args):
    sc = load_scenario_config(args.config)
    if not sc.smooths or sc.family is None:
        raise ConfigError(
            f"config {sc.path}: coverage needs 'coverage.smooths' and "
            "'coverage.family'"
        )
    out = _out_dir(args, None, "coverage")
    workers = args.threads or sc.workers
    config = CoverageConfig(
        smooth_specs=sc.smooths,
        family=sc.family,
        grid_nx=sc.grid_nx,
        grid_ny=sc.grid_ny,
        min_observations=sc.min_observations,
    )
    scenario = sc.scenario
    if args.seed is not None:
        from dataclasses import replace

        scenario = replace(scenario, seed=args.seed)
    result = coverage_study(scenario, sc.n_replicates, config, workers=workers)
    stamp = _stamp(sc.hash, scenario.seed)

    rows = result.to_rows()
    write_csv(
        os.path.join(out, "coverage_summary.csv"),
        [
            ("method", [r["method"] for r in rows]),
            ("n_used", [r["n_used"] for r in rows]),
            ("coverage", [float(r["coverage"]) for r in rows]),
            ("mc_se", [float(r["mc_se"]) for r in rows]),
            ("mean_cv", [float(r["mean_cv"]) for r in rows]),
            ("mean_estimate", [float(r["mean_estimate"]) for r in rows]),
            ("truth", [float(r["truth"]) for r in rows]),
            ("n_replicates", [r["n_replicates"] for r in rows]),
            ("failure_rate", [float(r["failure_rate"]) for r in rows]),
        ],
        header_comment=stamp,
    )
    methods = sorted(result.methods)
    rep_cols = [("replicate", [r["replicate"] for r in result.rows])]
    for m in methods:
        rep_cols += [
            (f"{m}_N_hat", [float(r[m]["N_hat"]) for r in result.rows]),
            (f"{m}_cv", [float(r[m]["cv"]) for r in result.rows]),
            (f"{m}_lo95", [float(r[m]["lo"]) for r in result.rows]),
            (f"{m}_hi95", [float(r[m]["hi"]) for r in result.rows]),
            (f"{m}_covered", [str(r[m]["covered"]) for r in result.rows]),
        ]
    write_csv(
        os.path.join(out, "coverage_replicates.csv"), rep_cols, header_comment=stamp
    )
    if result.failures:
        with open(os.path.join(out, "failures.txt"), "w", encoding="utf-8") as fh:
            fh.write(f"# {stamp}\n")
            for line in result.failures:
                fh.write(line + "\n")
    for r in rows:
        print(
            f"coverage[{r['method']}]: {r['coverage']:.3f} "
            f"(mc se {r['mc_se']:.3f}, n={r['n_used']}, truth {r['truth']:.1f})"
        )
    if result.failures:
        print(f"coverage: {len(result.failures)} replicate(s) failed; see failures.txt")
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="dsurf",
        description=(
            "Two-stage density surface modelling for line-transect surveys "
            "with detection uncertainty propagated into the spatial model."
        ),
    )
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, helptext, *, config=True, bundle=False, by=False,
            method=None, b_flag=False, threads=False):
        sp = sub.add_parser(name, help=helptext)
        if config:
            sp.add_argument("--config", required=True, help="run config YAML")
        sp.add_argument("--out", help="output directory (overrides config)")
        sp.add_argument("--seed", type=int, help="seed (overrides config)")
        if bundle:
            sp.add_argument("--bundle", help="fit bundle directory")
        if by:
            sp.add_argument("--by", help="covariate for the observed/expected table")
        if method:
            sp.add_argument("--method", help=method)
        if b_flag:
            sp.add_argument("-B", type=int, dest="B", help="posterior draws")
        if threads:
            sp.add_argument("--threads", type=int, help="parallel workers")
        sp.set_defaults(func=func)
        return sp

    add("fit-detection", cmd_fit_detection, "fit the detection function")
    add(
        "fit-dsm", cmd_fit_dsm, "fit the spatial model and persist a fit bundle",
        method="'varprop' (default) or 'naive'",
    )
    add(
        "predict", cmd_predict, "predict abundance over a grid from a fit bundle",
        bundle=True, method="comma-separated variance methods", b_flag=True,
    )
    add(
        "diagnose", cmd_diagnose, "residuals and misfit tables from a fit bundle",
        config=False, bundle=True, by=True,
    )
    add("simulate", cmd_simulate, "generate one synthetic survey")
    add(
        "coverage", cmd_coverage, "interval-coverage study over simulated surveys",
        threads=True,
    )
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DsurfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
