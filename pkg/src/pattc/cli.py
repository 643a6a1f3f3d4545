"""Command-line entry point: ``pattc {simulate,estimate,placebo,diagnose} --config FILE``.

Every command reads one YAML config and writes CSV tables plus a JSON
manifest into the output directory. Paths inside the config are relative to
the config file. Exit codes: 0 success, 1 input error, 2 internal error.

Seed derivation from the config's ``seed``:

* simulate: grid values drawn with ``seed``; cell ``i`` uses
  ``run_seed(seed, i)``; run ``r`` of a cell uses ``run_seed(cell_seed, r)``.
* estimate / diagnose / placebo: stream ``k`` uses ``run_seed(seed, k)`` with
  1 = compliance CV folds, 2 = response CV folds, 3 = PATT CV folds,
  4 = learner seeds, 5 = estimate bootstrap, 6 = placebo bootstrap.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from dataclasses import fields
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
import yaml

from . import __version__
from .compliance import (DataError, PredictionError, compliance_diagnostics,
                         fit_compliance_model, predict_control_compliers, treated_training_rows)
from .data_model import (ColumnRoles, Dataset, FeatureSpec, RowError, SchemaError,
                         categorical_levels, load_table)
from .estimators import (EstimateReport, EstimationError, _rct_rows, estimate_cace, estimate_itt,
                         fit_patt_model, fit_response_model, reports_frame, subgroup_effects,
                         subgroup_masks, unit_effects)
from .inference import (BootstrapPlan, InferenceError, cluster_bootstrap, defier_census,
                        placebo_test, weighted_mean_bootstrap)
from .learners import FitError, LearnerSpec, PlanError, make_cv_plan
from .simulation import (PARAM_NAMES, PipelineConfig, SimParams, draw_grid, grand_means,
                         results_frame, run_grid, run_seed, summarize_rmse)

logger = logging.getLogger("pattc")

COMMANDS = ("simulate", "estimate", "placebo", "diagnose")
COUNTERFACTUALS = "counterfactuals.csv"


class ConfigError(ValueError):
    """The run config is malformed; the message lists every violation."""


class SequencingError(RuntimeError):
    """A command needs outputs from a command that has not been run."""


INPUT_ERRORS = (ConfigError, SchemaError, RowError, DataError, EstimationError, PredictionError,
                InferenceError, FitError, PlanError, SequencingError, FileNotFoundError)

_LEARNER_FIELDS = {f.name for f in fields(LearnerSpec)}
_ROLE_FIELDS = {f.name for f in fields(ColumnRoles)}
_SIM_FIELDS = {f.name for f in fields(SimParams)} - set(PARAM_NAMES) - {"seed"}


# --- config ---------------------------------------------------------------

def load_config(path: Path) -> dict:
    try:
        cfg = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return cfg


def _learners(raw, where: str, errors: list[str]) -> list[LearnerSpec]:
    if not isinstance(raw, list) or not raw:
        errors.append(f"{where}: must be a nonempty list of learner mappings")
        return []
    out = []
    for i, item in enumerate(raw):
        if not isinstance(item, dict):
            errors.append(f"{where}[{i}]: must be a mapping")
            continue
        unknown = set(item) - _LEARNER_FIELDS
        if unknown:
            errors.append(f"{where}[{i}]: unknown key(s) {sorted(unknown)}")
            continue
        try:
            out.append(LearnerSpec(**item))
        except (TypeError, ValueError) as exc:
            errors.append(f"{where}[{i}]: {exc}")
    return out


def _bootstrap(raw, seed: int, where: str, errors: list[str]) -> BootstrapPlan | None:
    raw = raw or {}
    unknown = set(raw) - {"replicates", "level", "cluster"}
    if unknown:
        errors.append(f"{where}: unknown key(s) {sorted(unknown)}")
        return None
    try:
        return BootstrapPlan(seed=seed, **raw)
    except (TypeError, ValueError) as exc:
        errors.append(f"{where}: {exc}")
        return None


def _features(cfg, errors) -> FeatureSpec | None:
    raw = cfg.get("features")
    if not isinstance(raw, dict) or not raw.get("covariates"):
        errors.append("features.covariates: required nonempty list")
        return None
    unknown = set(raw) - {"covariates", "categorical", "interactions"}
    if unknown:
        errors.append(f"features: unknown key(s) {sorted(unknown)}")
    try:
        return FeatureSpec(raw["covariates"], raw.get("categorical", ()),
                           raw.get("interactions", ()))
    except (TypeError, ValueError) as exc:
        errors.append(f"features: {exc}")
        return None


def _table(cfg, name, base: Path, features: FeatureSpec | None, errors) -> dict | None:
    raw = (cfg.get("data") or {}).get(name)
    where = f"data.{name}"
    if not isinstance(raw, dict) or "path" not in raw:
        errors.append(f"{where}.path: required")
        return None
    path = base / raw["path"]
    if not path.exists():
        errors.append(f"{where}.path: file not found: {path}")
    roles = raw.get("roles") or {}
    unknown = (set(roles) - _ROLE_FIELDS) | (set(raw) - {"path", "roles", "outcome_scale",
                                                          "delimiter"})
    if unknown:
        errors.append(f"{where}: unknown key(s) {sorted(unknown)}")
        return None
    scale = raw.get("outcome_scale", 1.0)
    if not isinstance(scale, (int, float)) or scale <= 0:
        errors.append(f"{where}.outcome_scale: must be a positive number")
        return None
    if features is None:
        return None
    try:
        spec = FeatureSpec(features.covariates, features.categorical, features.interactions,
                           float(scale), ColumnRoles(**roles))
    except (TypeError, ValueError) as exc:
        errors.append(f"{where}: {exc}")
        return None
    return {"path": path, "spec": spec, "delimiter": raw.get("delimiter", ",")}


def validate(cfg: dict, command: str, base: Path) -> dict:
    """Check ``cfg`` for ``command`` and return the parsed pieces.

    Raises :class:`ConfigError` listing every violation found.
    """
    errors: list[str] = []
    seed = cfg.get("seed")
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        errors.append("seed: required nonnegative integer")
        seed = 0
    out: dict[str, Any] = {"seed": seed}
    threads = cfg.get("threads", 1)
    if not isinstance(threads, int) or threads < 1:
        errors.append("threads: must be a positive integer")
    out["threads"] = threads

    if command == "simulate":
        sim = cfg.get("simulate")
        if not isinstance(sim, dict):
            errors.append("simulate: required section")
            sim = {}
        runs = sim.get("runs", 10)
        if not isinstance(runs, int) or runs < 1:
            errors.append("simulate.runs: must be a positive integer")
        grid = sim.get("grid", {"values_per_param": 5})
        if not isinstance(grid, dict):
            errors.append("simulate.grid: must be a mapping")
            grid = {}
        if "values_per_param" in grid:
            k = grid["values_per_param"]
            if not isinstance(k, int) or k < 1:
                errors.append("simulate.grid.values_per_param: must be a positive integer")
            else:
                drawn = draw_grid(k, grid.get("grid_seed", seed))
                grid = {**drawn, **{p: grid[p] for p in PARAM_NAMES if p in grid}}
        for p in PARAM_NAMES:
            vals = grid.get(p)
            if not isinstance(vals, list) or not vals or not all(
                    isinstance(v, (int, float)) for v in vals):
                errors.append(f"simulate.grid.{p}: must be a nonempty list of numbers")
        params_raw = sim.get("params") or {}
        unknown = set(params_raw) - _SIM_FIELDS
        if unknown:
            errors.append(f"simulate.params: unknown key(s) {sorted(unknown)}")
            params_raw = {}
        try:
            params_raw = {k: tuple(v) if isinstance(v, list) else v for k, v in params_raw.items()}
            out["base"] = SimParams(**params_raw)
        except (TypeError, ValueError) as exc:
            errors.append(f"simulate.params: {exc}")
        learners = _learners(sim.get("learners", [{"kind": "gradient_boosted_trees"}]),
                             "simulate.learners", errors)
        try:
            out["pipeline"] = PipelineConfig(tuple(learners), sim.get("compliance_folds", 5),
                                             sim.get("folds", 10), sim.get("truth", "sample"))
        except (TypeError, ValueError) as exc:
            errors.append(f"simulate: {exc}")
        binning = sim.get("binning", ["compliance_rate", "rct_rate"])
        valid_axes = {"compliance_rate", "treatment_rate", "rct_rate"}
        if (not isinstance(binning, list) or not 1 <= len(binning) <= 2
                or not set(binning) <= valid_axes):
            errors.append(f"simulate.binning: one or two of {sorted(valid_axes)}")
        out.update(runs=runs, grid={p: grid.get(p) for p in PARAM_NAMES}, binning=binning)
    else:
        features = _features(cfg, errors)
        out["features"] = features
        out["rct"] = _table(cfg, "rct", base, features, errors)
        if command in ("estimate", "placebo"):
            out["observational"] = _table(cfg, "observational", base, features, errors)
        out["learners"] = _learners(cfg.get("learners", [{"kind": "elastic_net"}]), "learners",
                                    errors)
        folds = (cfg.get("cv") or {}).get("folds", 10)
        if not isinstance(folds, int) or folds < 2:
            errors.append("cv.folds: must be an integer >= 2")
        out["folds"] = folds
        weighted = cfg.get("weighted_fitting", True)
        if not isinstance(weighted, bool):
            errors.append("weighted_fitting: must be true or false")
        out["weighted"] = weighted
        stream = 6 if command == "placebo" else 5
        out["bootstrap"] = _bootstrap(cfg.get("bootstrap"), run_seed(seed, stream), "bootstrap",
                                      errors)
        subgroups = cfg.get("subgroups", [])
        if not isinstance(subgroups, list) or not all(isinstance(s, str) for s in subgroups):
            errors.append("subgroups: must be a list of column names")
        out["subgroups"] = subgroups
        if command == "placebo":
            cf = (cfg.get("placebo") or {}).get("counterfactuals")
            out["counterfactuals"] = base / cf if cf else None
    if errors:
        raise ConfigError("invalid config:\n  - " + "\n  - ".join(errors))
    return out


# --- helpers --------------------------------------------------------------

def _write_csv(frame: pd.DataFrame, path: Path, written: dict) -> None:
    frame.to_csv(path, index=False, lineterminator="\n")
    written[path.name] = hashlib.sha256(path.read_bytes()).hexdigest()


def _versions() -> dict:
    import numba

    return {"pattc": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "pandas": pd.__version__, "numba": numba.__version__}


def _manifest(out: Path, command: str, cfg: dict, seed: int, written: dict, extra=None) -> None:
    manifest = {"command": command, "seed": seed, "config": cfg, "versions": _versions(),
                "outputs": dict(sorted(written.items()))}
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True,
                                                  default=str) + "\n", encoding="utf-8")


def _load(table: dict, provenance: str, extra=()) -> Dataset:
    return load_table(table["path"], table["spec"], provenance, delimiter=table["delimiter"],
                      extra=extra)


def _fit_compliance(rct: Dataset, parsed: dict, levels: dict):
    seed = parsed["seed"]
    learners = [s.with_seed(run_seed(seed, 4)) for s in parsed["learners"]]
    treated = rct.subset(treated_training_rows(rct))
    if not len(treated):
        raise DataError("RCT has no treated rows with observed compliance")
    plan = make_cv_plan(len(treated), min(parsed["folds"], len(treated)), run_seed(seed, 1),
                        clusters=treated.cluster, labels=treated.C)
    return fit_compliance_model(rct, parsed["features"], learners, plan,
                                weighted=parsed["weighted"], levels=levels), learners


def _with_ci(report: EstimateReport, boot) -> EstimateReport:
    return EstimateReport(report.estimator, report.estimate, boot.ci_low, boot.ci_high, boot.se,
                          report.subgroup, report.weights, report.n)


# --- commands -------------------------------------------------------------

def cmd_simulate(parsed: dict, out: Path, cfg: dict) -> None:
    def progress(res):
        logger.info("cell %d done%s", res.cell, " (missing)" if res.missing else "")

    results = run_grid(parsed["grid"], parsed["runs"], parsed["seed"], parsed["threads"],
                       parsed["base"], parsed["pipeline"], progress)
    written: dict[str, str] = {}
    cells = results_frame(results)
    _write_csv(cells, out / "cells.csv", written)
    summary = summarize_rmse(cells, parsed["binning"]).assign(scope="bin")
    overall = pd.DataFrame([{"estimator": k, "mean_rmse": v, "scope": "overall",
                             "n_cells": int(cells[f"rmse_{k}"].notna().sum())}
                            for k, v in grand_means(cells).items()])
    _write_csv(pd.concat([summary, overall], ignore_index=True), out / "summary.csv", written)
    _manifest(out, "simulate", cfg, parsed["seed"], written,
              {"grid": parsed["grid"], "cells": len(results),
               "missing_cells": int(sum(r.missing for r in results))})


def cmd_estimate(parsed: dict, out: Path, cfg: dict) -> None:
    seed, features = parsed["seed"], parsed["features"]
    rct = _rct_rows(_load(parsed["rct"], "rct"))
    obs = _load(parsed["observational"], "observational", extra=parsed["subgroups"])
    if not (obs.D == 1).any():
        raise DataError("observational data has no rows with D=1; PATT-C is undefined")
    levels = categorical_levels(features, rct, obs)
    cmodel, learners = _fit_compliance(rct, parsed, levels)
    controls = rct.T == 0
    c_hat = np.zeros(len(rct))
    if controls.any():
        c_hat[controls] = predict_control_compliers(cmodel, rct.subset(controls))
    compliers = rct.subset(((rct.T == 1) & (rct.C == 1)) | (controls & (c_hat == 1)))
    kw = {"weighted": parsed["weighted"], "levels": levels}

    def plan_for(rows: Dataset, stream: int):
        if len(learners) == 1:
            return None
        return make_cv_plan(len(rows), min(parsed["folds"], len(rows)), run_seed(seed, stream),
                            clusters=rows.cluster)

    rmodel = fit_response_model(rct, c_hat, features, learners, plan_for(compliers, 2), **kw)
    pmodel = fit_patt_model(rct, features, learners, plan_for(rct, 3), **kw)
    boot = parsed["bootstrap"]

    reports = []
    for model in (rmodel, pmodel):
        treated, effect = unit_effects(model, obs)
        point = EstimateReport(model.estimator, float(np.average(effect, weights=treated.weight)),
                               n=len(treated))
        reports.append(_with_ci(point, weighted_mean_bootstrap(effect, treated.weight, boot)))
    for fn in (estimate_cace, estimate_itt):
        point = fn(rct)
        reports.append(_with_ci(point, cluster_bootstrap(lambda d, fn=fn: fn(d).estimate, rct,
                                                         boot, threads=parsed["threads"])))
    treated, effect = unit_effects(rmodel, obs)
    for covariate in parsed["subgroups"]:
        for rep, mask in zip(subgroup_effects(rmodel, obs, covariate),
                             subgroup_masks(treated, covariate)):
            reports.append(_with_ci(rep, weighted_mean_bootstrap(effect[mask],
                                                                  treated.weight[mask], boot)))

    written: dict[str, str] = {}
    _write_csv(reports_frame(reports), out / "estimates.csv", written)
    for name, model in (("cv_compliance.csv", cmodel.ensemble), ("cv_response_pattc.csv",
                        rmodel.ensemble), ("cv_response_patt.csv", pmodel.ensemble)):
        if model.report is not None:
            _write_csv(model.report.to_frame(), out / name, written)
    _write_csv(pd.DataFrame([{**cmodel.cutpoint.as_dict(), **cmodel.diagnostics}]),
               out / "cutpoint.csv", written)
    y11, y10 = rmodel.counterfactuals(treated)
    _write_csv(pd.DataFrame({"row": np.arange(len(treated)), "weight": treated.weight,
                             "y11": y11, "y10": y10}), out / COUNTERFACTUALS, written)
    _manifest(out, "estimate", cfg, seed, written,
              {"n_rct": len(rct), "n_observational": len(obs),
               "n_compliers_train": len(compliers)})


def cmd_placebo(parsed: dict, out: Path, cfg: dict) -> None:
    path = parsed["counterfactuals"] or out / COUNTERFACTUALS
    if not path.exists():
        raise SequencingError(f"{path} not found; run `pattc estimate` first")
    cf = pd.read_csv(path)
    missing = {"y11", "weight"} - set(cf.columns)
    if missing:
        raise SequencingError(f"{path} lacks column(s) {sorted(missing)}")
    rct = _rct_rows(_load(parsed["rct"], "rct"))
    compliers = rct.subset((rct.T == 1) & (rct.C == 1))
    report = placebo_test(compliers, cf["y11"].to_numpy(), cf["weight"].to_numpy(),
                          parsed["bootstrap"])
    written: dict[str, str] = {}
    _write_csv(pd.DataFrame([report.as_dict()]), out / "placebo.csv", written)
    _manifest(out, "placebo", cfg, parsed["seed"], written, {"counterfactuals": str(path)})


def cmd_diagnose(parsed: dict, out: Path, cfg: dict) -> None:
    raw = _load(parsed["rct"], "rct")
    rct = _rct_rows(raw)
    levels = categorical_levels(parsed["features"], rct)
    cmodel, _ = _fit_compliance(rct, parsed, levels)
    treated = rct.subset(treated_training_rows(rct))
    written: dict[str, str] = {}
    _write_csv(compliance_diagnostics(cmodel, treated), out / "compliance_diagnostics.csv",
               written)
    _write_csv(defier_census(raw.subset(raw.S == 1)).to_frame(), out / "defier_census.csv",
               written)
    _manifest(out, "diagnose", cfg, parsed["seed"], written)


HANDLERS = {"simulate": cmd_simulate, "estimate": cmd_estimate, "placebo": cmd_placebo,
            "diagnose": cmd_diagnose}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pattc", description=__doc__.split("\n\n")[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, type=Path, help="YAML run config")
    parser.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
    parser.add_argument("--threads", type=int, help="worker cap for grids and bootstraps")
    parser.add_argument("--verbose", "-v", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if not args.config.exists():
            raise ConfigError(f"config file not found: {args.config}")
        cfg = load_config(args.config)
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be >= 1")
            cfg["threads"] = args.threads
        base = args.config.resolve().parent
        parsed = validate(cfg, args.command, base)
        out = args.out if args.out is not None else base / cfg.get("output_dir", "out")
        out.mkdir(parents=True, exist_ok=True)
        HANDLERS[args.command](parsed, out, cfg)
    except INPUT_ERRORS as exc:
        print(f"pattc {args.command}: {type(exc).__module__}.{type(exc).__name__}: {exc}",
              file=sys.stderr)
        return 1
    except Exception:
        logger.exception("internal error")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
