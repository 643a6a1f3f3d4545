import json

import numpy as np
import pandas as pd
import pytest
import yaml

from pattc.cli import main
from pattc.compliance import compliance_diagnostics, fit_compliance_model, treated_training_rows
from pattc.data_model import Dataset, FeatureSpec, load_table, write_table
from pattc.inference import census_from_counts
from pattc.learners import LearnerSpec, make_cv_plan
from pattc.simulation import SimParams, generate_study, run_seed


def run(tmp_path, command, cfg, name="config.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg), encoding="utf-8")
    return main([command, "--config", str(path)])


def one_cell_config(out="out"):
    return {
        "seed": 7,
        "output_dir": out,
        "simulate": {
            "runs": 1,
            "grid": {k: [0.0] for k in ("e1", "e2", "e3", "e4", "e5", "e6")},
            "params": {"N": 6000, "n": 3000},
        },
    }


def test_one_cell_simulation_writes_three_files(tmp_path):
    assert run(tmp_path, "simulate", one_cell_config()) == 0
    out = tmp_path / "out"
    assert sorted(p.name for p in out.iterdir()) == ["cells.csv", "manifest.json", "summary.csv"]
    cells = pd.read_csv(out / "cells.csv")
    assert len(cells) == 1 and cells["runs_ok"].item() == 1
    summary = pd.read_csv(out / "summary.csv")
    assert set(summary["scope"]) == {"bin", "overall"}
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 7 and manifest["cells"] == 1
    assert set(manifest["outputs"]) == {"cells.csv", "summary.csv"}


def test_repeated_simulation_is_byte_identical(tmp_path):
    assert run(tmp_path, "simulate", one_cell_config("a")) == 0
    assert run(tmp_path, "simulate", one_cell_config("b")) == 0
    for name in ("cells.csv", "summary.csv", "manifest.json"):
        a, b = (tmp_path / d / name for d in ("a", "b"))
        if name == "manifest.json":
            ja, jb = json.loads(a.read_text()), json.loads(b.read_text())
            ja["config"].pop("output_dir")
            jb["config"].pop("output_dir")
            assert ja == jb
        else:
            assert a.read_bytes() == b.read_bytes()


def test_simulation_threads_flag_keeps_results(tmp_path):
    cfg = one_cell_config("serial")
    cfg["simulate"]["grid"]["e6"] = [-0.5, 0.5]
    assert run(tmp_path, "simulate", cfg) == 0
    cfg["output_dir"] = "parallel"
    path = tmp_path / "p.yaml"
    path.write_text(yaml.safe_dump(cfg))
    assert main(["simulate", "--config", str(path), "--threads", "2"]) == 0
    assert ((tmp_path / "serial" / "cells.csv").read_bytes()
            == (tmp_path / "parallel" / "cells.csv").read_bytes())


# --- application commands --------------------------------------------------

def write_study(tmp_path, seed=3, obs_treated=True, defiers=0):
    rct, obs, _ = generate_study(SimParams(seed=seed, N=8000, n=4000))
    rng = np.random.default_rng(seed)
    hh_r = np.arange(len(rct)) // 2
    T = rct.T.copy()
    D = rct.D.copy()
    if defiers:
        idx = np.flatnonzero(T == 0)[:defiers]
        D[idx] = 1
    rct_ds = Dataset.from_arrays(
        {"w1": rct.W[:, 0], "w2": rct.W[:, 1], "w3": rct.W[:, 2],
         "gender": rng.integers(0, 2, len(rct)).astype(float)},
        S=rct.S, T=T, D=D, C=np.where(T == 1, rct.C, np.nan), Y=rct.Y,
        weight=rng.uniform(0.5, 2.0, len(rct)), cluster=hh_r)
    d_obs = obs.D if obs_treated else np.zeros(len(obs))
    obs_ds = Dataset.from_arrays(
        {"w1": obs.W[:, 0], "w2": obs.W[:, 1], "w3": obs.W[:, 2],
         "gender": rng.integers(0, 2, len(obs)).astype(float)},
        S=obs.S, D=d_obs, Y=obs.Y, weight=rng.uniform(0.5, 2.0, len(obs)),
        cluster=np.arange(len(obs)), provenance="observational")
    write_table(rct_ds, tmp_path / "rct.csv")
    write_table(obs_ds, tmp_path / "obs.csv")
    return rct_ds, obs_ds


def app_config(out="out", **extra):
    cfg = {
        "seed": 11,
        "output_dir": out,
        "data": {"rct": {"path": "rct.csv"}, "observational": {"path": "obs.csv"}},
        "features": {"covariates": ["w1", "w2", "w3"]},
        "learners": [{"kind": "elastic_net", "alpha": 1.0},
                     {"kind": "gradient_boosted_trees", "n_trees": 30}],
        "cv": {"folds": 3},
        "bootstrap": {"replicates": 30},
    }
    cfg.update(extra)
    return cfg


@pytest.fixture(scope="module")
def estimated(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("estimate")
    write_study(tmp)
    assert run(tmp, "estimate", app_config(subgroups=["gender"])) == 0
    return tmp


EXPECTED_ESTIMATE_FILES = {"estimates.csv", "cv_compliance.csv", "cv_response_pattc.csv",
                           "cv_response_patt.csv", "cutpoint.csv", "counterfactuals.csv",
                           "manifest.json"}


def test_estimate_writes_full_output_set(estimated):
    out = estimated / "out"
    assert {p.name for p in out.iterdir()} == EXPECTED_ESTIMATE_FILES
    est = pd.read_csv(out / "estimates.csv")
    overall = est[est["subgroup"].isna()]
    assert list(overall["estimator"]) == ["PATT-C", "PATT", "CACE", "ITT"]
    assert np.isfinite(est[["estimate", "ci_low", "ci_high", "se"]].to_numpy()).all()
    assert (est["ci_low"] <= est["ci_high"]).all()
    cv = pd.read_csv(out / "cv_compliance.csv")
    assert len(cv) > 0


def test_subgroups_add_two_rows(estimated):
    est = pd.read_csv(estimated / "out" / "estimates.csv")
    assert len(est) == 4 + 2
    assert sorted(est["subgroup"].dropna()) == ["gender=0", "gender=1"]


def test_manifest_reruns_exactly(estimated):
    manifest = json.loads((estimated / "out" / "manifest.json").read_text())
    cfg = dict(manifest["config"], output_dir="rerun")
    assert run(estimated, "estimate", cfg, name="rerun.yaml") == 0
    again = json.loads((estimated / "rerun" / "manifest.json").read_text())
    assert again["outputs"] == manifest["outputs"]


def test_placebo_after_estimate(estimated):
    assert run(estimated, "placebo", app_config(bootstrap={"replicates": 50})) == 0
    table = pd.read_csv(estimated / "out" / "placebo.csv")
    row = table.iloc[0]
    assert row["difference"] == row["rct_complier_mean"] - row["adjusted_population_mean"]
    assert 0 <= row["p_value"] <= 1


def test_placebo_without_counterfactuals_is_sequencing_error(tmp_path, capsys):
    write_study(tmp_path)
    assert run(tmp_path, "placebo", app_config()) == 1
    assert "SequencingError" in capsys.readouterr().err


def test_zero_treated_population_is_data_error(tmp_path, capsys):
    write_study(tmp_path, obs_treated=False)
    assert run(tmp_path, "estimate", app_config()) == 1
    err = capsys.readouterr().err
    assert "DataError" in err and "D=1" in err


def test_diagnose_one_sided_and_accuracy_passthrough(tmp_path):
    write_study(tmp_path)
    assert run(tmp_path, "diagnose", app_config()) == 0
    census = pd.read_csv(tmp_path / "out" / "defier_census.csv", dtype=str)
    cell = census[(census["T"] == "0") & (census["D"] == "1")]
    assert cell["value"].item() == "0"
    # refit on the file as the command reads it, along the command's seed path
    spec = FeatureSpec(("w1", "w2", "w3"))
    rct = load_table(tmp_path / "rct.csv", spec, "rct")
    learners = [LearnerSpec("elastic_net", alpha=1.0, seed=run_seed(11, 4)),
                LearnerSpec("gradient_boosted_trees", n_trees=30, seed=run_seed(11, 4))]
    treated = rct.subset(treated_training_rows(rct))
    plan = make_cv_plan(len(treated), 3, run_seed(11, 1), clusters=treated.cluster,
                        labels=treated.C)
    model = fit_compliance_model(rct, spec, learners, plan)
    expected = compliance_diagnostics(model, treated)
    got = pd.read_csv(tmp_path / "out" / "compliance_diagnostics.csv")
    np.testing.assert_allclose(got["accuracy"], expected["accuracy"], rtol=0, atol=1e-15)


def test_diagnose_counts_defiers(tmp_path):
    write_study(tmp_path, defiers=5)
    assert run(tmp_path, "diagnose", app_config()) == 0
    census = pd.read_csv(tmp_path / "out" / "defier_census.csv", dtype=str)
    cell = census[(census["T"] == "0") & (census["D"] == "1")]
    assert cell["value"].item() == "5"


def test_census_multiplier_on_replica_counts():
    assert census_from_counts(8343, 1265, 5230, 4282).multiplier == pytest.approx(0.111, abs=5e-4)


# --- validation ------------------------------------------------------------

def test_validation_lists_every_violation(tmp_path, capsys):
    cfg = {"threads": 0, "data": {"rct": {"path": "missing.csv", "outcome_scale": -1}},
           "features": {"covariates": ["w1"], "colour": 1}, "cv": {"folds": 1},
           "bootstrap": {"replicates": 1}}
    assert run(tmp_path, "estimate", cfg) == 1
    err = capsys.readouterr().err
    for needle in ("seed:", "threads:", "features: unknown", "data.rct", "outcome_scale",
                   "data.observational.path", "cv.folds", "bootstrap:"):
        assert needle in err, needle


def test_simulate_validation(tmp_path, capsys):
    cfg = {"seed": 1, "simulate": {"runs": 0, "grid": {"e1": []}, "params": {"bogus": 1},
                                   "binning": ["colour"]}}
    assert run(tmp_path, "simulate", cfg) == 1
    err = capsys.readouterr().err
    for needle in ("simulate.runs", "simulate.grid.e1", "simulate.grid.e6", "bogus",
                   "simulate.binning"):
        assert needle in err, needle


def test_missing_config_and_bad_yaml(tmp_path):
    assert main(["diagnose", "--config", str(tmp_path / "nope.yaml")]) == 1
    bad = tmp_path / "bad.yaml"
    bad.write_text("seed: [1,\n")
    assert main(["diagnose", "--config", str(bad)]) == 1


def test_internal_error_exit_code(tmp_path, monkeypatch):
    import pattc.cli as cli

    def boom(*args):
        raise RuntimeError("unexpected")

    monkeypatch.setitem(cli.HANDLERS, "simulate", boom)
    assert run(tmp_path, "simulate", one_cell_config()) == 2
