from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from pattc.simulation import (BIN_EDGES, DegenerateRunError, SimDataset, SimParams,
                              covariance_matrix, draw_grid, generate_population,
                              generate_study, grand_means, grid_cells, results_frame, rmse,
                              run_cell, run_grid, run_seed, sample_covariates, summarize_rmse,
                              true_effect)

SMALL = dict(N=6000, n=3000)


# --- covariates ------------------------------------------------------------

@pytest.fixture(scope="module")
def big_draw():
    return sample_covariates(1_000_000, 0)


def test_covariate_means(big_draw):
    np.testing.assert_allclose(big_draw.mean(axis=0), [0.5, 1.0, -1.0, -1.0], atol=0.01)


def test_covariate_covariances(big_draw):
    cov = np.cov(big_draw, rowvar=False)
    assert abs(cov[0, 2] - 0.5) < 0.01
    np.testing.assert_allclose(cov, covariance_matrix(), atol=0.01)


def test_covariates_deterministic_and_symmetric_root():
    np.testing.assert_array_equal(sample_covariates(50, 3), sample_covariates(50, 3))
    assert not np.array_equal(sample_covariates(50, 3), sample_covariates(50, 4))
    with pytest.raises(ValueError):
        sample_covariates(10, 0, variance=1.0)
    assert np.linalg.eigvalsh(covariance_matrix(1.0)).min() < 0


# --- generator -------------------------------------------------------------

def test_population_compliance_half_at_zero_shift():
    pop = generate_population(SimParams(N=10_000, n=5_000), np.random.default_rng(0))
    assert abs(pop["C"].mean() - 0.5) < 0.02


def test_forced_eligibility_is_degenerate():
    with pytest.raises(DegenerateRunError):
        generate_study(SimParams(e2=10.0, **SMALL))


def test_params_validation():
    with pytest.raises(ValueError):
        SimParams(N=100, n=60)
    with pytest.raises(ValueError):
        SimParams(p=1.0)


@pytest.fixture(scope="module")
def generated():
    params = SimParams(seed=13)
    rct, obs, rates = generate_study(params)
    return params, rct, obs, rates


def test_one_sided_receipt_everywhere(generated):
    _, rct, obs, _ = generated
    for ds in (rct, obs):
        assert np.all(ds.D <= ds.T)
        np.testing.assert_array_equal(ds.D, ds.T * ds.C)


def test_compliance_independent_of_assignment(generated):
    _, rct, _, _ = generated
    r = np.corrcoef(rct.C, rct.T)[0, 1]
    assert abs(r) < 3 / np.sqrt(len(rct))


def test_outcome_recomputes(generated):
    params, rct, obs, _ = generated
    for ds in (rct, obs):
        np.testing.assert_array_equal(ds.Y, ds.outcome(params, ds.D))
        np.testing.assert_allclose(ds.outcome(params, 1.0) - ds.outcome(params, 0.0), ds.b,
                                   rtol=0, atol=1e-12)


def test_samples_are_disjoint_and_sized(generated):
    params, rct, obs, rates = generated
    assert (rct.S == 1).all() and (obs.S == 0).all()
    assert len(rct) + len(obs) <= 2 * params.n
    for k in ("compliance_rate", "treatment_rate", "rct_rate"):
        assert 0 <= rates[k] <= 1
    view = rct.to_dataset()
    assert "w4" not in view.frame
    assert np.isnan(view.C[view.T == 0]).all()


def test_generation_is_deterministic():
    a = generate_study(SimParams(seed=2, **SMALL))[0]
    b = generate_study(SimParams(seed=2, **SMALL))[0]
    np.testing.assert_array_equal(a.Y, b.Y)


# --- true effect -----------------------------------------------------------

def synthetic(b, D):
    n = len(b)
    z = np.zeros(n)
    return SimDataset(np.zeros((n, 4)), z, np.asarray(D, float), np.asarray(D, float),
                      np.asarray(D, float), z, np.asarray(b, float), z, "observational")


def test_true_effect_cases():
    assert true_effect(synthetic([1, 1, -1], [1, 1, 0])) == 1.0
    assert true_effect(synthetic([1, -1, 1, -1], [1, 1, 1, 1])) == 0.0
    with pytest.raises(DegenerateRunError):
        true_effect(synthetic([1, -1], [0, 0]))


@pytest.mark.parametrize("effect,beta", [("constant", 1.0), ("zero", 0.0)])
def test_true_effect_of_constant_b(effect, beta):
    _, obs, _ = generate_study(SimParams(seed=1, effect=effect, **SMALL))
    assert true_effect(obs) == beta


def test_true_effect_matches_large_sample():
    big = SimParams(N=2_000_000, n=1_000_000, seed=77)
    _, obs_big, _ = generate_study(big)
    reference = true_effect(obs_big)
    assert -1 < reference < 1
    small = np.mean([true_effect(generate_study(SimParams(seed=s))[1]) for s in range(10)])
    assert abs(small - reference) < 0.05


# --- cells and grids -------------------------------------------------------

@pytest.fixture(scope="module")
def cell():
    return run_cell(SimParams(seed=31), 3)


def test_cell_determinism(cell):
    again = run_cell(SimParams(seed=31), 3)
    pd.testing.assert_frame_equal(cell.runs, again.runs)
    assert cell.rmse == again.rmse and cell.rates == again.rates


def test_cell_cace_is_hand_ratio(cell):
    for _, row in cell.runs.iterrows():
        rct, _, _ = generate_study(SimParams(seed=31), int(row["seed"]))
        t = rct.T == 1
        hand = (rct.Y[t].mean() - rct.Y[~t].mean()) / rct.D[t].mean()
        assert row["CACE"] == pytest.approx(hand, rel=1e-12)


def test_cell_rmse_definition(cell):
    runs = cell.runs
    for est in ("PATT-C", "PATT", "CACE"):
        expected = np.sqrt(np.mean((runs[est] - runs["true_effect"]) ** 2))
        assert cell.rmse[est] == pytest.approx(expected, rel=1e-12)
        assert cell.rmse[est] >= 0


def test_single_run_noise_free_cell():
    res = run_cell(SimParams(seed=5, d=0.0), 1)
    run = res.runs.iloc[0]
    assert res.rmse["PATT-C"] == pytest.approx(abs(run["PATT-C"] - run["true_effect"]))
    assert res.rmse["PATT-C"] < 1.0


def test_all_degenerate_cell_is_missing():
    res = run_cell(SimParams(e2=10.0, **SMALL), 2)
    assert res.missing and res.n_failed == 2 and "DegenerateRunError" in res.error
    row = res.row()
    assert np.isnan(row["rmse_PATT-C"]) and row["runs_failed"] == 2


def test_runs_must_be_positive():
    with pytest.raises(ValueError):
        run_cell(SimParams(), 0)


def test_grid_sizes():
    assert len(grid_cells(draw_grid(2, 0), SimParams(), 0)) == 64
    assert draw_grid(3, 5) == draw_grid(3, 5)
    with pytest.raises(ValueError):
        grid_cells({**draw_grid(2, 0), "e4": []}, SimParams(), 0)


def test_one_cell_grid_equals_run_cell():
    grid = {k: [0.1] for k in ("e1", "e2", "e3", "e4", "e5", "e6")}
    base = SimParams(**SMALL)
    (res,) = run_grid(grid, 1, seed=8, base=base)
    direct = run_cell(replace(base, e1=0.1, e2=0.1, e3=0.1, e4=0.1, e5=0.1, e6=0.1,
                              seed=run_seed(8, 0)), 1)
    assert res.rmse == direct.rmse


def test_parallel_equals_serial():
    grid = {**{k: [0.0] for k in ("e1", "e2", "e3", "e4", "e5")}, "e6": [-0.5, 0.5]}
    base = SimParams(**SMALL)
    serial = results_frame(run_grid(grid, 1, seed=3, threads=1, base=base))
    parallel = results_frame(run_grid(grid, 1, seed=3, threads=2, base=base))
    pd.testing.assert_frame_equal(serial, parallel)
    assert list(serial["cell"]) == [0, 1]


# --- summaries -------------------------------------------------------------

def test_constant_estimator_rmse():
    truth = np.array([0.2, -0.4, 0.1])
    assert rmse(np.full(3, 0.5), truth) == pytest.approx(np.sqrt(np.mean((0.5 - truth) ** 2)))


def test_summary_bins(cell):
    table = summarize_rmse([cell])
    assert len(table) == 100 * 3
    filled = table[table["n_cells"] > 0]
    assert len(filled) == 3 and set(filled["estimator"]) == {"PATT-C", "PATT", "CACE"}
    row = filled.iloc[0]
    assert row["compliance_rate_low"] <= cell.rates["compliance_rate"] < row["compliance_rate_high"]
    assert table["mean_rmse"].isna().sum() == 297
    one_axis = summarize_rmse([cell], ("compliance_rate",))
    lows = sorted(set(one_axis["compliance_rate_low"]))
    assert lows == list(BIN_EDGES[:-1]) and one_axis["compliance_rate_high"].max() == 1.0


def test_grand_means_skip_missing(cell):
    missing = run_cell(SimParams(e2=10.0, **SMALL), 1)
    gm = grand_means([cell, missing])
    assert gm == {k: cell.rmse[k] for k in ("PATT-C", "PATT", "CACE")}
