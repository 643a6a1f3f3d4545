import numpy as np
import pandas as pd
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from pattc.data_model import (ColumnRoles, Dataset, FeatureSpec, RowError, SchemaError,
                              build_design_matrix, categorical_levels, load_table,
                              rescale_outcome, write_table)


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


SPEC = FeatureSpec(covariates=("w1",))


def test_load_three_rows(tmp_path):
    f = _write(tmp_path / "a.csv", "w1,s,t,d,y,weight,hh\n0.5,1,1,1,2,1,a\n1,1,0,0,3,2,a\n2,1,1,0,1,1,b\n")
    ds = load_table(f, SPEC, "rct")
    assert len(ds) == 3
    np.testing.assert_array_equal(ds.Y, [2, 3, 1])
    np.testing.assert_array_equal(ds.weight, [1, 2, 1])
    assert list(ds.cluster) == ["a", "a", "b"]


def test_missing_outcome_column_names_it(tmp_path):
    f = _write(tmp_path / "a.csv", "w1,s,t,d,weight\n0.5,1,1,1,1\n")
    with pytest.raises(SchemaError, match=r"\by\b"):
        load_table(f, SPEC, "rct")


def test_population_without_assignment_column(tmp_path):
    f = _write(tmp_path / "p.csv", "w1,d,y\n0.1,1,2\n0.2,0,3\n")
    ds = load_table(f, SPEC, "observational")
    assert np.isnan(ds.T).all()
    np.testing.assert_array_equal(ds.D, [1, 0])
    np.testing.assert_array_equal(ds.S, [0, 0])


def test_bad_numeric_row_dropped_and_reported(tmp_path, caplog):
    f = _write(tmp_path / "a.csv", "w1,d,y\n0.1,1,2\nabc,0,3\n0.3,0,1\n")
    ds = load_table(f, SPEC, "rct")
    assert len(ds) == 2
    assert "row 1 (w1)" in caplog.text
    with pytest.raises(RowError) as err:
        load_table(f, SPEC, "rct", strict=True)
    assert err.value.rows == [1]


def test_compliance_hidden_for_controls_and_defiers_flagged(tmp_path):
    f = _write(tmp_path / "a.csv", "w1,s,t,d,c,y\n0,1,1,1,1,1\n0,1,0,0,1,1\n0,1,0,1,NA,1\n")
    ds = load_table(f, SPEC, "rct")
    assert ds.C[0] == 1 and np.isnan(ds.C[1]) and np.isnan(ds.C[2])
    np.testing.assert_array_equal(ds.defier, [False, False, True])


def test_tab_delimiter_and_custom_roles(tmp_path):
    f = _write(tmp_path / "a.tsv", "x\ttreat\tgot\tout\n1\t1\t1\t4\n")
    spec = FeatureSpec(("x",), roles=ColumnRoles(assignment="treat", receipt="got", outcome="out"))
    ds = load_table(f, spec, "rct", delimiter="\t")
    assert ds.T[0] == 1 and ds.D[0] == 1 and ds.Y[0] == 4


def test_outcome_scale_applied_at_load(tmp_path):
    f = _write(tmp_path / "a.csv", "w1,d,y\n0,1,2\n")
    ds = load_table(f, FeatureSpec(("w1",), outcome_scale=0.5), "observational")
    assert ds.Y[0] == 1.0


def test_role_column_cannot_be_covariate():
    with pytest.raises(SchemaError):
        FeatureSpec(covariates=("w1", "t"))


def _frame_ds(cols: dict, provenance="rct"):
    n = len(next(iter(cols.values())))
    return Dataset.from_arrays(pd.DataFrame(cols), D=np.zeros(n), Y=np.zeros(n), T=np.ones(n),
                               provenance=provenance)


def test_two_level_categorical_single_dummy():
    ds = _frame_ds({"g": ["a", "b", "b"]})
    X, names = build_design_matrix(ds, FeatureSpec(("g",), categorical=("g",)))
    assert names == ["g[b]"]
    np.testing.assert_array_equal(X[:, 0], [0, 1, 1])


def test_wave_by_household_interaction_hand_expanded():
    ds = _frame_ds({"wave": ["1", "1", "2", "2"], "hhsize": ["1", "2", "1", "2"]})
    spec = FeatureSpec(("wave", "hhsize"), categorical=("wave", "hhsize"),
                       interactions=(("wave[2]", "hhsize[2]"),))
    X, names = build_design_matrix(ds, spec)
    assert names == ["wave[2]", "hhsize[2]", "wave[2]:hhsize[2]"]
    expected = np.array([[0, 0, 0], [0, 1, 0], [1, 0, 0], [1, 1, 1]], dtype=float)
    np.testing.assert_array_equal(X, expected)


def test_no_interactions_is_plain_encoding():
    ds = _frame_ds({"a": [1.0, 2.0], "b": [3.0, 4.0]})
    X, names = build_design_matrix(ds, FeatureSpec(("a", "b")))
    assert names == ["a", "b"]
    np.testing.assert_array_equal(X, [[1, 3], [2, 4]])


def test_interaction_with_unknown_column():
    ds = _frame_ds({"a": [1.0, 2.0]})
    with pytest.raises(SchemaError):
        build_design_matrix(ds, FeatureSpec(("a",), interactions=(("a", "zz"),)))


def test_pinned_levels_keep_columns_aligned():
    full = _frame_ds({"g": ["a", "b", "c"]})
    spec = FeatureSpec(("g",), categorical=("g",))
    levels = categorical_levels(spec, full)
    _, names = build_design_matrix(full.subset(np.array([True, False, False])), spec, levels)
    assert names == ["g[b]", "g[c]"]


def test_rescale_outcome_examples():
    ds = Dataset.from_arrays({"w1": [0.0, 1.0]}, D=[0, 1], Y=[2.0, 0.0], weight=[1, 3])
    half = rescale_outcome(ds, 0.5)
    np.testing.assert_array_equal(half.Y, [1.0, 0.0])
    np.testing.assert_array_equal(rescale_outcome(ds, 1).frame, ds.frame)
    assert half.weight.sum() == ds.weight.sum()
    with pytest.raises(ValueError):
        rescale_outcome(ds, 0)


finite = st.floats(-1e6, 1e6, allow_nan=False, width=64)


@settings(max_examples=30, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(data=st.lists(st.tuples(finite, st.sampled_from([0.0, 1.0]), st.sampled_from([0.0, 1.0]),
                               finite, st.floats(0.01, 100)), min_size=1, max_size=15))
def test_write_load_round_trip(tmp_path, data):
    w1, t, d, y, wt = map(np.array, zip(*data))
    d = d * t  # one-sided
    c = np.where(t == 1, d, np.nan)
    ds = Dataset.from_arrays({"w1": w1}, T=t, D=d, C=c, Y=y, weight=wt, provenance="rct")
    path = tmp_path / "rt.csv"
    write_table(ds, path)
    back = load_table(path, SPEC, "rct", strict=True)
    for col in ("w1", "S", "T", "D", "C", "Y", "weight"):
        np.testing.assert_array_equal(back.frame[col].to_numpy(float), ds.frame[col].to_numpy(float))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("xyz"), finite), min_size=2, max_size=20))
def test_design_matrix_is_pure(rows):
    g, v = zip(*rows)
    ds = _frame_ds({"g": list(g), "v": list(v)})
    spec = FeatureSpec(("g", "v"), categorical=("g",))
    X1, n1 = build_design_matrix(ds, spec)
    X2, n2 = build_design_matrix(ds, spec)
    assert n1 == n2
    np.testing.assert_array_equal(X1, X2)


def test_extra_columns_ride_along(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("w1,d,y,grp,tag\n1,1,2,0,a\n2,0,3,1,b\n", encoding="utf-8")
    ds = load_table(path, FeatureSpec(("w1",)), "observational", extra=("grp", "tag"))
    assert ds.covariates == ("w1",)
    assert ds.frame["grp"].tolist() == [0.0, 1.0]
    assert ds.frame["tag"].tolist() == ["a", "b"]
    with pytest.raises(SchemaError):
        load_table(path, FeatureSpec(("w1",)), "observational", extra=("absent",))
