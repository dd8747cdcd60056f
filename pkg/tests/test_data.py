import numpy as np
import pytest

from data import ColumnSchema, ObservationTable, fold_index_sets, load_csv, make_fold_plan
from errors import EmptyFile, InvalidKPrime, MissingColumn, NonBinaryTreatment, NonFiniteValue, TooFewRows


def write(tmp_path, text, name="d.csv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def test_load_csv_three_rows(tmp_path):
    path = write(tmp_path, "x1,T,Y\n0.1,1,2.0\n0.5,0,1.5\n0.9,1,-0.3\n")
    table = load_csv(path, ColumnSchema(treatment="T", outcome="Y"))
    assert table.n == 3
    assert table.p == 1
    assert table.covariate_names == ("x1",)
    np.testing.assert_array_equal(table.treatment, [1, 0, 1])
    np.testing.assert_allclose(table.outcome, [2.0, 1.5, -0.3])


def test_load_csv_rejects_bad_treatment(tmp_path):
    path = write(tmp_path, "x1,T,Y\n0.1,2,2.0\n")
    with pytest.raises(NonBinaryTreatment):
        load_csv(path, ColumnSchema(treatment="T", outcome="Y"))


def test_load_csv_missing_outcome_column(tmp_path):
    path = write(tmp_path, "x1,T,Z\n0.1,1,2.0\n")
    with pytest.raises(MissingColumn):
        load_csv(path, ColumnSchema(treatment="T", outcome="Y"))


def test_load_csv_non_numeric_and_missing(tmp_path):
    with pytest.raises(NonFiniteValue):
        load_csv(write(tmp_path, "x1,T,Y\nabc,1,2.0\n"), ColumnSchema(treatment="T", outcome="Y"))
    with pytest.raises(NonFiniteValue):
        load_csv(write(tmp_path, "x1,T,Y\n0.1,1,\n0.2,0,1.0\n", "e.csv"), ColumnSchema(treatment="T", outcome="Y"))


def test_load_csv_empty(tmp_path):
    with pytest.raises(EmptyFile):
        load_csv(write(tmp_path, ""), ColumnSchema(treatment="T", outcome="Y"))
    with pytest.raises(EmptyFile):
        load_csv(write(tmp_path, "x1,T,Y\n", "h.csv"), ColumnSchema(treatment="T", outcome="Y"))


def test_load_csv_instrument_and_explicit_covariates(tmp_path):
    path = write(tmp_path, "a,b,W,T,Y\n1,2,1,1,0.5\n3,4,0,0,0.7\n")
    table = load_csv(path, ColumnSchema(treatment="T", outcome="Y", covariates=("b",), instrument="W"))
    assert table.p == 1
    np.testing.assert_array_equal(table.covariates[:, 0], [2, 4])
    np.testing.assert_array_equal(table.instrument, [1, 0])


def test_table_is_immutable():
    table = ObservationTable(covariates=[[0.1], [0.4]], treatment=[1, 0], outcome=[2.0, 3.0])
    with pytest.raises(ValueError):
        table.outcome[0] = 5.0
    with pytest.raises(Exception):
        table.outcome = np.zeros(2)


def test_fold_plan_ten_rows():
    plan = make_fold_plan(10, 5, 2, seed=0)
    assert [len(plan.fold_rows(k)) for k in range(5)] == [2, 2, 2, 2, 2]
    # 0-based folds: H_{1,1}={2,3} is h1[0]=(1,2)
    assert plan.h1[0] == (1, 2) and plan.h2[0] == (3, 4)
    assert plan.h1[2] == (0, 1) and plan.h2[2] == (3, 4)
    assert plan.h1[3] == (0, 1) and plan.h2[3] == (2, 4)


def test_fold_index_sets_three_folds():
    h1, h2 = fold_index_sets(3, 1)
    assert h1[1] == (0,)
    assert h2[1] == (2,)


@pytest.mark.parametrize("K,Kprime", [(5, 4), (5, 0), (2, 1)])
def test_invalid_kprime(K, Kprime):
    with pytest.raises(InvalidKPrime):
        make_fold_plan(20, K, Kprime, seed=0)


def test_too_few_rows():
    with pytest.raises(TooFewRows):
        make_fold_plan(4, 5, 2, seed=0)


@pytest.mark.parametrize("n,K,Kprime", [(10, 5, 2), (17, 3, 1), (101, 7, 3), (64, 4, 2)])
def test_fold_plan_partition_and_index_sets(n, K, Kprime):
    plan = make_fold_plan(n, K, Kprime, seed=n)
    rows = np.concatenate([plan.fold_rows(k) for k in range(K)])
    assert sorted(rows.tolist()) == list(range(n))
    for k in range(K):
        expected = int(np.ceil((k + 1) * n / K)) - int(np.ceil(k * n / K))
        assert len(plan.fold_rows(k)) == expected
        assert set(plan.h1[k]).isdisjoint(plan.h2[k])
        assert k not in plan.h1[k] and k not in plan.h2[k]
        assert set(plan.h1[k]) | set(plan.h2[k]) | {k} == set(range(K))
        assert len(plan.h1[k]) == Kprime
        assert np.intersect1d(plan.init_rows(k), plan.nuisance_rows(k)).size == 0
        assert np.all(plan.fold_of[plan.fold_rows(k)] == k)


def test_fold_plan_is_deterministic():
    a = make_fold_plan(50, 5, 2, seed=9)
    b = make_fold_plan(50, 5, 2, seed=9)
    np.testing.assert_array_equal(a.permutation, b.permutation)
    assert a.same_as(b)
    assert not a.same_as(make_fold_plan(50, 5, 2, seed=10))


def test_stratified_folds_balance_treated_share(rng):
    for trial in range(20):
        n = int(rng.integers(30, 300))
        flags = (rng.uniform(size=n) < rng.uniform(0.1, 0.9)).astype(int)
        plan = make_fold_plan(n, 5, 2, seed=trial, stratify=flags)
        share = flags.mean()
        for k in range(5):
            rows = plan.fold_rows(k)
            assert abs(flags[rows].sum() - share * len(rows)) <= 1.0 + 1e-9
