import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from iisu.datamodel import AbundanceMap, CubeKind, DataError, SpectralCube
from iisu.metrics import (
    EvaluationReport,
    classify,
    compare_methods,
    evaluate,
    nre,
    rmse_a,
    rmse_r,
)


def _amap(a):
    a = np.asarray(a, float)
    return AbundanceMap(a, tuple(f"c{k}" for k in range(a.shape[0])), 1, a.shape[1])


def _cube(values, kind=CubeKind.REFLECTANCE):
    values = np.asarray(values, float)
    return SpectralCube(values, np.arange(values.shape[0]) + 400.0, kind)


def test_rmse_a_examples():
    truth = _amap([[1, 0], [0, 1]])
    assert rmse_a(truth, truth) == 0
    assert abs(rmse_a(truth, _amap([[0.9, 0.1], [0.1, 0.9]])) - 0.1) < 1e-15
    assert abs(rmse_a(truth, _amap([[0.5, 0.5], [0.5, 0.5]])) - 0.5) < 1e-15


def test_rmse_a_shape_mismatch():
    with pytest.raises(DataError):
        rmse_a(_amap([[1, 0], [0, 1]]), _amap([[1], [0]]))


@settings(max_examples=30)
@given(st.integers(2, 5).flatmap(lambda k: st.tuples(
    hnp.arrays(float, (k, 6), elements=st.floats(0, 1)),
    hnp.arrays(float, (k, 6), elements=st.floats(0, 1)),
    st.permutations(list(range(k))))))
def test_rmse_a_class_permutation_invariance(data):
    t, e, order = data
    assert abs(rmse_a(t, e) - rmse_a(t[order], e[order])) < 1e-15
    assert rmse_a(t, e) == rmse_a(e, t)


def test_rmse_r_examples(rng):
    x = _cube(rng.uniform(size=(3, 4, 5)))
    assert rmse_r(x, x) == 0
    assert abs(rmse_r(_cube(np.zeros((1, 1, 1))), _cube(np.full((1, 1, 1), 0.2))) - 0.2) < 1e-15
    a, b = rng.uniform(size=(20, 30, 30)), rng.uniform(size=(20, 30, 30))
    assert abs(rmse_r(_cube(a), _cube(b)) - oracles.rmse_two_pass(a, b)) < 1e-12
    with pytest.raises(DataError):
        rmse_r(_cube(a), _cube(b[:, :5]))


def test_nre_examples(rng):
    x = rng.uniform(0, 2, size=(4, 5, 6))
    x.flat[0], x.flat[1] = 0.0, 2.0
    assert nre(_cube(x), _cube(x)) == 0
    assert abs(nre(_cube(x), _cube(x + 0.1)) - 0.05) < 1e-12
    with pytest.raises(DataError):
        nre(_cube(np.ones((2, 2, 2))), _cube(np.ones((2, 2, 2))))


def test_nre_uses_observed_range_only():
    x = np.array([[[0.0, 1.0]]])
    y = np.array([[[0.0, 3.0]]])
    assert nre(_cube(x), _cube(y)) != nre(_cube(y), _cube(x))


def test_classify_examples(rng):
    np.testing.assert_array_equal(classify(_amap(np.eye(3))), [0, 1, 2])
    assert classify(_amap([[0.5], [0.5]]))[0] == 0
    a = rng.integers(0, 4, size=(5, 200)).astype(float)  # plenty of ties
    np.testing.assert_array_equal(classify(a), oracles.argmax_scan(a))


def _report(name, value, classes=("a", "b")):
    return EvaluationReport(name, value, value, value, classes, {c: value for c in classes})


def test_report_rejects_bad_values():
    with pytest.raises(DataError):
        _report("x", -1.0)
    with pytest.raises(DataError):
        _report("x", float("nan"))


def test_single_perfect_method():
    table = compare_methods([_report("only", 0.0)])
    assert table.methods == ["only"]
    rows = list(csv.reader(io.StringIO(table.to_csv())))
    assert rows[0] == ["method", "rmse_a", "rmse_r", "nre"]
    assert [float(v) for v in rows[1][1:]] == [0.0, 0.0, 0.0]


def test_table_preserves_order_and_finds_best():
    table = compare_methods([_report("worse", 0.3), _report("better", 0.1)])
    assert table.methods == ["worse", "better"]
    assert table.best("rmse_a") == "better"
    text = table.to_text().splitlines()
    assert text[1].startswith("worse") and text[2].startswith("better")
    assert len({len(line) for line in text}) == 1
    doc = json.loads(table.to_json())
    assert [d["method"] for d in doc] == ["worse", "better"]
    rows = list(csv.reader(io.StringIO(table.to_csv())))
    assert float(rows[2][1]) == 0.1


def test_compare_rejects_inconsistent_inputs():
    with pytest.raises(DataError):
        compare_methods([])
    with pytest.raises(DataError):
        compare_methods([_report("a", 0.1), _report("b", 0.1, classes=("x", "y", "z"))])


def test_evaluate_report(rng):
    truth = _amap([[1, 0, 1], [0, 1, 0]])
    est = _amap([[0.4, 0.1, 0.8], [0.6, 0.9, 0.2]])
    r = _cube(rng.uniform(size=(4, 1, 3)))
    obs = _cube(rng.uniform(size=(4, 1, 3)), CubeKind.RADIANCE)
    rep = evaluate("m", truth, est, r, r, obs, obs, shaded=[True, False, False])
    assert rep.accuracy == pytest.approx(2 / 3)
    assert rep.accuracy_shaded == 0.0
    assert rep.rmse_r == 0 and rep.nre == 0
    assert rep.rmse_a_per_class["c0"] == pytest.approx(np.sqrt((0.36 + 0.01 + 0.04) / 3))
    assert set(rep.to_dict()) >= {"method", "rmse_a", "rmse_r", "nre", "accuracy"}
    with pytest.raises(DataError):
        evaluate("m", truth, est, r, r, obs, obs, shaded=[True])
