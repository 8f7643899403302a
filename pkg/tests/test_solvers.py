import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from iisu.solvers import (
    AdmmSettings,
    NnlsConvergenceError,
    NnlsProblem,
    fcls_solve,
    nnls_active_set,
    nnls_admm,
    nnls_admm_batch,
    nnls_objective,
)


def _kkt_violation(T, l, s):
    g = T.T @ (T @ s - l)
    zero = s <= 0
    lower = float(np.max(-g[zero], initial=0.0))
    free = float(np.max(np.abs(g[~zero]), initial=0.0))
    return max(lower, free)


def test_problem_validation():
    with pytest.raises(ValueError):
        NnlsProblem(np.zeros((0, 2)), np.zeros(0))
    with pytest.raises(ValueError):
        NnlsProblem(np.eye(2), np.array([1.0, np.nan]))
    with pytest.raises(ValueError):
        NnlsProblem(np.eye(2), np.ones(3))


def test_admm_settings_validation():
    with pytest.raises(ValueError):
        AdmmSettings(rho=0.0)
    with pytest.raises(ValueError):
        AdmmSettings(abs_tol=-1.0)
    with pytest.raises(ValueError):
        AdmmSettings(max_iter=0)


def test_active_set_identity():
    np.testing.assert_array_equal(nnls_active_set(np.eye(3), [1.0, 2.0, 3.0]), [1.0, 2.0, 3.0])


def test_active_set_clamps_negative_coordinate():
    np.testing.assert_array_equal(nnls_active_set(np.eye(2), [-1.0, 2.0]), [0.0, 2.0])


def test_active_set_accepts_problem_object():
    s = nnls_active_set(NnlsProblem(np.eye(2), np.array([-1.0, 2.0])))
    np.testing.assert_array_equal(s, [0.0, 2.0])


def test_active_set_matches_enumeration(rng):
    for _ in range(200):
        T = rng.normal(size=(5, 3))
        l = rng.normal(size=5)
        s = nnls_active_set(T, l)
        _, best = oracles.nnls_enumerate(T, l)
        assert abs(nnls_objective(T, l, s) - best) <= 1e-10
        assert np.all(s >= 0)
        assert _kkt_violation(T, l, s) <= 1e-10


def test_active_set_iteration_cap_reports_residual(rng):
    T = rng.normal(size=(10, 6))
    l = T @ np.ones(6)
    with pytest.raises(NnlsConvergenceError) as err:
        nnls_active_set(T, l, max_iter=1)
    assert err.value.residual > 0


def test_admm_identity_clamp():
    sol = nnls_admm(np.eye(2), [-1.0, 2.0])
    assert sol.converged
    np.testing.assert_allclose(sol.x, [0.0, 2.0], atol=1e-12)


def test_admm_matches_active_set_on_random_problems(rng):
    T = rng.normal(size=(100, 50, 20))
    l = rng.normal(size=(100, 50))
    sol = nnls_admm_batch(T, l)
    assert np.all(sol.converged)
    for p in range(100):
        ref, ref_obj = oracles.nnls_reference(T[p], l[p])
        obj = nnls_objective(T[p], l[p], sol.x[p])
        assert (obj - ref_obj) / max(ref_obj, 1e-300) < 1e-6


def test_admm_near_collinear_columns(rng):
    base = rng.uniform(0.1, 1.0, size=(40, 1))
    T = np.hstack([base + 1e-3 * rng.normal(size=(40, 1)) for _ in range(4)] + [rng.uniform(size=(40, 2))])
    cos = (T / np.linalg.norm(T, axis=0)).T @ (T / np.linalg.norm(T, axis=0))
    assert cos[0, 1] > 0.999
    for _ in range(20):
        l = T @ rng.uniform(0, 1, size=6) + 0.01 * rng.normal(size=40)
        sol = nnls_admm(T, l)
        assert sol.converged
        _, ref_obj = oracles.nnls_enumerate(T, l)
        assert nnls_objective(T, l, sol.x) <= ref_obj + 1e-6 * float(l @ l)


def test_admm_never_worse_than_zero(rng):
    T = rng.normal(size=(30, 8, 5))
    l = rng.normal(size=(30, 8))
    sol = nnls_admm_batch(T, l, AdmmSettings(max_iter=3, polish=False))
    for p in range(30):
        assert nnls_objective(T[p], l[p], sol.x[p]) <= 0.5 * float(l[p] @ l[p])


def test_admm_returns_flag_when_capped(rng):
    T = rng.normal(size=(50, 20))
    l = rng.normal(size=50)
    sol = nnls_admm(T, l, AdmmSettings(max_iter=1, polish=False))
    assert not sol.converged
    assert np.all(sol.x >= 0)


def test_admm_fixed_penalty(rng):
    T = rng.normal(size=(20, 5))
    l = rng.normal(size=20)
    sol = nnls_admm(T, l, AdmmSettings(rho=1.0, adaptive=False))
    _, ref_obj = oracles.nnls_reference(T, l)
    assert sol.converged
    assert nnls_objective(T, l, sol.x) <= ref_obj * (1 + 1e-6) + 1e-12


def test_batch_result_does_not_depend_on_neighbours(rng):
    T = rng.normal(size=(12, 15, 6))
    l = rng.normal(size=(12, 15))
    full = nnls_admm_batch(T, l).x
    for p in (0, 5, 11):
        alone = nnls_admm_batch(T[p:p + 1], l[p:p + 1]).x[0]
        np.testing.assert_array_equal(full[p], alone)
    half = nnls_admm_batch(T[6:], l[6:]).x
    np.testing.assert_array_equal(full[6:], half)


def test_shared_design_matches_stacked(rng):
    T = rng.normal(size=(15, 6))
    l = rng.normal(size=(4, 15))
    shared = nnls_admm_batch(T, l).x
    stacked = nnls_admm_batch(np.broadcast_to(T, (4, 15, 6)), l).x
    np.testing.assert_allclose(shared, stacked, atol=1e-10)


def test_fcls_pure_pixel(rng):
    M = rng.uniform(0.05, 0.9, size=(30, 4))
    a = fcls_solve(M, M[:, 0])
    np.testing.assert_allclose(a, [1.0, 0.0, 0.0, 0.0], atol=1e-9)


def test_fcls_half_mixture_matches_qp_oracle(rng):
    M = rng.uniform(0.05, 0.9, size=(30, 4))
    y = 0.5 * M[:, 0] + 0.5 * M[:, 1]
    a = fcls_solve(M, y)
    ref = oracles.fcls_projected_gradient(M, y)
    np.testing.assert_allclose(ref, [0.5, 0.5, 0.0, 0.0], atol=1e-6)
    np.testing.assert_allclose(a, ref, atol=1e-6)


def test_fcls_zero_target_is_feasible_optimum(rng):
    M = rng.uniform(0.05, 0.9, size=(30, 4))
    y = np.zeros(30)
    a = fcls_solve(M, y)
    assert np.all(a >= 0)
    assert abs(a.sum() - 1.0) <= 1e-12
    ref = oracles.fcls_projected_gradient(M, y)
    obj, ref_obj = oracles.fcls_objective(M, y, a), oracles.fcls_objective(M, y, ref)
    assert obj <= ref_obj + 1e-8 * max(1.0, ref_obj)


def test_fcls_rejects_zero_matrix():
    with pytest.raises(ValueError):
        fcls_solve(np.zeros((5, 2)), np.ones(5))


def test_fcls_random_vs_qp_oracle(rng):
    for _ in range(20):
        M = rng.uniform(0.05, 0.9, size=(25, 3))
        y = rng.uniform(0.0, 1.0, size=25)
        a = fcls_solve(M, y)
        ref = oracles.fcls_projected_gradient(M, y)
        # the weighted sum-to-one row adds O(1/delta^2) slack to the objective
        assert oracles.fcls_objective(M, y, a) <= oracles.fcls_objective(M, y, ref) + 1e-5


problems = st.integers(1, 6).flatmap(
    lambda n: st.tuples(
        hnp.arrays(np.float64, (n + 3, n), elements=st.floats(-5, 5, allow_nan=False)),
        hnp.arrays(np.float64, (n + 3,), elements=st.floats(-5, 5, allow_nan=False)),
    )
)


@settings(max_examples=60, deadline=None)
@given(problems)
def test_solutions_are_exactly_nonnegative(problem):
    T, l = problem
    s = nnls_active_set(T, l)
    x = nnls_admm(T, l).x
    assert np.all(s >= 0)
    assert np.all(x >= 0)
    assert nnls_objective(T, l, x) <= 0.5 * float(l @ l) + 1e-12


@settings(max_examples=60, deadline=None)
@given(problems)
def test_active_set_is_deterministic_and_kkt(problem):
    T, l = problem
    a, b = nnls_active_set(T, l), nnls_active_set(T, l)
    np.testing.assert_array_equal(a, b)
    scale = max(1.0, float(np.abs(T).max()) ** 2 * max(1.0, float(np.abs(l).max())))
    assert _kkt_violation(T, l, a) <= 1e-10 * scale


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, (8, 3), elements=st.floats(0.01, 1, allow_nan=False)),
       hnp.arrays(np.float64, (8,), elements=st.floats(0, 1, allow_nan=False)))
def test_fcls_sums_to_one(M, y):
    a = fcls_solve(M, y)
    assert np.all(a >= 0)
    assert abs(a.sum() - 1.0) <= 1e-12
