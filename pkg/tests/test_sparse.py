import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gsure.errors import DegenerateRegularizationError, NonConvergedError
from gsure.gaussian import LinearGaussianModel, ml_estimate
from gsure.problems import heat_problem
from gsure.rng import SeededRng
from gsure.sparse import (
    DiffOp2,
    L1PathSolver,
    SolverSettings,
    kkt_residual,
    l1_jacobian_trace,
    objective_value,
    reduction_for,
    solve_l1_pen,
    solve_l1_pen_u,
    solve_l1_path,
    write_iterate_log,
)
from gsure.core import fd_divergence

seeds = st.integers(0, 2**32)


def random_instance(seed, n=10, m=8, noise=0.3):
    r = SeededRng(seed)
    H = r.normal((n, m))
    A = r.child(1).normal((n, n))
    C = A @ A.T / n + 0.5 * np.eye(n)
    model = LinearGaussianModel(H, C)
    theta = np.cumsum(np.cumsum(r.child(2).normal(m) * (r.child(3).uniform(m) < 0.3)))
    x = H @ theta + noise * r.child(4).normal(n)
    return model, DiffOp2(m), x


def brute_force(model, L, x, lam):
    """Exact minimizer by enumerating the sign pattern of L theta.

    For each pattern s in {-1, 0, 1}^p the problem restricted to
    ``L_i theta = 0`` (s_i = 0) with linear term ``lam s^T L theta`` is an
    equality-constrained QP; the best pattern whose solution is sign
    consistent is the global minimum.
    """
    Lm = L.matrix
    p, m = Lm.shape
    Ci = np.linalg.inv(model.C)
    G = 2 * model.H.T @ Ci @ model.H
    g = 2 * model.H.T @ Ci @ x
    best, best_val = None, np.inf
    for s in itertools.product((-1, 0, 1), repeat=p):
        s = np.array(s, dtype=float)
        E = Lm[s == 0]
        rhs = g - lam * Lm.T @ s
        K = np.block([[G, E.T], [E, np.zeros((E.shape[0], E.shape[0]))]])
        try:
            sol = np.linalg.solve(K, np.concatenate([rhs, np.zeros(E.shape[0])]))
        except np.linalg.LinAlgError:
            continue
        th = sol[:m]
        v = Lm @ th
        if np.any(v[s > 0] < -1e-9) or np.any(v[s < 0] > 1e-9):
            continue
        val = objective_value(model, L, x, lam, th)
        if val < best_val:
            best, best_val = th, val
    return best, best_val


# -- operator ----------------------------------------------------------------------

@given(st.integers(3, 40), st.floats(-5, 5), st.floats(-5, 5))
def test_diffop_annihilates_affine(m, a, b):
    D = DiffOp2(m)
    assert D.matrix.shape == (m - 2, m)
    assert np.allclose(D @ (a + b * np.arange(m)), 0, atol=1e-9 * (1 + abs(a) + abs(b) * m))
    assert np.all(D.matrix.sum(axis=1) == 0)


def test_diffop_too_small():
    with pytest.raises(ValueError):
        DiffOp2(2)


def test_settings_validation():
    with pytest.raises(ValueError):
        SolverSettings(rel_tol=0)
    with pytest.raises(ValueError):
        SolverSettings(max_iters=0)


# -- objective and KKT ----------------------------------------------------------------

@given(seeds, st.floats(0, 10))
def test_objective_matches_independent_evaluation(seed, lam):
    model, L, x = random_instance(seed)
    theta = SeededRng(seed).child(9).normal(8)
    r = x - model.H @ theta
    direct = r @ np.linalg.solve(model.C, r) + lam * np.abs(np.diff(theta, 2)).sum()
    assert objective_value(model, L, x, lam, theta) == pytest.approx(direct, rel=1e-10)
    assert objective_value(model, L, x, lam, np.zeros(8)) == pytest.approx(x @ np.linalg.solve(model.C, x))


def test_objective_zero_when_data_in_range():
    r = SeededRng(3)
    model = LinearGaussianModel(r.normal((6, 6)) + 4 * np.eye(6))
    x = r.normal(6)
    assert objective_value(model, DiffOp2(6), x, 0.0, ml_estimate(model, x)) < 1e-20


def test_kkt_large_at_zero():
    model, L, x = random_instance(5)
    assert kkt_residual(model, L, x, 1e-6, np.zeros(8)) > 1e-2


# -- solver ---------------------------------------------------------------------------

@settings(max_examples=25)
@given(seeds, st.floats(0.01, 0.9))
def test_matches_brute_force_oracle(seed, frac):
    model, L, x = random_instance(seed, n=8, m=6)
    lam = frac * reduction_for(model, L).lambda_zero(model.whiten(x))
    theta = solve_l1_pen(model, L, x, lam)
    ref, ref_val = brute_force(model, L, x, lam)
    assert objective_value(model, L, x, lam, theta) == pytest.approx(ref_val, rel=1e-8, abs=1e-10)
    assert np.allclose(theta, ref, atol=1e-6 * (1 + np.abs(ref).max()))


@given(seeds, st.floats(0.001, 2.0))
def test_kkt_and_descent(seed, frac):
    model, L, x = random_instance(seed)
    lam = frac * reduction_for(model, L).lambda_zero(model.whiten(x))
    settings_ = SolverSettings()
    theta = solve_l1_pen(model, L, x, lam, settings_)
    assert kkt_residual(model, L, x, lam, theta) <= settings_.rel_tol
    assert objective_value(model, L, x, lam, theta) <= objective_value(model, L, x, lam, np.zeros(8))


@given(seeds, st.floats(0.01, 0.9))
def test_agrees_with_long_run_reference(seed, frac):
    model, L, x = random_instance(seed)
    lam = frac * reduction_for(model, L).lambda_zero(model.whiten(x))
    theta = solve_l1_pen(model, L, x, lam)
    ref = solve_l1_pen(model, L, x, lam, SolverSettings(max_iters=50000, rel_tol=1e-10))
    a = objective_value(model, L, x, lam, theta)
    assert a == pytest.approx(objective_value(model, L, x, lam, ref), rel=1e-8)


def test_lambda_zero_is_ml():
    model, L, x = random_instance(2)
    assert np.allclose(solve_l1_pen(model, L, x, 0.0), ml_estimate(model, x), atol=1e-6)


def test_large_lambda_gives_affine_least_squares_fit():
    model, L, x = random_instance(4)
    theta = solve_l1_pen(model, L, x, 1e8)
    B = np.column_stack([np.ones(8), np.arange(8.0)])
    R = np.linalg.cholesky(model.C)
    coef = np.linalg.lstsq(np.linalg.solve(R, model.H @ B), np.linalg.solve(R, x), rcond=None)[0]
    assert np.allclose(theta, B @ coef, atol=1e-6)
    assert np.allclose(L @ theta, 0, atol=1e-8)


def test_lambda_zero_threshold():
    model, L, x = random_instance(6)
    lam0 = reduction_for(model, L).lambda_zero(model.whiten(x))
    above = solve_l1_pen(model, L, x, 1.0001 * lam0)
    below = solve_l1_pen(model, L, x, 0.99 * lam0)
    assert np.allclose(L @ above, 0, atol=1e-9)
    assert np.abs(L @ below).max() > 1e-9


def test_tiny_lambda_keeps_smooth_sign_pattern():
    model, L, x = random_instance(8, n=14)
    smooth = ml_estimate(model, x)
    v = L @ smooth
    assert np.all(np.abs(v) > 1e-3)
    theta = solve_l1_pen(model, L, x, 1e-6)
    assert np.array_equal(np.sign(L @ theta), np.sign(v))


def test_deterministic():
    model, L, x = random_instance(10)
    log_a, log_b = [], []
    a = solve_l1_pen(model, L, x, 0.5, log=log_a)
    b = solve_l1_pen(model, L, x, 0.5, log=log_b)
    assert np.array_equal(a, b) and log_a == log_b


def test_non_converged_carries_residual():
    tp = heat_problem(40)
    model = LinearGaussianModel(tp.H)
    x = tp.observe(0)
    with pytest.raises(NonConvergedError) as info:
        solve_l1_pen(model, DiffOp2(40), x, 1e-4, SolverSettings(max_iters=2))
    assert info.value.details["residual"] > 0


def test_tolerance_failure_carries_final_iterate():
    tp = heat_problem(40)
    model = LinearGaussianModel(tp.H)
    x = tp.observe(0)
    L = DiffOp2(40)
    with pytest.raises(NonConvergedError) as info:
        solve_l1_pen(model, L, x, 1e-4, SolverSettings(rel_tol=1e-300))
    theta = info.value.details["theta"]
    assert kkt_residual(model, L, x, 1e-4, theta) == info.value.details["residual"] < 1e-6


def test_degenerate_null_space():
    # H kills the ramp, so the affine part of theta is not identifiable
    m = 5
    H = np.eye(m) - np.outer(np.arange(m) - 2, np.arange(m) - 2) / 10.0
    with pytest.raises(DegenerateRegularizationError):
        solve_l1_pen(LinearGaussianModel(H), DiffOp2(m), np.ones(m), 1.0)


def test_iterate_log_and_csv(tmp_path):
    tp = heat_problem(80)
    model = LinearGaussianModel(tp.H)
    L = DiffOp2(80)
    x = tp.observe(2)
    lam = 0.1 * reduction_for(model, L).lambda_zero(model.whiten(x))
    log = []
    solve_l1_pen(model, L, x, lam, log=log)
    obj = np.array([row[1] for row in log])
    kkt = np.array([row[2] for row in log])
    assert [row[0] for row in log] == list(range(len(log)))
    assert np.all(np.diff(obj) <= 1e-9 * np.abs(obj).max())
    assert kkt[-1] <= 1e-7 < kkt[0]
    write_iterate_log(log, tmp_path / "it.csv")
    lines = (tmp_path / "it.csv").read_text().splitlines()
    assert lines[0] == "iter,objective,kkt_residual" and len(lines) == len(log) + 1


# -- paths, checkpoints and divergence ---------------------------------------------------

def test_path_matches_single_solves():
    model, L, x = random_instance(12)
    lam0 = reduction_for(model, L).lambda_zero(model.whiten(x))
    lams = lam0 * np.array([0.5, 0.01, 2.0, 0.1])
    path = solve_l1_path(model, L, x, lams)
    for lam, row in zip(lams, path):
        single = solve_l1_pen(model, L, x, lam)
        assert objective_value(model, L, x, lam, row) == pytest.approx(objective_value(model, L, x, lam, single), rel=1e-10)
        assert np.allclose(row, single, atol=1e-8)


def test_checkpoint_resume_matches_fresh_solve():
    tp = heat_problem(60)
    model = LinearGaussianModel(tp.H)
    L = DiffOp2(60)
    u = model.sufficient_statistic(tp.observe(1))
    lam0 = reduction_for(model, L).lambda_zero(reduction_for(model, L).xw_from_u(u))
    solver = L1PathSolver(model, L)
    solver.path(u, lam0 * np.geomspace(1e-4, 1, 9))
    for lam in lam0 * np.array([3e-4, 0.02, 0.5]):
        assert np.allclose(solver.solve(u, lam), solve_l1_pen_u(model, L, u, lam), atol=1e-9)


@given(seeds, st.floats(0.02, 0.8))
def test_jacobian_trace_matches_finite_differences(seed, frac):
    model, L, x = random_instance(seed)
    u = model.sufficient_statistic(x)
    lam = frac * reduction_for(model, L).lambda_zero(model.whiten(x))
    exact = l1_jacobian_trace(model, L, u, lam)
    fd = fd_divergence(lambda v: np.array([solve_l1_pen_u(model, L, row, lam) for row in np.atleast_2d(v)]).reshape(np.shape(v)),
                       u, 1e-7 * (1 + np.abs(u).max()))
    assert fd == pytest.approx(exact, rel=1e-4, abs=1e-6)


def test_negative_lambda_rejected():
    model, L, x = random_instance(1)
    with pytest.raises(ValueError):
        solve_l1_pen(model, L, x, -1.0)
    with pytest.raises(ValueError):
        L1PathSolver(model, L).path(model.sufficient_statistic(x), [-1.0])
