import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import random_spd
from gsure.core import linear_map, projected_sure_score, sure_score, zero_map
from gsure.errors import DimensionError
from gsure.experiments import dominance_check
from gsure.gaussian import (
    LinearGaussianModel,
    SeparableGaussianModel,
    blind_minimax,
    blind_minimax_map,
    diagonal_shrinkage,
    gaussian_sure,
    grad_log_q,
    iid_gaussian,
    ml_estimate,
    ml_map,
    read_matrix,
    sufficient_statistic,
    write_matrix,
)
from gsure.rng import SeededRng

finite = st.floats(-20, 20, allow_nan=False)
seeds = st.integers(0, 2**32)


def random_model(seed, n=6, m=4, rank=None):
    r = SeededRng(seed)
    H = r.normal((n, m))
    if rank is not None:
        H = r.normal((n, rank)) @ r.normal((rank, m))
    return LinearGaussianModel(H, random_spd(r.child(1), n))


# -- model invariants ---------------------------------------------------------

@given(seeds, st.sampled_from([None, 1, 2, 3]))
def test_moore_penrose_and_projection(seed, rank):
    model = random_model(seed, rank=rank)
    Q, Qp, P = model.Q, model.Q_pinv, model.P
    scale = np.abs(Qp).max() * np.abs(Q).max()
    assert np.allclose(Qp @ Q @ Qp, Qp, atol=1e-8 * np.abs(Qp).max() * scale)
    assert np.allclose(Q @ Qp @ Q, Q, atol=1e-8 * np.abs(Q).max() * scale)
    assert np.allclose(P @ P, P, atol=1e-10) and np.allclose(P, P.T, atol=1e-10)
    assert np.allclose(model.V.T @ model.V, np.eye(model.rank), atol=1e-10)
    assert model.rank == (4 if rank is None else rank)
    if model.full_rank:
        assert np.allclose(Qp @ Q, np.eye(4), atol=1e-8)


def test_rejects_bad_covariance():
    with pytest.raises(ValueError):
        LinearGaussianModel(np.eye(2), [[1.0, 0.5], [0.0, 1.0]])
    with pytest.raises(ValueError):
        LinearGaussianModel(np.eye(2), [[1.0, 0.0], [0.0, -1.0]])
    with pytest.raises(DimensionError):
        LinearGaussianModel(np.eye(2), np.eye(3))


def test_model_arrays_read_only():
    model = random_model(1)
    with pytest.raises(ValueError):
        model.Q[0, 0] = 1.0


# -- statistic, ML, gradient ----------------------------------------------------

def test_statistic_identity_and_scaled():
    x = np.array([1.0, -2.0, 0.5])
    assert np.allclose(sufficient_statistic(LinearGaussianModel(np.eye(3)), x), x)
    assert np.allclose(iid_gaussian(3, 0.5).sufficient_statistic(x), x / 0.25)


def test_statistic_noiseless_equals_q_theta():
    r = SeededRng(53)
    H = r.normal((5, 3))
    theta = r.normal(3)
    model = LinearGaussianModel(H)
    assert np.allclose(model.sufficient_statistic(H @ theta), H.T @ H @ theta, atol=1e-12)


def test_dimension_mismatch():
    with pytest.raises(DimensionError):
        iid_gaussian(3, 1.0).sufficient_statistic(np.ones(4))


def test_ml_identity_and_noiseless_recovery():
    x = np.array([0.3, 1.0])
    assert np.allclose(ml_estimate(LinearGaussianModel(np.eye(2)), x), x)
    model = random_model(7)
    theta = np.array([1.0, -2.0, 0.5, 3.0])
    assert np.allclose(ml_estimate(model, model.H @ theta), theta, atol=1e-8)


def test_ml_rank_one_projects():
    model = LinearGaussianModel([[1.0, 1.0]])
    theta = np.array([2.0, -0.5])
    est = ml_estimate(model, model.H @ theta)
    assert np.allclose(est, model.P @ theta, atol=1e-12)
    assert np.allclose(est, [0.75, 0.75])


def test_grad_log_q_examples():
    g = iid_gaussian(3, 2.0)
    x = np.array([1.0, 2.0, -3.0])
    u = g.sufficient_statistic(x)
    assert np.allclose(grad_log_q(g, u), -4.0 * u)
    assert np.allclose(grad_log_q(g, u), -x)
    assert np.all(grad_log_q(g, np.zeros(3)) == 0)


@given(seeds, arrays(float, 4, elements=finite))
def test_grad_log_q_matches_solve(seed, u):
    model = random_model(seed)
    assert np.allclose(model.grad_log_q(u), -np.linalg.solve(model.Q, u), rtol=1e-8,
                       atol=1e-8 * (1 + np.abs(u).max()) * np.abs(model.Q_pinv).max())


@given(seeds, arrays(float, 4, elements=finite), st.sampled_from([None, 2]))
def test_grad_log_q_pairing_nonnegative(seed, u, rank):
    model = random_model(seed, rank=rank)
    assert u @ -model.grad_log_q(u) >= -1e-10 * (1 + u @ u)


# -- SURE for linear Gaussian models ---------------------------------------------

@given(seeds, arrays(float, 6, elements=finite))
def test_gaussian_sure_zero_and_ml(seed, x):
    model = random_model(seed)
    assert gaussian_sure(model, zero_map(4), x).score == 0.0
    ml = ml_estimate(model, x)
    expected = 2 * np.trace(np.linalg.inv(model.Q)) - ml @ ml
    got = gaussian_sure(model, ml_map(model), x).score
    assert got == pytest.approx(expected, rel=1e-9, abs=1e-9 * (1 + abs(expected)))


@given(seeds, arrays(float, 6, elements=finite), st.sampled_from([None, 2, 3]))
def test_gaussian_sure_agrees_with_generic_form(seed, x, rank):
    model = random_model(seed, rank=rank)
    u = model.sufficient_statistic(x)
    est = blind_minimax_map(model, positive_part=False)
    generic = sure_score if model.full_rank else projected_sure_score
    a = gaussian_sure(model, est, x).score
    b = generic(model.expfam(), est, u).score
    assert a == pytest.approx(b, rel=1e-10, abs=1e-10 * (1 + abs(a)))


def test_sure_minimizing_scale_matches_closed_form():
    model = random_model(21)
    x = model.H @ np.array([1.0, 2.0, -1.0, 0.5]) + SeededRng(3).normal(6)
    ml = ml_estimate(model, x)
    alphas = np.linspace(-0.5, 1.5, 20001)
    scores = [gaussian_sure(model, linear_map(a * model.Q_pinv), x).score for a in alphas]
    best = alphas[int(np.argmin(scores))]
    closed = 1 - model.trace_q_pinv / (ml @ ml)
    assert abs(best - closed) <= alphas[1] - alphas[0]


# -- shrinkage estimators --------------------------------------------------------

@given(arrays(float, 5, elements=finite).filter(lambda v: v @ v > 1e-6), st.floats(0.1, 3))
def test_blind_minimax_reduces_to_stein(x, sigma):
    g = iid_gaussian(5, sigma)
    stein = (1 - 5 * sigma**2 / (x @ x)) * x
    assert np.allclose(blind_minimax(g, x), stein, rtol=1e-10, atol=1e-10 * np.abs(x).max())


def test_blind_minimax_boundary_cases():
    g = iid_gaussian(4, 1.0)
    x = np.full(4, 1.0)  # ||x||^2 = 4 = Tr(Q^+)
    assert np.allclose(blind_minimax(g, x), 0.0)
    small = np.array([0.5, 0.0, 0.0, 0.0])
    assert np.all(blind_minimax(g, small, positive_part=True) == 0.0)
    assert np.all(blind_minimax(g, np.zeros(4)) == 0.0)
    assert np.all(blind_minimax(g, small) < 0.5)


@given(seeds, arrays(float, 6, elements=finite), st.booleans())
def test_blind_minimax_divergence_matches_fd(seed, x, pp):
    model = random_model(seed)
    u = model.sufficient_statistic(x)
    ml = model.ml_from_u(u)
    t = model.trace_q_pinv
    if abs(ml @ ml - t) < 1e-3 * t or ml @ ml < 1e-6:
        return  # kink of the positive part or the origin
    est = blind_minimax_map(model, pp)
    assert est.divergence(u) == pytest.approx(est.with_backend("fd").divergence(u), rel=1e-5, abs=1e-6)


def test_diagonal_shrinkage_examples():
    assert diagonal_shrinkage([3.0], [1.0])[0] == pytest.approx(8 / 3)
    assert diagonal_shrinkage([2.0, -1.5], [4.0, 2.25]).tolist() == [0.0, 0.0]
    assert diagonal_shrinkage([1.7], [0.0])[0] == 1.7
    assert diagonal_shrinkage([0.0], [1.0])[0] == 0.0
    assert diagonal_shrinkage([0.5], [1.0], positive_part=False)[0] == pytest.approx((1 - 4) * 0.5)


@given(st.floats(0.1, 10), st.floats(0.1, 5))
def test_diagonal_shrinkage_minimizes_objective(x, s2):
    # brute-force minimization of the per-coefficient SURE objective
    alphas = np.linspace(-2, 2, 40001)
    obj = alphas**2 * x**2 + 2 * s2 * alphas - 2 * alphas * x**2
    best = alphas[np.argmin(obj)]
    got = diagonal_shrinkage([x], [s2], positive_part=False)[0] / x
    assert abs(got - best) <= 1e-4 or not -2 < got < 2


# -- dominance (short run; the full grid is in the acceptance suite) ---------------

def test_dominance_short_run():
    r = SeededRng(31)
    model = LinearGaussianModel(np.diag(np.linspace(0.8, 1.2, 10)))
    assert model.effective_dimension() > 4
    radius = np.sqrt(model.trace_q_pinv)
    for scale in (0, 1, 5):
        theta = np.zeros(10)
        theta[0] = scale * radius
        res = dominance_check(model, theta, 20000, r.child(scale))
        assert res.bm_dominates and res.pp_improves


def test_trace_ratio_alone_does_not_guarantee_dominance():
    # Tr(Q^-1)^2 / Tr(Q^-2) = 5.5 but Tr(Q^-1) / lambda_max(Q^-1) = 3.1 < 4:
    # blind minimax then loses to ML along the noisiest direction
    r = SeededRng(31)
    H = np.vstack([np.eye(10) + 0.2 * r.normal((10, 10)), 0.3 * r.child(2).normal((4, 10))])
    B = r.child(1).normal((14, 14))
    model = LinearGaussianModel(H, np.eye(14) + 0.05 * B @ B.T)
    w, V = np.linalg.eigh(np.linalg.pinv(model.Q))
    assert model.effective_dimension() > 4 > w.sum() / w[-1]
    res = dominance_check(model, 5 * np.sqrt(w.sum()) * V[:, -1], 10**5, r.child(105))
    assert res.mse_bm > res.mse_ml + 5 * res.se_bm_ml


# -- separable models and matrix files -------------------------------------------

def test_separable_matches_dense():
    r = SeededRng(4)
    Hc, Hr = r.normal((5, 4)), r.normal((3, 3))
    sep = SeparableGaussianModel(Hc, Hr, 0.3)
    dense = sep.dense()
    x = r.normal(15)
    theta = r.normal(12)
    assert np.allclose(sep.sufficient_statistic(x), dense.sufficient_statistic(x))
    u = dense.sufficient_statistic(x)
    assert np.allclose(sep.ml_from_u(u), dense.ml_from_u(u))
    assert np.allclose(sep.apply_H(theta), dense.H @ theta)
    assert np.allclose(sep.from_coords(sep.to_coords(theta)), theta)
    assert sep.rank == dense.rank == 12


def test_matrix_round_trip(tmp_path):
    A = SeededRng(2).normal((3, 5))
    write_matrix(tmp_path / "a.txt", A)
    assert np.array_equal(read_matrix(tmp_path / "a.txt"), A)
    assert (tmp_path / "a.txt").read_text().splitlines()[0] == "3 5"
    (tmp_path / "bad.txt").write_text("2 2\n1 2 3\n")
    with pytest.raises(ValueError):
        read_matrix(tmp_path / "bad.txt")
