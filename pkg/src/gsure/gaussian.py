"""Linear Gaussian model ``x = H theta + w``, ``w ~ N(0, C)``.

Here ``u = H^T C^{-1} x``, ``Q = H^T C^{-1} H`` and ``d ln q/du = -Q^+ u``,
which is minus the ML estimate.  Rank deficiency is handled through the
SVD of the whitened operator ``R^{-1} H`` (``C = R R^T``): its leading right
singular vectors span ``range(H^T)`` and diagonalize ``Q``.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import linalg

from .core import EstimatorMap, ExponentialFamilyModel, RiskScore, _rowdot, _sqnorm
from .errors import DimensionError

RANK_EPS = 1e-10


class LinearGaussianModel:
    """Immutable linear Gaussian observation model.

    Parameters
    ----------
    H : (n, m) array_like
    C : (n, n) array_like, optional
        Symmetric positive-definite noise covariance; identity if omitted.
    rank_eps : float
        Singular values of the whitened operator at or below
        ``rank_eps * s_max * max(n, m)`` count as zero.
    """

    def __init__(self, H, C=None, rank_eps: float = RANK_EPS, name: str = "linear-gaussian"):
        H = np.array(H, dtype=float, ndmin=2)
        n, m = H.shape
        if C is None:
            C = np.eye(n)
        C = np.array(C, dtype=float, ndmin=2)
        if C.shape != (n, n):
            raise DimensionError(f"C must be {n}x{n}, got {C.shape}")
        if not np.allclose(C, C.T, rtol=0, atol=1e-12 * (1 + np.abs(C).max())):
            raise ValueError("noise covariance must be symmetric")
        if np.linalg.eigvalsh(C)[0] <= 0:
            raise ValueError("noise covariance must be positive definite")
        self.name = name
        self.H = H
        self.C = C
        self.n, self.m = n, m
        self.chol = linalg.cholesky(C, lower=True)
        self.Hw = linalg.solve_triangular(self.chol, H, lower=True)
        self._CinvH = linalg.cho_solve((self.chol, True), H)
        Uw, s, Vt = np.linalg.svd(self.Hw, full_matrices=False)
        tol = rank_eps * (s[0] if s.size else 0.0) * max(n, m)
        r = int(np.sum(s > tol))
        self.rank_eps = rank_eps
        self.rank = r
        self.singular_values = s[:r]
        self.Uw = Uw[:, :r]
        self.V = Vt[:r].T
        self.P = self.V @ self.V.T
        self.Q = self.Hw.T @ self.Hw
        self.Q_pinv = (self.V / s[:r] ** 2) @ self.V.T
        for arr in (self.H, self.C, self.Q, self.Q_pinv, self.P, self.V):
            arr.setflags(write=False)

    def __repr__(self):
        return f"LinearGaussianModel(n={self.n}, m={self.m}, rank={self.rank})"

    @property
    def full_rank(self) -> bool:
        return self.rank == self.m

    @property
    def trace_q_pinv(self) -> float:
        return float(np.sum(1.0 / self.singular_values**2))

    def effective_dimension(self) -> float:
        """``Tr(Q^+)^2 / Tr(Q^+^2)``."""
        ev = 1.0 / self.singular_values**2
        return float(ev.sum() ** 2 / np.sum(ev**2))

    def _check_x(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n:
            raise DimensionError(f"observation length {x.shape[-1]} != n = {self.n}")
        return x

    def sufficient_statistic(self, x):
        return self._check_x(x) @ self._CinvH

    def ml_from_u(self, u):
        return np.asarray(u, dtype=float) @ self.Q_pinv

    def grad_log_q(self, u):
        return -self.ml_from_u(u)

    def grad_log_q_reduced(self, ured):
        return -np.asarray(ured, dtype=float) / self.singular_values**2

    def whiten(self, x):
        """``R^{-1} x`` for ``C = R R^T`` (batch-aware)."""
        x = self._check_x(x)
        return linalg.solve_triangular(self.chol, x.T, lower=True).T

    def sample(self, theta, rng, size):
        theta = np.asarray(theta, dtype=float)
        z = rng.normal((size, self.n))
        return (self.H @ theta)[None, :] + z @ self.chol.T

    def expfam(self) -> ExponentialFamilyModel:
        """This model in generic exponential-family form."""
        if self.full_rank:
            return ExponentialFamilyModel(
                self.m, self.n, self.sufficient_statistic, self.grad_log_q,
                None, self.sample, self.name,
            )
        return ExponentialFamilyModel(
            self.m, self.n, self.sufficient_statistic, self.grad_log_q_reduced,
            self.V, self.sample, self.name,
        )


class SeparableGaussianModel:
    """``H = H_col kron H_row`` acting on row-major images, ``C = sigma^2 I``.

    Works in the product singular basis of the two factors so that every
    quantity the Tikhonov selectors need is diagonal; nothing of size
    ``n x n`` is ever formed.  Vectors are flat row-major images.
    """

    def __init__(self, H_col, H_row, sigma: float, rank_eps: float = RANK_EPS):
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        self.H_col = np.asarray(H_col, dtype=float)
        self.H_row = np.asarray(H_row, dtype=float)
        self.sigma = float(sigma)
        self.rank_eps = rank_eps
        self.height, self.width = self.H_col.shape[1], self.H_row.shape[1]
        self.n = self.H_col.shape[0] * self.H_row.shape[0]
        self.m = self.height * self.width
        U1, s1, V1t = np.linalg.svd(self.H_col)
        U2, s2, V2t = np.linalg.svd(self.H_row)
        self._U1, self._V1, self._U2, self._V2 = U1, V1t.T, U2, V2t.T
        s = np.outer(s1, s2).reshape(-1) / self.sigma
        tol = rank_eps * s.max() * max(self.n, self.m)
        self.mask = s > tol
        self.rank = int(self.mask.sum())
        self.s = np.where(self.mask, s, 0.0)
        self.s2 = self.s**2

    @property
    def full_rank(self) -> bool:
        return self.rank == self.m

    def _img(self, v, rows):
        return np.asarray(v, dtype=float).reshape(rows, -1)

    def to_coords(self, v):
        """Coefficients of ``v`` in the right singular basis."""
        return (self._V1.T @ self._img(v, self.height) @ self._V2).reshape(-1)

    def from_coords(self, c):
        return (self._V1 @ self._img(c, self.height) @ self._V2.T).reshape(-1)

    def data_coords(self, x):
        """Coefficients of whitened data in the left singular basis."""
        X = self._img(x, self.H_col.shape[0]) / self.sigma
        return (self._U1.T @ X @ self._U2).reshape(-1)

    def apply_H(self, theta):
        T = self._img(theta, self.height)
        return (self.H_col @ T @ self.H_row.T).reshape(-1)

    def sufficient_statistic(self, x):
        X = self._img(x, self.H_col.shape[0])
        return (self.H_col.T @ X @ self.H_row).reshape(-1) / self.sigma**2

    def ml_from_u(self, u):
        c = self.to_coords(u)
        return self.from_coords(np.where(self.mask, c / np.where(self.mask, self.s2, 1.0), 0.0))

    def dense(self) -> LinearGaussianModel:
        """Explicit :class:`LinearGaussianModel` (small images only)."""
        H = np.kron(self.H_col, self.H_row)
        return LinearGaussianModel(H, self.sigma**2 * np.eye(self.n), self.rank_eps, name="separable-dense")


def iid_gaussian(m: int, sigma: float) -> LinearGaussianModel:
    """``H = I``, ``C = sigma^2 I``; here ``u = x / sigma^2``."""
    return LinearGaussianModel(np.eye(m), sigma**2 * np.eye(m), name=f"iid-gaussian(m={m}, sigma={sigma:g})")


def sufficient_statistic(model: LinearGaussianModel, x):
    return model.sufficient_statistic(x)


def ml_estimate(model: LinearGaussianModel, x):
    """``(H^T C^{-1} H)^+ H^T C^{-1} x``."""
    return model.ml_from_u(model.sufficient_statistic(x))


def grad_log_q(model: LinearGaussianModel, u):
    return model.grad_log_q(u)


def gaussian_sure(model: LinearGaussianModel, est: EstimatorMap, x) -> RiskScore:
    """SURE for ``E||P h(u) - P theta||^2`` minus ``||P theta||^2``.

    ``||P h||^2 + 2 (Tr(P dh/du) - h^T theta_ML)`` with ``P`` the orthogonal
    projection onto ``range(H^T)``.
    """
    u = model.sufficient_statistic(x)
    h = np.asarray(est.apply(u), dtype=float)
    ml = model.ml_from_u(u)
    P = model.P
    div = est.divergence(u) if model.full_rank else est.projected_divergence(u, P)
    div = np.asarray(div, dtype=float)
    return RiskScore.build(_sqnorm(h @ P), div, -2.0 * _rowdot(h, ml))


# ---------------------------------------------------------------------------
# closed-form shrinkage estimators


def _shrink_factor(ml, trace, positive_part):
    nrm2 = _sqnorm(ml)
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = np.where(nrm2 > 0, 1.0 - trace / np.where(nrm2 > 0, nrm2, 1.0), 0.0)
    if positive_part:
        alpha = np.maximum(alpha, 0.0)
    return alpha, nrm2


def blind_minimax(model: LinearGaussianModel, x, positive_part: bool = False):
    """Scaled ML estimate with SURE-optimal scale ``1 - Tr(Q^+)/||theta_ML||^2``.

    On ``H = I``, ``C = sigma^2 I`` this is Stein's estimate; with
    ``positive_part`` the scale is clamped at zero.  ``theta_ML = 0`` maps to
    the zero vector.
    """
    ml = ml_estimate(model, x)
    alpha, _ = _shrink_factor(ml, model.trace_q_pinv, positive_part)
    return alpha[..., None] * ml


def blind_minimax_map(model: LinearGaussianModel, positive_part: bool = False) -> EstimatorMap:
    """:func:`blind_minimax` as a map of ``u`` with its exact divergence."""
    B = model.Q_pinv
    T = model.trace_q_pinv

    def apply(u):
        ml = np.asarray(u, dtype=float) @ B
        alpha, _ = _shrink_factor(ml, T, positive_part)
        return alpha[..., None] * ml

    def div(u, P=None):
        # Tr(J) = T - T^2/|m|^2 + 2 T m^T B m / |m|^4; P J has the same trace
        # because B and m live in range(P).
        ml = np.asarray(u, dtype=float) @ B
        alpha, nrm2 = _shrink_factor(ml, T, positive_part)
        safe = np.where(nrm2 > 0, nrm2, 1.0)
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            full = T - T**2 / safe + 2.0 * T * _rowdot(ml @ B, ml) / safe**2
        active = (alpha > 0) if positive_part else (nrm2 > 0)
        return np.where(active, full, 0.0)

    tag = "positive-part " if positive_part else ""
    return EstimatorMap(apply, div, div, name=f"{tag}blind-minimax")


def ml_map(model: LinearGaussianModel) -> EstimatorMap:
    B = model.Q_pinv
    tr = model.trace_q_pinv
    return EstimatorMap(
        apply=lambda u: np.asarray(u, dtype=float) @ B,
        divergence_fn=lambda u: np.full(np.shape(u)[:-1], tr),
        projected_divergence_fn=lambda u, P: np.full(np.shape(u)[:-1], float(np.sum(np.asarray(P) * B))),
        name="ml",
    )


def soft_threshold_map(sigma: float, t: float) -> EstimatorMap:
    """Soft thresholding of ``x = sigma^2 u`` for the iid Gaussian model.

    The divergence in ``u`` is ``sigma^2`` times the number of entries with
    ``|x_i| > t``; the kink set counts as inactive.
    """
    s2 = sigma**2

    def apply(u):
        x = s2 * np.asarray(u, dtype=float)
        return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)

    def div(u, P=None):
        x = s2 * np.asarray(u, dtype=float)
        act = (np.abs(x) > t).astype(float)
        if P is None:
            return s2 * act.sum(axis=-1)
        return s2 * act @ np.diag(P)

    return EstimatorMap(apply, div, div, name=f"soft-threshold(t={t:g})")


def diagonal_shrinkage(x, variances, positive_part: bool = True):
    """Componentwise SURE shrinkage ``[1 - s_i^2 / x_i^2] x_i``.

    Zero observations stay zero; a zero variance leaves the component as is.
    """
    x = np.asarray(x, dtype=float)
    v = np.broadcast_to(np.asarray(variances, dtype=float), x.shape)
    x2 = x * x
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = np.where(x2 > 0, 1.0 - v / np.where(x2 > 0, x2, 1.0), 0.0)
    if positive_part:
        alpha = np.maximum(alpha, 0.0)
    return alpha * x


# ---------------------------------------------------------------------------
# plain-text matrices: first line "rows cols", then row-major values


def read_matrix(path) -> np.ndarray:
    tokens = Path(path).read_text().split()
    if len(tokens) < 2:
        raise ValueError(f"{path}: missing 'rows cols' header")
    rows, cols = int(tokens[0]), int(tokens[1])
    vals = tokens[2:]
    if len(vals) != rows * cols:
        raise ValueError(f"{path}: expected {rows * cols} values, found {len(vals)}")
    return np.array([float(v) for v in vals]).reshape(rows, cols)


def write_matrix(path, A) -> None:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    lines = [f"{A.shape[0]} {A.shape[1]}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in A]
    Path(path).write_text("\n".join(lines) + "\n")
