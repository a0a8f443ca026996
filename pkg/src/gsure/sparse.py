"""l1-penalized least squares ``(x - H t)^T C^{-1} (x - H t) + lam ||L t||_1``.

The penalty operator must have full row rank.  Writing ``t = K z + N a``
with ``K = L^+`` and ``N`` an orthonormal basis of ``null(L)`` turns the
problem into a lasso in ``z = L t`` with an unpenalized block ``a``; the
block is eliminated by projecting onto the orthogonal complement of
``range(H_w N)`` (``H_w`` the whitened operator).  The lasso is solved by
the exact homotopy (LARS-lasso) path from ``lam = inf`` down to the target,
then polished at each target by a feature-sign search until the KKT
conditions hold.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import linalg
from scipy.optimize import lsq_linear

from .errors import DegenerateRegularizationError, NonConvergedError
from .gaussian import LinearGaussianModel


@dataclass(frozen=True)
class DiffOp2:
    """Second-difference operator, ``(m - 2) x m`` with rows ``(1, -2, 1)``."""

    size: int

    def __post_init__(self):
        if self.size < 3:
            raise ValueError("second differences need at least 3 points")

    @cached_property
    def matrix(self) -> np.ndarray:
        m = self.size
        D = np.zeros((m - 2, m))
        i = np.arange(m - 2)
        D[i, i] = 1.0
        D[i, i + 1] = -2.0
        D[i, i + 2] = 1.0
        D.setflags(write=False)
        return D

    def __matmul__(self, v):
        return self.matrix @ v


def _as_matrix(L) -> np.ndarray:
    return L.matrix if isinstance(L, DiffOp2) else np.asarray(L, dtype=float)


@dataclass(frozen=True)
class SolverSettings:
    """``max_iters`` bounds homotopy steps plus refinement sweeps."""

    max_iters: int = 5000
    rel_tol: float = 1e-7
    zero_tol: float = 1e-9

    def __post_init__(self):
        if self.rel_tol <= 0:
            raise ValueError("rel_tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")


class L1Reduction:
    """Precomputed lasso reduction for a fixed model and penalty operator."""

    def __init__(self, model: LinearGaussianModel, L):
        Lm = _as_matrix(L)
        if Lm.shape[1] != model.m:
            raise ValueError("penalty operator has the wrong number of columns")
        self.model = model
        self.L = Lm
        p, m = Lm.shape
        self.K = np.linalg.pinv(Lm)
        if np.max(np.abs(Lm @ self.K - np.eye(p))) > 1e-8:
            raise ValueError("penalty operator must have full row rank")
        self.N = linalg.null_space(Lm)
        A = model.Hw
        self.B1 = A @ self.K
        B0 = A @ self.N
        if self.N.shape[1]:
            W, R0 = np.linalg.qr(B0)
            sv = np.linalg.svd(B0, compute_uv=False)
            if sv[-1] <= 1e-12 * max(sv[0], 1e-300):
                raise DegenerateRegularizationError("forward operator annihilates part of null(L); the problem has no unique solution")
        else:
            W = np.zeros((A.shape[0], 0))
            R0 = np.zeros((0, 0))
        self.W, self.R0 = W, R0
        self.M = self.B1 - W @ (W.T @ self.B1)
        # x_w for a sufficient statistic: (H_w^T)^+ u restricted to the model rank
        self._u_to_xw = (model.Uw / model.singular_values) @ model.V.T

    def reduce(self, xw):
        ytil = xw - self.W @ (self.W.T @ xw)
        return ytil

    def lift(self, z, xw):
        theta = self.K @ z
        if self.N.shape[1]:
            a = linalg.solve_triangular(self.R0, self.W.T @ (xw - self.B1 @ z))
            theta = theta + self.N @ a
        return theta

    def xw_from_u(self, u):
        return np.asarray(u, dtype=float) @ self._u_to_xw.T

    def lambda_zero(self, xw) -> float:
        """Smallest ``lam`` at which ``L t = 0`` (all second differences vanish)."""
        c = self.M.T @ self.reduce(xw)
        return 2.0 * float(np.max(np.abs(c))) if c.size else 0.0


class _Lasso:
    """Homotopy for ``0.5 ||M z - y||^2 + g ||z||_1``."""

    def __init__(self, M, y, settings: SolverSettings, log=None):
        self.M, self.y, self.s = M, y, settings
        self.log = log
        self.steps = 0

    def _direction(self, A, signs):
        R = np.linalg.qr(self.M[:, A], mode="r")
        w = linalg.solve_triangular(R, signs, trans="T")
        return linalg.solve_triangular(R, w)

    def _exact(self, A, signs, g):
        MA = self.M[:, A]
        Qa, R = np.linalg.qr(MA)
        rhs = linalg.solve_triangular(R, g * signs, trans="T")
        return linalg.solve_triangular(R, Qa.T @ self.y - rhs)

    def _start(self):
        M, y = self.M, self.y
        p = M.shape[1]
        self.z = np.zeros(p)
        self.c = M.T @ y
        self.g_cur = float(np.max(np.abs(self.c))) if p else 0.0
        self.tiny = 1e-14 * max(self.g_cur, 1.0)
        self.active, self.signs = [], []
        if p:
            j = int(np.argmax(np.abs(self.c)))
            self.active, self.signs = [j], [np.sign(self.c[j])]

    def advance(self, g):
        """Follow the path from the current state down to ``g``; returns the raw iterate."""
        if not hasattr(self, "z"):
            self._start()
        M, y = self.M, self.y
        p = M.shape[1]
        if p == 0 or g >= self.g_cur:
            return self.z.copy()
        z, c = self.z, self.c
        active, signs = self.active, self.signs
        tiny = self.tiny
        while True:
            if self.steps >= self.s.max_iters:
                raise NonConvergedError("homotopy step budget exhausted", residual=self.violation(z, g))
            self.steps += 1
            A = np.array(active)
            try:
                d = self._direction(A, np.array(signs))
            except (np.linalg.LinAlgError, ValueError):
                break
            a = M.T @ (M[:, A] @ d)
            inactive = np.ones(p, bool)
            inactive[A] = False
            best, kind, idx = self.g_cur - g, "target", -1
            with np.errstate(divide="ignore", invalid="ignore"):
                cand1 = (self.g_cur - c) / (1.0 - a)
                cand2 = (self.g_cur + c) / (1.0 + a)
            for cand in (cand1, cand2):
                cand = np.where(inactive & (cand > tiny), cand, np.inf)
                k = int(np.argmin(cand))
                if cand[k] < best:
                    best, kind, idx = float(cand[k]), "enter", k
            with np.errstate(divide="ignore", invalid="ignore"):
                leave = -z[A] / d
            sA = np.array(signs)
            # roundoff can push a coefficient just past zero; drop it at once
            wrong = (z[A] * sA <= 0) & (d * sA < 0)
            leave = np.where(wrong, 0.0, np.where(leave > tiny, leave, np.inf))
            if leave.size:
                k = int(np.argmin(leave))
                if leave[k] < best:
                    best, kind, idx = float(leave[k]), "leave", k
            z[A] += best * d
            self.g_cur -= best
            c[:] = M.T @ (y - M @ z)
            if self.log is not None:
                self.log(z)
            if kind == "target":
                break
            if kind == "leave":
                z[A[idx]] = 0.0
                del active[idx]
                del signs[idx]
                if not active:
                    j = int(np.argmax(np.abs(c)))
                    active.append(j)
                    signs.append(np.sign(c[j]))
            else:
                active.append(idx)
                signs.append(np.sign(c[idx]))
        return z.copy()

    def solve(self, g):
        return self.refine(self.advance(g), g)

    def checkpoint(self):
        return (self.z.copy(), self.c.copy(), self.g_cur, list(self.active), list(self.signs))

    def restore(self, cp):
        z, c, self.g_cur, active, signs = cp
        self.z, self.c = z.copy(), c.copy()
        self.active, self.signs = list(active), list(signs)
        self.tiny = 1e-14 * max(float(np.max(np.abs(self.M.T @ self.y), initial=0.0)), 1.0)

    def path(self, gammas):
        """Solutions at each of ``gammas`` (any order), one homotopy sweep."""
        gammas = np.asarray(gammas, dtype=float)
        out = np.empty((gammas.size, self.M.shape[1]))
        for k in np.argsort(-gammas, kind="stable"):
            out[k] = self.solve(gammas[k])
        return out

    def violation(self, z, g) -> float:
        """Largest lasso KKT violation at ``z``, relative to ``1 + g``."""
        c = self.M.T @ (self.y - self.M @ z)
        nz = z != 0
        dev = np.abs(c[nz] - g * np.sign(z[nz])).max(initial=0.0)
        off = (np.abs(c[~nz]) - g).max(initial=0.0)
        return float(max(dev, off) / (1.0 + g))

    def _objective(self, z, g):
        r = self.M @ z - self.y
        return 0.5 * float(r @ r) + g * float(np.sum(np.abs(z)))

    def refine(self, z, g):
        """Feature-sign search at fixed ``g``, started from ``z``.

        Each sweep solves the sign-constrained quadratic on the current
        support and line-searches toward it through the sign-change points,
        so the objective never increases.
        """
        M, y = self.M, self.y
        z = z.copy()
        z[np.abs(z) <= self.s.zero_tol * (1.0 + np.max(np.abs(z), initial=0.0))] = 0.0
        tol = self.s.rel_tol * (1.0 + g)
        f = self._objective(z, g)
        worst = np.inf
        for _ in range(self.s.max_iters):
            self.steps += 1
            c = M.T @ (y - M @ z)
            nz = z != 0
            dev = np.abs(c[nz] - g * np.sign(z[nz]))
            off = np.where(nz, -np.inf, np.abs(c) - g)
            worst = max(dev.max(initial=0.0), off.max(initial=0.0))
            if worst <= tol:
                break
            signs = np.sign(z)
            if dev.max(initial=0.0) <= tol:
                j = int(np.argmax(off))
                signs[j] = np.sign(c[j])
                nz[j] = True
            A = np.flatnonzero(nz)
            try:
                target = self._exact(A, signs[A], g)
            except (np.linalg.LinAlgError, ValueError):
                target = np.linalg.lstsq(M[:, A], y, rcond=None)[0]
            if not np.all(np.isfinite(target)):
                break
            zA = z[A]
            ts = [1.0]
            cross = (zA != 0) & (zA * target < 0)
            ts += list(zA[cross] / (zA[cross] - target[cross]))
            best_f, best_z = f, None
            for t in sorted(ts):
                cand = z.copy()
                cand[A] = zA + t * (target - zA)
                if t < 1.0:
                    hit = np.argmin(np.abs(cand[A]) + np.where(cross, 0.0, np.inf))
                    cand[A[hit]] = 0.0
                fc = self._objective(cand, g)
                if fc < best_f:
                    best_f, best_z = fc, cand
            if best_z is None:
                break
            z, f = best_z, best_f
        if self.log is not None:
            self.log(z)
        self.last_violation = worst
        return z


_REDUCTIONS: dict = {}


def reduction_for(model: LinearGaussianModel, L) -> L1Reduction:
    """Cached :class:`L1Reduction` (keyed by model identity and a ``DiffOp2``)."""
    if not isinstance(L, DiffOp2):
        return L1Reduction(model, L)
    key = (id(model), L)
    hit = _REDUCTIONS.get(key)
    if hit is None or hit.model is not model:
        if len(_REDUCTIONS) > 32:
            _REDUCTIONS.clear()
        hit = L1Reduction(model, L)
        _REDUCTIONS[key] = hit
    return hit


def _solve_xw(red: L1Reduction, xw, lam, settings, log_rows=None, x=None):
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    settings = settings or SolverSettings()
    ytil = red.reduce(xw)
    logger = None
    if log_rows is not None:
        def logger(z):
            theta = red.lift(z, xw)
            log_rows.append(
                (len(log_rows), objective_value(red.model, red.L, x, lam, theta),
                 kkt_residual(red.model, red.L, x, lam, theta, settings.zero_tol))
            )
    z = _Lasso(red.M, ytil, settings, logger).solve(lam / 2.0)
    theta = red.lift(z, xw)
    return theta


def solve_l1_pen(model: LinearGaussianModel, L, x, lam: float, settings: SolverSettings | None = None,
                 log: list | None = None) -> np.ndarray:
    """Minimizer of ``(x - H t)^T C^{-1} (x - H t) + lam ||L t||_1``.

    Parameters
    ----------
    log : list, optional
        Receives ``(iter, objective, kkt_residual)`` tuples, one per
        homotopy step or refinement sweep.

    Raises
    ------
    NonConvergedError
        If the step budget runs out or the KKT residual of the result
        exceeds ``settings.rel_tol``; in the latter case
        ``details["theta"]`` holds the final iterate.
    """
    settings = settings or SolverSettings()
    red = reduction_for(model, L)
    theta = _solve_xw(red, model.whiten(x), lam, settings, log, x)
    res = kkt_residual(model, L, x, lam, theta, settings.zero_tol)
    if res > settings.rel_tol:
        raise NonConvergedError(f"KKT residual {res:.3e} above tolerance", residual=res, theta=theta)
    return theta


def solve_l1_pen_u(model: LinearGaussianModel, L, u, lam: float, settings: SolverSettings | None = None) -> np.ndarray:
    """Same minimizer, driven by the sufficient statistic ``u = H^T C^{-1} x``.

    The objective depends on ``x`` only through ``u`` (up to a constant), so
    this is the map whose divergence enters SURE.
    """
    red = reduction_for(model, L)
    return _solve_xw(red, red.xw_from_u(u), lam, settings)


def _path_xw(red, xw, lams, settings):
    lams = np.asarray(lams, dtype=float)
    if np.any(lams < 0):
        raise ValueError("lambda must be nonnegative")
    z = _Lasso(red.M, red.reduce(xw), settings or SolverSettings()).path(lams / 2.0)
    return np.array([red.lift(zk, xw) for zk in z]).reshape(lams.size, -1)


def solve_l1_path(model: LinearGaussianModel, L, x, lams, settings: SolverSettings | None = None) -> np.ndarray:
    """Solutions for every ``lam`` in ``lams`` from a single homotopy sweep.

    Each row is refined at its own ``lam`` exactly as :func:`solve_l1_pen`
    would, so the continuation changes nothing beyond ``rel_tol``.
    """
    red = reduction_for(model, L)
    return _path_xw(red, model.whiten(x), lams, settings)


def solve_l1_path_u(model: LinearGaussianModel, L, u, lams, settings: SolverSettings | None = None) -> np.ndarray:
    red = reduction_for(model, L)
    return _path_xw(red, red.xw_from_u(u), lams, settings)


class L1PathSolver:
    """Repeated solves for a fixed model and penalty, driven by ``u``.

    :meth:`path` remembers the raw homotopy state at every requested
    ``lam`` (for the most recent ``max_inputs`` inputs); :meth:`solve` then
    resumes from the nearest remembered state above the target instead of
    starting over at ``lam = inf``.  The trajectory followed is the one a
    fresh solve would follow.
    """

    def __init__(self, model: LinearGaussianModel, L, settings: SolverSettings | None = None, max_inputs: int = 512):
        self.red = reduction_for(model, L)
        self.settings = settings or SolverSettings()
        self.max_inputs = max_inputs
        self._marks: dict = {}

    def _key(self, u):
        return np.ascontiguousarray(u, dtype=float).tobytes()

    def path(self, u, lams) -> np.ndarray:
        lams = np.asarray(lams, dtype=float)
        if np.any(lams < 0):
            raise ValueError("lambda must be nonnegative")
        xw = self.red.xw_from_u(u)
        las = _Lasso(self.red.M, self.red.reduce(xw), self.settings)
        out = np.empty((lams.size, self.red.L.shape[1]))
        marks = []
        for k in np.argsort(-lams, kind="stable"):
            g = lams[k] / 2.0
            raw = las.advance(g)
            marks.append((g, las.checkpoint()))
            out[k] = self.red.lift(las.refine(raw, g), xw)
        if len(self._marks) >= self.max_inputs:
            self._marks.pop(next(iter(self._marks)))
        self._marks[self._key(u)] = marks
        return out

    def solve(self, u, lam: float) -> np.ndarray:
        if lam < 0:
            raise ValueError("lambda must be nonnegative")
        g = lam / 2.0
        xw = self.red.xw_from_u(u)
        las = _Lasso(self.red.M, self.red.reduce(xw), self.settings)
        above = [cp for gk, cp in self._marks.get(self._key(u), []) if gk >= g]
        if above:
            las.restore(above[-1])
        return self.red.lift(las.solve(g), xw)


def l1_jacobian_trace(model: LinearGaussianModel, L, u, lam: float, P=None, settings=None) -> float:
    """Exact ``Tr(P d t/du)`` on the active set of the solution at ``u``.

    The solution is piecewise affine in ``u``; away from breakpoints its
    Jacobian is ``K_A G^{-1} M_A^T T + N R0^{-1} W^T (T - B1_A G^{-1} M_A^T T)``
    with ``T`` the map from ``u`` to whitened data.  Used to cross-check the
    Monte-Carlo divergence.
    """
    settings = settings or SolverSettings()
    red = reduction_for(model, L)
    xw = red.xw_from_u(u)
    z = _Lasso(red.M, red.reduce(xw), settings).solve(lam / 2.0)
    A = np.flatnonzero(np.abs(z) > settings.zero_tol * (1.0 + np.max(np.abs(z), initial=0.0)))
    T = red._u_to_xw
    MA = red.M[:, A]
    dz = np.linalg.lstsq(MA, T - red.W @ (red.W.T @ T), rcond=None)[0] if A.size else np.zeros((0, T.shape[1]))
    J = red.K[:, A] @ dz
    if red.N.shape[1]:
        da = linalg.solve_triangular(red.R0, red.W.T @ (T - red.B1[:, A] @ dz))
        J = J + red.N @ da
    P = model.P if P is None else P
    return float(np.sum(P * J.T))


def objective_value(model: LinearGaussianModel, L, x, lam, theta) -> float:
    """``(x - H t)^T C^{-1} (x - H t) + lam ||L t||_1`` evaluated directly."""
    r = model.whiten(np.asarray(x, dtype=float) - model.H @ theta)
    return float(r @ r + lam * np.sum(np.abs(_as_matrix(L) @ theta)))


def kkt_residual(model: LinearGaussianModel, L, x, lam, theta, zero_tol: float = 1e-9) -> float:
    """Distance from ``-grad(smooth)`` to ``lam L^T d||L t||_1``, relative to ``1 + ||grad||``.

    Entries of ``L t`` within ``zero_tol * (1 + ||t||_inf)`` of zero are
    treated as kinks whose subgradient may be anywhere in ``[-1, 1]``.
    """
    Lm = _as_matrix(L)
    theta = np.asarray(theta, dtype=float)
    u = model.sufficient_statistic(x)
    grad = 2.0 * (model.Q @ theta - u)
    v = Lm @ theta
    kink = np.abs(v) <= zero_tol * (1.0 + np.max(np.abs(theta)))
    base = grad + lam * Lm[~kink].T @ np.sign(v[~kink])
    if lam > 0 and kink.any():
        Af = lam * Lm[kink].T
        sol = lsq_linear(Af, -base, bounds=(-1.0, 1.0), method="bvls", tol=1e-14)
        resid = base + Af @ sol.x
    else:
        resid = base
    return float(np.linalg.norm(resid) / (1.0 + np.linalg.norm(grad)))


def write_iterate_log(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "objective", "kkt_residual"])
        for it, obj, res in rows:
            w.writerow([it, f"{obj:.12g}", f"{res:.12g}"])
