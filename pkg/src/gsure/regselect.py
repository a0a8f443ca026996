"""Choosing the regularization parameter of penalized least squares.

The estimate minimizes ``(x - H t)^T C^{-1} (x - H t) + lam * pen(L t)``
with ``pen`` either ``||.||^2`` (Tikhonov, a linear map of ``u``) or
``||.||_1``.  Selectors: SURE (analytic divergence for Tikhonov, Monte-Carlo
for anything else), GCV and the discrepancy principle.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import linalg
from scipy.optimize import minimize_scalar

from .core import _sqnorm, default_mc_step, mc_divergence
from .errors import (
    DegenerateRegularizationError,
    DiscrepancyUnbracketedError,
    GCVDegenerateError,
    NonConvergedError,
    ProbeFailureError,
)
from .gaussian import LinearGaussianModel, SeparableGaussianModel
from .rng import SeededRng
from .sparse import DiffOp2

SOLVE_RTOL = 1e-8


class BoundarySolutionWarning(UserWarning):
    """The selected parameter sits on the edge of the search grid."""


class NonMonotoneResidualWarning(UserWarning):
    pass


@dataclass(frozen=True)
class LambdaGrid:
    """Geometric grid from ``lo`` to ``hi`` with ``per_decade`` points per decade."""

    lo: float
    hi: float
    per_decade: int = 10

    def __post_init__(self):
        if not (0 < self.lo < self.hi):
            raise ValueError("need 0 < lo < hi")
        if self.per_decade < 1:
            raise ValueError("per_decade must be positive")

    def values(self) -> np.ndarray:
        k = int(round(self.per_decade * math.log10(self.hi / self.lo)))
        return np.geomspace(self.lo, self.hi, max(k, 1) + 1)


def _penalty_matrix(L, m):
    if L is None:
        return None
    if isinstance(L, DiffOp2):
        return L.matrix
    L = np.asarray(L, dtype=float)
    if L.ndim != 2 or L.shape[1] != m:
        raise ValueError(f"L must have {m} columns")
    return L


@dataclass
class PenalizedProblem:
    """Model, penalty operator (``None`` = identity), penalty kind and grid.

    Without an explicit grid the squared-l2 default spans
    ``[1e-6, 1e3] * Tr(Q) / Tr(L^T L)``.
    """

    model: LinearGaussianModel | SeparableGaussianModel
    L: object = None
    penalty: str = "squared-l2"
    grid: Optional[LambdaGrid] = None

    def __post_init__(self):
        if self.penalty not in ("squared-l2", "l1"):
            raise ValueError(f"unknown penalty {self.penalty!r}")
        self.Lmat = _penalty_matrix(self.L, self.model.m)
        separable = isinstance(self.model, SeparableGaussianModel)
        if separable and self.Lmat is not None:
            raise ValueError("separable models support only L = I")
        if self.grid is None and self.penalty == "squared-l2":
            scale = self.lambda_scale()
            self.grid = LambdaGrid(1e-6 * scale, 1e3 * scale)
        if self.penalty == "squared-l2":
            self._backend = _SpectralTikhonov(self.model) if separable else _DenseTikhonov(self.model, self.Lmat)
            self._backend.factor(self.grid.lo)

    def lambda_scale(self) -> float:
        """``Tr(Q) / Tr(L^T L)``, where penalty and fit weigh equally."""
        if isinstance(self.model, SeparableGaussianModel):
            trq = float(self.model.s2.sum())
        else:
            trq = float(np.trace(self.model.Q))
        trl = float(self.model.m if self.Lmat is None else np.sum(self.Lmat**2))
        return trq / trl

    @property
    def n(self):
        return self.model.n

    def forward(self, theta):
        if isinstance(self.model, SeparableGaussianModel):
            return self.model.apply_H(theta)
        return self.model.H @ theta

    def projected_sqnorm(self, theta):
        if isinstance(self.model, SeparableGaussianModel):
            c = self.model.to_coords(theta)
            return float(np.sum(c[self.model.mask] ** 2))
        return float(_sqnorm(theta @ self.model.V))


class _DenseTikhonov:
    def __init__(self, model: LinearGaussianModel, L):
        self.model = model
        self.Q = np.asarray(model.Q)
        self.LtL = np.eye(model.m) if L is None else L.T @ L
        self._cache = (None, None)

    def factor(self, lam):
        if self._cache[0] == lam:
            return self._cache[1]
        A = self.Q + lam * self.LtL
        try:
            cf = linalg.cho_factor(A, lower=True)
        except linalg.LinAlgError as exc:
            raise DegenerateRegularizationError(f"Q + lam L^T L is singular at lam={lam:g}") from exc
        self._cache = (lam, (cf, A))
        return cf, A

    def solve_u(self, u, lam):
        cf, A = self.factor(lam)
        theta = linalg.cho_solve(cf, u)
        res = np.linalg.norm(A @ theta - u)
        if res > SOLVE_RTOL * max(np.linalg.norm(u), np.linalg.norm(A, 1) * np.linalg.norm(theta), 1e-300):
            raise DegenerateRegularizationError(f"linear solve residual {res:.3e} too large at lam={lam:g}")
        return theta

    def traces(self, lam):
        """``(Tr(P A^-1), Tr(A^-1 Q))``."""
        cf, _ = self.factor(lam)
        Ainv = linalg.cho_solve(cf, np.eye(self.Q.shape[0]))
        return float(np.sum(self.model.P * Ainv)), float(np.sum(Ainv * self.Q))


class _SpectralTikhonov:
    def __init__(self, model: SeparableGaussianModel):
        self.model = model

    def factor(self, lam):
        if lam <= 0 and not self.model.full_rank:
            raise DegenerateRegularizationError("Q is singular and lam = 0")

    def solve_u(self, u, lam):
        self.factor(lam)
        c = self.model.to_coords(u)
        return self.model.from_coords(c / (self.model.s2 + lam))

    def traces(self, lam):
        d = self.model.s2 + lam
        return float(np.sum(self.model.mask / d)), float(np.sum(self.model.s2 / d))


def _require_l2(prob: PenalizedProblem):
    if prob.penalty != "squared-l2":
        raise ValueError("this operation needs the squared-l2 penalty")


def tikhonov_solve_u(prob: PenalizedProblem, u, lam: float):
    _require_l2(prob)
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    return prob._backend.solve_u(np.asarray(u, dtype=float), lam)


def tikhonov_solve(prob: PenalizedProblem, x, lam: float):
    """``(Q + lam L^T L)^{-1} u`` with ``u = H^T C^{-1} x``."""
    return tikhonov_solve_u(prob, prob.model.sufficient_statistic(x), lam)


def gcv_score(prob: PenalizedProblem, x, lam: float) -> float:
    """Residual energy over the squared trace of the residual operator.

    The denominator is ``n - Tr((Q + lam L^T L)^{-1} Q)``, the trace of the
    influence complement ``I - H (Q + lam L^T L)^{-1} H^T C^{-1}``.
    """
    theta = tikhonov_solve(prob, x, lam)
    r = np.asarray(x, dtype=float) - prob.forward(theta)
    _, tr_infl = prob._backend.traces(lam)
    den = prob.n - tr_infl
    if abs(den) <= 1e-12 * prob.n:
        raise GCVDegenerateError(f"trace of I - influence vanishes at lam={lam:g}")
    return float(r @ r / den**2)


def sure_score_tikhonov(prob: PenalizedProblem, x, lam: float) -> float:
    """``||P t||^2 + 2 Tr(P (Q + lam L^T L)^{-1}) - 2 t^T t_ML``."""
    u = prob.model.sufficient_statistic(x)
    theta = tikhonov_solve_u(prob, u, lam)
    tr_p, _ = prob._backend.traces(lam)
    ml = prob.model.ml_from_u(u)
    return prob.projected_sqnorm(theta) + 2.0 * tr_p - 2.0 * float(theta @ ml)


# ---------------------------------------------------------------------------
# Monte-Carlo SURE for solvers without a closed-form divergence


def _probe_guard(fn):
    calls = [0]

    def apply(v):
        k = calls[0]
        calls[0] += 1
        try:
            return fn(v)
        except NonConvergedError as exc:
            if k == 0:
                raise
            raise ProbeFailureError(f"solver failed on probe {k - 1}", probe=k - 1) from exc

    return apply


def mc_sure_score_nonlinear(prob: PenalizedProblem, x, solver: Callable, lam: float, probes: int = 64,
                            rng: SeededRng | None = None, step: float | None = None) -> float:
    """SURE with a Monte-Carlo divergence of ``u -> solver(u, lam)``.

    Probes come from ``rng.child(0)``, so every ``lam`` sees the same ones.
    """
    rng = rng if rng is not None else SeededRng(0)
    u = prob.model.sufficient_statistic(x)
    step = default_mc_step(u) if step is None else step
    apply = _probe_guard(lambda v: solver(v, lam))
    theta = apply(u)
    div = mc_divergence(lambda v: theta if v is u else apply(v), u, probes, step, rng.child(0), _projector(prob))
    ml = prob.model.ml_from_u(u)
    return prob.projected_sqnorm(theta) + 2.0 * float(div) - 2.0 * float(theta @ ml)


def mc_sure_curve(prob: PenalizedProblem, x, path_solver: Callable, lams, probes: int = 64,
                  rng: SeededRng | None = None, step: float | None = None) -> np.ndarray:
    """:func:`mc_sure_score_nonlinear` at every ``lam`` at once.

    ``path_solver(u, lams)`` returns one solution row per ``lam``; the probes
    match the single-``lam`` version draw for draw.
    """
    rng = rng if rng is not None else SeededRng(0)
    lams = np.asarray(lams, dtype=float)
    u = prob.model.sufficient_statistic(x)
    step = default_mc_step(u) if step is None else step
    base = np.asarray(path_solver(u, lams))
    P = _projector(prob)
    probe_rng = rng.child(0)
    acc = np.zeros(lams.size)
    for k in range(probes):
        b = probe_rng.rademacher(u.shape)
        try:
            pert = np.asarray(path_solver(u + step * b, lams))
        except NonConvergedError as exc:
            raise ProbeFailureError(f"solver failed on probe {k}", probe=k) from exc
        pb = b if P is None else P @ b
        acc += (pert - base) @ pb / step
    div = acc / probes
    ml = prob.model.ml_from_u(u)
    fid = np.array([prob.projected_sqnorm(t) for t in base])
    return fid + 2.0 * div - 2.0 * base @ ml


def _projector(prob):
    if isinstance(prob.model, SeparableGaussianModel):
        if prob.model.full_rank:
            return None
        raise ValueError("Monte-Carlo SURE on rank-deficient separable models is not supported")
    return None if prob.model.full_rank else np.asarray(prob.model.P)


# ---------------------------------------------------------------------------
# selection


@dataclass
class SelectionResult:
    lambda_star: float
    estimate: np.ndarray
    score_curve: list
    selector: str
    boundary: bool = False
    score_star: float = float("nan")
    notes: list = field(default_factory=list)


_SCORES = {"SURE": sure_score_tikhonov, "GCV": gcv_score}


def _golden_refine(f, lams, scores, k):
    """Golden-section search on ``log lam`` inside ``[lams[k-1], lams[k+1]]``."""
    a, b, c = (math.log(v) for v in lams[k - 1:k + 2])
    shift = 1.0 - a  # keep the variable away from 0 so xtol acts as a relative bound
    cache = {}

    def g(t):
        key = float(t)
        if key not in cache:
            cache[key] = f(math.exp(t - shift))
        return cache[key]

    try:
        res = minimize_scalar(g, bracket=(a + shift, b + shift, c + shift), method="golden",
                              options={"xtol": 1e-9})
    except ValueError:
        return lams[k], scores[k]
    lam = math.exp(res.x - shift)
    if not (res.fun <= scores[k]):
        return lams[k], scores[k]
    return lam, float(res.fun)


def select_lambda(prob: PenalizedProblem, x, selector: str = "SURE", score_fn: Callable | None = None,
                  solver: Callable | None = None, curve_fn: Callable | None = None,
                  grid: LambdaGrid | None = None) -> SelectionResult:
    """Grid scan of ``score_fn(prob, x, lam)`` followed by golden-section refinement.

    ``curve_fn(lams)`` may supply all grid scores in one call; ``solver(lam)``
    produces the returned estimate (Tikhonov by default).  A minimum on the
    grid edge is returned as is with ``boundary=True``.
    """
    if score_fn is None:
        try:
            score_fn = _SCORES[selector]
        except KeyError:
            raise ValueError(f"no default score for selector {selector!r}") from None
    grid = grid or prob.grid
    if grid is None:
        raise ValueError("no lambda grid")
    lams = grid.values()
    if curve_fn is not None:
        scores = np.asarray(curve_fn(lams), dtype=float)
    else:
        scores = np.array([score_fn(prob, x, lam) for lam in lams])
    # near-ties count as minimal so a flat curve reports a boundary solution
    smin = float(np.nanmin(scores))
    k = int(np.flatnonzero(scores <= smin + 1e-8 * abs(smin))[0])
    notes = []
    boundary = k == 0 or k == lams.size - 1
    if boundary:
        lam_star, s_star = float(lams[k]), float(scores[k])
        notes.append("boundary-solution")
        warnings.warn(f"{selector}: minimum at grid edge lam={lam_star:.6g}", BoundarySolutionWarning, stacklevel=2)
    else:
        lam_star, s_star = _golden_refine(lambda lam: score_fn(prob, x, lam), lams, scores, k)
    solver = solver or (lambda lam: tikhonov_solve(prob, x, lam))
    return SelectionResult(float(lam_star), solver(lam_star), list(zip(lams.tolist(), scores.tolist())),
                           selector, boundary, float(s_star), notes)


def discrepancy_select(prob: PenalizedProblem, x, solver: Callable, sigma2: float,
                       grid: LambdaGrid | None = None, grid_solver: Callable | None = None,
                       rel_gap: float = 1e-3, max_bisect: int = 200) -> SelectionResult:
    """``lam`` with ``||x - H t(lam)||^2 = n sigma2``, by bisection in ``log lam``.

    Raises :class:`DiscrepancyUnbracketedError` (carrying the closest-endpoint
    result) when the grid residuals never cross the target.
    """
    x = np.asarray(x, dtype=float)
    grid = grid or prob.grid
    lams = grid.values()
    target = prob.n * sigma2

    def resid(theta):
        r = x - prob.forward(theta)
        return float(r @ r)

    thetas = grid_solver(lams) if grid_solver is not None else [solver(lam) for lam in lams]
    res = np.array([resid(t) for t in thetas])
    curve = list(zip(lams.tolist(), res.tolist()))
    notes = []
    if np.any(np.diff(res) < -1e-9 * np.abs(res[1:]).max(initial=1.0)):
        notes.append("non-monotone-residual")
        warnings.warn("residual is not monotone in lambda on the grid", NonMonotoneResidualWarning, stacklevel=2)
    f = res - target
    cross = np.flatnonzero((f[:-1] <= 0) & (f[1:] > 0))
    if cross.size == 0:
        k = int(np.argmin(np.abs(f)))
        result = SelectionResult(float(lams[k]), np.asarray(thetas[k]), curve, "discrepancy", True,
                                 float(res[k]), notes + ["unbracketed"])
        raise DiscrepancyUnbracketedError(
            f"residual never crosses n*sigma^2 = {target:g} on the grid", result=result
        )
    k = int(cross[-1])
    lo, hi = math.log(lams[k]), math.log(lams[k + 1])
    lam_star, r_star = float(lams[k]), float(res[k])
    if abs(res[k + 1] - target) < abs(res[k] - target):
        lam_star, r_star = float(lams[k + 1]), float(res[k + 1])
    for _ in range(max_bisect):
        if abs(r_star - target) <= rel_gap * target:
            break
        mid = 0.5 * (lo + hi)
        r_mid = resid(solver(math.exp(mid)))
        lam_star, r_star = math.exp(mid), r_mid
        if r_mid > target:
            hi = mid
        else:
            lo = mid
        if hi - lo < 1e-14:
            break
    return SelectionResult(lam_star, np.asarray(solver(lam_star)), curve, "discrepancy", False, r_star, notes)


def write_score_curve(results, path) -> None:
    """CSV with header ``lambda,score,selector`` (12 significant digits)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lambda", "score", "selector"])
        for res in results:
            for lam, score in res.score_curve:
                w.writerow([f"{lam:.12g}", f"{score:.12g}", res.selector])
