"""Periodic orthonormal Daubechies wavelet transform."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import comb

import numpy as np

from .errors import WaveletLengthError


@lru_cache(maxsize=None)
def daubechies_filter(moments: int) -> np.ndarray:
    """Extremal-phase scaling filter with ``moments`` vanishing moments.

    Length ``2 * moments``, sum ``sqrt(2)``.  Built by spectral
    factorization of the half-band polynomial, keeping its zeros inside the
    unit circle together with ``moments`` zeros at ``z = -1``.
    """
    p = int(moments)
    if p < 1:
        raise ValueError("need at least one vanishing moment")
    # P(y) = sum_k C(p-1+k, k) y^k with y = sin^2(w/2); each root y_k maps to
    # a reciprocal pair z + 1/z = 2 - 4 y_k, of which the inner one is kept
    coeffs = [comb(p - 1 + k, k) for k in range(p)]
    ys = np.roots(coeffs[::-1]) if p > 1 else np.array([])
    b = 1.0 - 2.0 * ys.astype(complex)
    z1 = b + np.sqrt(b * b - 1.0)
    inside = np.where(np.abs(z1) < 1, z1, 1.0 / z1)
    h = np.array([1.0 + 0j])
    for r in inside:
        h = np.convolve(h, [1.0, -r])
    for _ in range(p):
        h = np.convolve(h, [1.0, 1.0])
    h = np.real(h)
    h = h * (np.sqrt(2.0) / h.sum())
    # order taps so the large ones lead, the usual tabulated orientation
    if abs(h[0]) < abs(h[-1]):
        h = h[::-1]
    return h


FILTERS = {"db4": 4, "db8": 8}


@dataclass(frozen=True)
class WaveletBasis:
    """``filter`` names the number of vanishing moments (``"db4"`` has 8 taps)."""

    filter: str = "db4"
    levels: int = 5

    def __post_init__(self):
        if self.filter not in FILTERS:
            raise ValueError(f"unknown filter {self.filter!r}; choose from {sorted(FILTERS)}")
        if self.levels < 1:
            raise ValueError("levels must be positive")

    @property
    def lowpass(self) -> np.ndarray:
        return daubechies_filter(FILTERS[self.filter])

    @property
    def highpass(self) -> np.ndarray:
        h = self.lowpass
        return ((-1.0) ** np.arange(h.size)) * h[::-1]


@dataclass
class WaveletCoeffs:
    approx: np.ndarray
    details: list  # finest level first
    n: int

    def flat(self) -> np.ndarray:
        return np.concatenate([self.approx] + self.details[::-1])

    def copy(self) -> "WaveletCoeffs":
        return WaveletCoeffs(self.approx.copy(), [d.copy() for d in self.details], self.n)


def _index(n, taps):
    return (2 * np.arange(n // 2)[:, None] + np.arange(taps)[None, :]) % n


def _check_length(n, levels):
    if n < 1 or n & (n - 1):
        raise WaveletLengthError(f"signal length {n} is not a power of two", length=n)
    if n < 2**levels:
        raise WaveletLengthError(f"signal length {n} too short for {levels} levels", length=n)


def dwt(x, basis: WaveletBasis = WaveletBasis()) -> WaveletCoeffs:
    x = np.asarray(x, dtype=float)
    _check_length(x.size, basis.levels)
    h, g = basis.lowpass, basis.highpass
    a = x
    details = []
    for _ in range(basis.levels):
        seg = a[_index(a.size, h.size)]
        details.append(seg @ g)
        a = seg @ h
    return WaveletCoeffs(a, details, x.size)


def idwt(coeffs: WaveletCoeffs, basis: WaveletBasis = WaveletBasis()) -> np.ndarray:
    h, g = basis.lowpass, basis.highpass
    a = np.asarray(coeffs.approx, dtype=float)
    for d in reversed(coeffs.details):
        n = 2 * a.size
        out = np.zeros(n)
        np.add.at(out, _index(n, h.size), a[:, None] * h + np.asarray(d)[:, None] * g)
        a = out
    return a
