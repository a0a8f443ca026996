"""Test problems: Donoho-Johnstone signals, the heat-kernel deconvolution,
Gaussian blur on periodic images, seeded noise and PGM I/O."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import circulant

from .errors import ImageFormatError, UnknownProblemError
from .rng import SeededRng

DJ_SIGNALS = ("Blocks", "Bumps", "HeaviSine", "Doppler")

_KNOTS = np.array([0.10, 0.13, 0.15, 0.23, 0.25, 0.40, 0.44, 0.65, 0.76, 0.78, 0.81])
_BLOCK_H = np.array([4.0, -5.0, 3.0, -4.0, 5.0, -4.2, 2.1, 4.3, -3.1, 2.1, -4.2])
_BUMP_H = np.array([4.0, 5.0, 3.0, 4.0, 5.0, 4.2, 2.1, 4.3, 3.1, 5.1, 4.2])
_BUMP_W = np.array([0.005, 0.005, 0.006, 0.01, 0.01, 0.03, 0.01, 0.01, 0.005, 0.008, 0.005])
DJ_SD = 7.0


def dj_raw(name: str, t) -> np.ndarray:
    """Unscaled test function evaluated at ``t``."""
    t = np.asarray(t, dtype=float)
    if name == "Blocks":
        # right-continuous steps, so a knot on the grid is a single jump
        return ((t[:, None] - _KNOTS) >= 0).astype(float) @ _BLOCK_H
    if name == "Bumps":
        return (1.0 + np.abs((t[:, None] - _KNOTS) / _BUMP_W)) ** -4 @ _BUMP_H
    if name == "HeaviSine":
        return 4.0 * np.sin(4 * np.pi * t) - np.sign(t - 0.3) - np.sign(0.72 - t)
    if name == "Doppler":
        return np.sqrt(t * (1 - t)) * np.sin(2 * np.pi * 1.05 / (t + 0.05))
    raise UnknownProblemError(name)


def dj_signal(name: str, n: int = 2048) -> np.ndarray:
    """Signal sampled at ``t_i = i/n`` and scaled to sample SD 7."""
    if n < 2 or n & (n - 1):
        raise ValueError(f"n must be a power of two, got {n}")
    f = dj_raw(name, np.arange(n) / n)
    return f * (DJ_SD / np.std(f, ddof=1))


@dataclass
class TestProblem:
    """A forward model with known truth; ``C = sigma^2 I``."""

    __test__ = False  # not a pytest class

    name: str
    H: np.ndarray
    true_theta: np.ndarray
    sigma: float = 1.0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        n, m = self.H.shape
        if self.true_theta.shape != (m,):
            raise ValueError("true_theta does not match H")
        if not np.any(self.true_theta):
            raise ValueError("true_theta must be nonzero")
        self.metadata.setdefault("n", n)
        self.metadata.setdefault("m", m)
        self.metadata.setdefault("sigma", self.sigma)

    @property
    def clean(self) -> np.ndarray:
        return self.H @ self.true_theta

    def observe(self, seed: int) -> np.ndarray:
        return add_noise(self.clean, self.sigma, seed)


def heat_kernel(tau, kappa: float = 1.0):
    tau = np.asarray(tau, dtype=float)
    return tau**-1.5 / (2 * kappa * math.sqrt(math.pi)) * np.exp(-1.0 / (4 * kappa**2 * tau))


def heat_truth(n: int) -> np.ndarray:
    theta = np.zeros(n)
    for i in range(1, n // 2 + 1):
        ti = 20.0 * i / n
        if ti < 2:
            theta[i - 1] = 0.75 * ti**2 / 4
        elif ti < 3:
            theta[i - 1] = 0.75 + (ti - 2) * (3 - ti)
        else:
            theta[i - 1] = 0.75 * math.exp(-2 * (ti - 3))
    return theta


def heat_problem(n: int = 80, kappa: float = 1.0, sigma: float = 1.0) -> TestProblem:
    """Midpoint discretization of the inverse heat equation on ``[0, 1]``."""
    if n < 8:
        raise ValueError("heat problem needs n >= 8")
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    h = 1.0 / n
    k = h * heat_kernel((np.arange(n) + 0.5) * h, kappa)
    H = np.tril(circulant(k))
    return TestProblem(f"heat({n})", H, heat_truth(n), sigma, {"kappa": kappa})


# ---------------------------------------------------------------------------
# blur


def gaussian_psf(dim: int = 9, sd: float = 6.0) -> np.ndarray:
    if dim < 1 or dim % 2 == 0:
        raise ValueError("PSF dimension must be odd")
    r = np.arange(dim) - dim // 2
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2.0 * sd**2))
    return g / g.sum()


def _circulant_factor(taps, size):
    """``size x size`` circulant for centered 1-D taps (circular convolution)."""
    col = np.zeros(size)
    c = len(taps) // 2
    for k, v in enumerate(taps):
        col[(k - c) % size] += v
    return circulant(col)


class BlurOperator:
    """Circular 2-D convolution of ``height x width`` images (row-major vectors).

    ``matvec`` works through the FFT for any kernel.  Separable kernels also
    expose circulant factors with ``H = H_col kron H_row``.
    """

    def __init__(self, kernel, width: int, height: int):
        kernel = np.asarray(kernel, dtype=float)
        kh, kw = kernel.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("kernel dimensions must be odd")
        if height < kh or width < kw:
            raise ValueError("image smaller than kernel")
        self.kernel, self.width, self.height = kernel, width, height
        pad = np.zeros((height, width))
        pad[:kh, :kw] = kernel
        pad = np.roll(pad, (-(kh // 2), -(kw // 2)), axis=(0, 1))
        self._otf = np.fft.rfft2(pad)
        U, s, Vt = np.linalg.svd(kernel)
        self.separable = s.size == 1 or s[1] <= 1e-12 * s[0]
        if self.separable:
            a = U[:, 0] * math.sqrt(s[0])
            b = Vt[0] * math.sqrt(s[0])
            if a.sum() < 0:
                a, b = -a, -b
            self.col_factor = _circulant_factor(a, height)
            self.row_factor = _circulant_factor(b, width)
        else:
            self.col_factor = self.row_factor = None

    @property
    def shape(self):
        n = self.width * self.height
        return (n, n)

    def matvec(self, v):
        img = np.asarray(v, dtype=float).reshape(self.height, self.width)
        out = np.fft.irfft2(np.fft.rfft2(img) * self._otf, s=img.shape)
        return out.reshape(-1)

    def dense(self) -> np.ndarray:
        if self.separable:
            return np.kron(self.col_factor, self.row_factor)
        n = self.width * self.height
        return np.column_stack([self.matvec(e) for e in np.eye(n)])


def blur_operator(kernel, width: int, height: int, boundary: str = "circular") -> BlurOperator:
    if boundary != "circular":
        raise ValueError("only circular boundaries are supported")
    return BlurOperator(kernel, width, height)


def add_noise(clean, sigma: float, seed: int) -> np.ndarray:
    """``clean + sigma z`` with ``z`` from ``SeededRng(seed)``."""
    clean = np.asarray(clean, dtype=float)
    if sigma == 0:
        return clean.copy()
    return clean + sigma * SeededRng(seed).normal(clean.shape)


# ---------------------------------------------------------------------------
# images


@dataclass(frozen=True)
class GrayImage:
    width: int
    height: int
    pixels: np.ndarray  # row-major, values in [0, 1]

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=float).reshape(-1)
        if px.size != self.width * self.height:
            raise ImageFormatError("pixel count does not match dimensions")
        if px.size and (px.min() < 0 or px.max() > 1):
            raise ImageFormatError("pixels must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)

    @property
    def array(self) -> np.ndarray:
        return self.pixels.reshape(self.height, self.width)

    @classmethod
    def from_array(cls, a) -> "GrayImage":
        a = np.asarray(a, dtype=float)
        return cls(a.shape[1], a.shape[0], np.clip(a, 0.0, 1.0).reshape(-1))


_PGM_HEADER = re.compile(rb"\A(P\d)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def pgm_read(path) -> GrayImage:
    data = Path(path).read_bytes()
    m = _PGM_HEADER.match(data)
    if not m:
        raise ImageFormatError(f"{path}: malformed PGM header")
    magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if magic != b"P5":
        raise ImageFormatError(f"{path}: only binary PGM (P5) is supported, found {magic.decode()}")
    if maxval != 255:
        raise ImageFormatError(f"{path}: maxval {maxval} unsupported (need 255)")
    body = data[m.end():]
    if len(body) < w * h:
        raise ImageFormatError(f"{path}: truncated pixel data")
    px = np.frombuffer(body[: w * h], dtype=np.uint8).astype(float) / 255.0
    return GrayImage(w, h, px)


def pgm_write(img: GrayImage, path) -> None:
    px = np.rint(np.clip(img.pixels, 0, 1) * 255).astype(np.uint8)
    Path(path).write_bytes(f"P5 {img.width} {img.height} 255\n".encode() + px.tobytes())


def synthetic_image(name: str, size: int = 64) -> GrayImage:
    """``"blobs"``: sum of smooth Gaussian bumps; ``"squares"``: piecewise constant."""
    y, x = np.mgrid[0:size, 0:size] / size
    if name == "blobs":
        img = np.zeros((size, size))
        for cx, cy, w, a in [(0.3, 0.35, 0.12, 0.8), (0.7, 0.6, 0.18, 0.6), (0.45, 0.8, 0.07, 0.5), (0.8, 0.2, 0.09, 0.4)]:
            img += a * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * w**2))
        img = 0.1 + 0.85 * img / img.max()
    elif name == "squares":
        img = np.full((size, size), 0.15)
        img[(x > 0.1) & (x < 0.45) & (y > 0.15) & (y < 0.5)] = 0.8
        img[(x > 0.55) & (x < 0.9) & (y > 0.1) & (y < 0.35)] = 0.5
        img[(x > 0.3) & (x < 0.75) & (y > 0.55) & (y < 0.9)] = 0.95
        img[(x > 0.4) & (x < 0.6) & (y > 0.65) & (y < 0.8)] = 0.3
    else:
        raise UnknownProblemError(name)
    return GrayImage.from_array(img)


SYNTHETIC_IMAGES = ("blobs", "squares")
