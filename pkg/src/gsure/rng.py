"""Counter-based SplitMix64 generator with Box-Muller normals.

The stream is fully specified so any language can reproduce it bit for bit:

* output ``i`` (0-based) of a generator with 64-bit seed ``s`` is
  ``mix64(s + (i + 1) * 0x9E3779B97F4A7C15 mod 2**64)``, where ``mix64`` is
  the SplitMix64 finalizer (shifts 30/27/31, multipliers
  ``0xBF58476D1CE4E5B9`` and ``0x94D049BB133111EB``);
* a uniform in [0, 1) is ``(z >> 11) * 2**-53``;
* normals come in Box-Muller pairs from two consecutive uniforms
  ``(a, b)``: ``r = sqrt(-2 ln(1 - a))``, emitting ``r cos(2 pi b)`` then
  ``r sin(2 pi b)``; an odd request discards the trailing sine;
* Rademacher (+-1) draws use the top bit of each output (set -> -1);
* ``child(k)`` has seed ``mix64(mix64(s) ^ (k + 1) * 0xD1B54A32D192ED03)``
  and does not depend on how much of the parent stream was consumed.

Transcendental functions come from the platform libm, so normals may differ
in the last ulp across platforms; the integer stream never does.
"""

from __future__ import annotations

import numpy as np

GOLDEN_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_SPLIT = np.uint64(0xD1B54A32D192ED03)
_MASK = (1 << 64) - 1


def mix64(z):
    """SplitMix64 finalizer on a uint64 array (wrapping arithmetic)."""
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _shape(size):
    if size is None or size == ():
        return (), 1
    shape = tuple(int(s) for s in np.atleast_1d(size))
    return shape, int(np.prod(shape))


class SeededRng:
    """Deterministic, splittable random stream.

    Parameters
    ----------
    seed : int
        Any Python integer; it is reduced modulo 2**64.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & _MASK
        self._counter = 0

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, position={self._counter})"

    def child(self, key: int) -> "SeededRng":
        s = mix64(np.array([self.seed], dtype=np.uint64))
        with np.errstate(over="ignore"):
            k = np.array([(int(key) + 1) & _MASK], dtype=np.uint64) * _SPLIT
        return SeededRng(int(mix64(s ^ k)[0]))

    def raw(self, count: int) -> np.ndarray:
        """Next ``count`` 64-bit outputs."""
        idx = np.arange(self._counter + 1, self._counter + count + 1, dtype=np.uint64)
        self._counter += count
        with np.errstate(over="ignore"):
            state = np.uint64(self.seed) + idx * GOLDEN_GAMMA
        return mix64(state)

    def uniform(self, size=()) -> np.ndarray:
        shape, count = _shape(size)
        u = (self.raw(count) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return u.reshape(shape) if shape else u[0]

    def normal(self, size=()) -> np.ndarray:
        shape, count = _shape(size)
        pairs = (count + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        ang = 2.0 * np.pi * u[:, 1]
        z = np.column_stack([r * np.cos(ang), r * np.sin(ang)]).ravel()[:count]
        return z.reshape(shape) if shape else z[0]

    def rademacher(self, size=()) -> np.ndarray:
        shape, count = _shape(size)
        bits = (self.raw(count) >> np.uint64(63)).astype(np.float64)
        b = 1.0 - 2.0 * bits
        return b.reshape(shape) if shape else b[0]

    def gamma(self, shape_k: float, size=()) -> np.ndarray:
        """Gamma(shape_k, scale 1) variates by Marsaglia-Tsang rejection.

        Consumes normals and uniforms in rounds until every slot is filled;
        the fill order is by slot index, so results are deterministic.
        """
        shape, count = _shape(size)
        k = float(shape_k)
        if k <= 0:
            raise ValueError("gamma shape must be positive")
        boost = k < 1
        a = k + 1.0 if boost else k
        d = a - 1.0 / 3.0
        c = 1.0 / np.sqrt(9.0 * d)
        out = np.empty(count)
        todo = np.arange(count)
        while todo.size:
            z = self.normal(todo.size)
            u = self.uniform(todo.size)
            v = (1.0 + c * z) ** 3
            with np.errstate(invalid="ignore", divide="ignore"):
                ok = (v > 0) & (np.log(u) < 0.5 * z**2 + d - d * v + d * np.log(v))
            out[todo[ok]] = d * v[ok]
            todo = todo[~ok]
        if boost:
            out *= self.uniform(count) ** (1.0 / k)
        return out.reshape(shape) if shape else out[0]
