"""Counter-based splitmix64 random stream.

Every stochastic piece of the pipeline (scene synthesis, box jitter,
diffusion noise, init) draws from one of these streams so that a 64-bit
seed fully determines the run.  The generator is counter-based: draw i of
a stream seeded with s is finalize(s + (i+1)*GOLDEN), which makes bulk
generation a vectorized uint64 computation.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)


def _finalize(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """Deterministic 64-bit stream with uniform/normal helpers."""

    def __init__(self, seed: int):
        self._seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self._counter = 0
        self._spare_normals: np.ndarray = np.empty(0)

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            return _finalize((self._seed + idx * _GOLDEN) & _MASK)

    def next_u64(self) -> int:
        return int(self._raw(1)[0])

    def derive(self, *tags: int) -> "SplitMix64":
        """Child stream keyed by integer tags; independent of draw position."""
        z = self._seed
        with np.errstate(over="ignore"):
            for tag in tags:
                z = _finalize((z ^ np.uint64(tag & 0xFFFFFFFFFFFFFFFF)) + _GOLDEN)
        return SplitMix64(int(z))

    def uniform(self, shape=None) -> np.ndarray | float:
        """Uniform floats in [0, 1) with 53-bit resolution."""
        n = 1 if shape is None else int(np.prod(shape))
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        if shape is None:
            return float(u[0])
        return u.reshape(shape)

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi] inclusive (rejection-free modulo; spans here are tiny)."""
        if hi < lo:
            raise ValueError(f"randint: empty range [{lo}, {hi}]")
        span = hi - lo + 1
        return lo + int(self._raw(1)[0] % np.uint64(span))

    def normals(self, shape=None) -> np.ndarray | float:
        """Standard normals via Box-Muller on the uniform stream."""
        n = 1 if shape is None else int(np.prod(shape))
        out = np.empty(n)
        have = min(n, self._spare_normals.size)
        if have:
            out[:have] = self._spare_normals[:have]
            self._spare_normals = self._spare_normals[have:]
        need = n - have
        if need > 0:
            pairs = (need + 1) // 2
            u1 = np.maximum(self.uniform((pairs,)), 2.0 ** -53)
            u2 = self.uniform((pairs,))
            r = np.sqrt(-2.0 * np.log(u1))
            z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])
            out[have:] = z[:need]
            self._spare_normals = z[need:]
        if shape is None:
            return float(out[0])
        return out.reshape(shape)
