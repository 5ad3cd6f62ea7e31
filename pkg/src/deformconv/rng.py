"""Deterministic pseudo-random numbers for reproducible runs.

Every source of randomness in the library (synthetic data, weight
initialisation, benchmark clouds) flows through :class:`DetRng`, a
xoshiro256** generator whose state is seeded through splitmix64.  Both
algorithms use only 64-bit integer arithmetic, so a given seed produces
the same stream on every platform and interpreter, independent of numpy
version.

Constants follow the Blackman & Vigna reference implementations:

  splitmix64:   increment 0x9E3779B97F4A7C15,
                finalising multipliers 0xBF58476D1CE4E5B9 and
                0x94D049BB133111EB
  xoshiro256**: scrambler ``rotl(s1 * 5, 7) * 9``, shift 17,
                state rotation ``rotl(s3, 45)``
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1
_INV53 = 1.0 / (1 << 53)


def _splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step. Returns (output, next state)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)), state


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class DetRng:
    """xoshiro256** stream with the samplers the library needs."""

    def __init__(self, seed: int):
        self._seed = int(seed) & _MASK64
        state = []
        x = self._seed
        for _ in range(4):
            v, x = _splitmix64(x)
            state.append(v)
        if not any(state):
            # the all-zero state is a fixed point of the generator
            state[0] = 1
        self._s = state

    def spawn(self, tag: int) -> "DetRng":
        """Independent substream keyed by ``tag``.

        Depends only on the original seed and the tag, never on how much
        of the parent stream has been consumed.
        """
        mixed, _ = _splitmix64((self._seed ^ (int(tag) & _MASK64)) & _MASK64)
        child, _ = _splitmix64(mixed)
        return DetRng(child)

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        out = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return out

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        """One double in [lo, hi). 53 uniform mantissa bits."""
        u = (self.next_u64() >> 11) * _INV53
        return lo + (hi - lo) * u

    def uniforms(self, n: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            out[i] = self.uniform(lo, hi)
        return out

    def normal(self, mu: float = 0.0, sigma: float = 1.0) -> float:
        return mu + sigma * self._gauss()

    def normals(self, n: int, mu: float = 0.0, sigma: float = 1.0) -> np.ndarray:
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            out[i] = mu + sigma * self._gauss()
        return out

    def _gauss(self) -> float:
        # Box-Muller; u1 is shifted into (0, 1] so log() stays finite.
        u1 = ((self.next_u64() >> 11) + 1) * _INV53
        u2 = (self.next_u64() >> 11) * _INV53
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def integer(self, lo: int, hi: int) -> int:
        """One integer in [lo, hi). Multiply-shift range reduction."""
        if hi <= lo:
            raise ValueError("integer(): need lo < hi")
        span = hi - lo
        return lo + ((self.next_u64() >> 11) * span >> 53)

    def integers(self, n: int, lo: int, hi: int) -> np.ndarray:
        out = np.empty(n, dtype=np.int64)
        for i in range(n):
            out[i] = self.integer(lo, hi)
        return out

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n)."""
        perm = np.arange(n, dtype=np.int64)
        for i in range(n - 1, 0, -1):
            j = self.integer(0, i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm
