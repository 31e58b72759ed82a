"""xoshiro256** with splitmix64 seeding.

Streams are defined bit-for-bit so any implementation reproduces the same
datasets:

* state: four 64-bit words filled by four successive splitmix64 outputs
  starting from ``seed mod 2**64``;
* ``uniform()``: ``(next_u64() >> 11) * 2**-53`` in [0, 1);
* ``normal()``: Box-Muller on two uniforms ``u1, u2`` with
  ``r = sqrt(-2 ln(1 - u1))``, returning ``r cos(2 pi u2)`` and caching
  ``r sin(2 pi u2)`` for the next call;
* ``below(n)``: ``floor(uniform() * n)``.
"""

from __future__ import annotations

import math

import numpy as np

_MASK = (1 << 64) - 1


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK


def splitmix64(state: int) -> tuple[int, int]:
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


class Xoshiro256:
    def __init__(self, seed: int):
        sm = int(seed) & _MASK
        words = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            words.append(out)
        self.s = words
        self._spare: float | None = None

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self.s
        result = (_rotl((s1 * 5) & _MASK, 7) * 9) & _MASK
        t = (s1 << 17) & _MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.s = [s0, s1, s2, s3]
        return result

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform_range(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.uniform()

    def below(self, n: int) -> int:
        return int(self.uniform() * n)

    def normal(self) -> float:
        if self._spare is not None:
            out, self._spare = self._spare, None
            return out
        u1 = self.uniform()
        u2 = self.uniform()
        r = math.sqrt(-2.0 * math.log1p(-u1))
        theta = 2.0 * math.pi * u2
        self._spare = r * math.sin(theta)
        return r * math.cos(theta)

    def normals(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        normal = self.normal
        return np.array([normal() for _ in range(n)], dtype=np.float64).reshape(shape)

    def uniforms(self, shape, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape))
        uniform = self.uniform
        return lo + (hi - lo) * np.array([uniform() for _ in range(n)]).reshape(shape)

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates, walking i from n-1 down to 1."""
        items = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]
        return items
