"""xoshiro256** seeded through SplitMix64.

Two flavours share one definition: :class:`Xoshiro256` is a scalar generator
built on Python integers, :class:`Xoshiro256Batch` advances many independent
streams in lockstep on ``uint64`` arrays.  Both produce the same numbers for
the same seeds, which the tests check.
"""

from __future__ import annotations

import math

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_INV_2_53 = 1.0 / (1 << 53)


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a SplitMix64 state once; returns ``(new_state, output)``."""
    state = (state + GOLDEN_GAMMA) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def mix64(value: int) -> int:
    """One SplitMix64 output for a given starting state (a 64-bit hash)."""
    return splitmix64(value & MASK64)[1]


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Xoshiro256:
    """Scalar xoshiro256** generator."""

    def __init__(self, seed: int):
        sm = seed & MASK64
        s = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            s.append(out)
        self.s = s

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self.s
        result = (_rotl((s1 * 5) & MASK64, 7) * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.s = [s0, s1, s2, s3]
        return result

    def uniform(self) -> float:
        """Double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * _INV_2_53

    def below(self, n: int) -> int:
        """Integer in ``[0, n)`` as ``floor(uniform() * n)``."""
        if n <= 0:
            raise ValueError("n must be positive")
        return min(int(self.uniform() * n), n - 1)

    def uniform_range(self, low: float, high: float) -> float:
        return low + (high - low) * self.uniform()

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates, last index first."""
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]

    def permutation(self, n: int) -> np.ndarray:
        order = list(range(n))
        self.shuffle(order)
        return np.asarray(order, dtype=np.int64)


def _rotl_arr(x: np.ndarray, k: int) -> np.ndarray:
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


class Xoshiro256Batch:
    """Many xoshiro256** streams advanced together.

    Stream ``i`` is identical to ``Xoshiro256(seeds[i])``.
    """

    def __init__(self, seeds):
        seeds = [int(s) & MASK64 for s in seeds]
        state = np.zeros((4, len(seeds)), dtype=np.uint64)
        for i, seed in enumerate(seeds):
            sm = seed
            for w in range(4):
                sm, out = splitmix64(sm)
                state[w, i] = out
        self.s = state

    def __len__(self) -> int:
        return self.s.shape[1]

    def next_u64(self) -> np.ndarray:
        s0, s1, s2, s3 = self.s[0], self.s[1], self.s[2], self.s[3]
        result = _rotl_arr(s1 * np.uint64(5), 7) * np.uint64(9)
        t = s1 << np.uint64(17)
        s2 = s2 ^ s0
        s3 = s3 ^ s1
        s1 = s1 ^ s2
        s0 = s0 ^ s3
        s2 = s2 ^ t
        s3 = _rotl_arr(s3, 45)
        self.s = np.stack([s0, s1, s2, s3])
        return result

    def uniform(self) -> np.ndarray:
        return (self.next_u64() >> np.uint64(11)).astype(np.float64) * _INV_2_53

    def below(self, n: int) -> np.ndarray:
        return np.minimum((self.uniform() * n).astype(np.int64), n - 1)

    def normals(self, count: int) -> np.ndarray:
        """``count`` standard normals per stream via Box-Muller, shape (streams, count).

        Each pair of uniforms ``(u1, u2)`` yields
        ``r*cos(2*pi*u2)`` then ``r*sin(2*pi*u2)`` with ``r = sqrt(-2 ln(1 - u1))``.
        """
        pairs = (count + 1) // 2
        out = np.empty((len(self), 2 * pairs), dtype=np.float64)
        for p in range(pairs):
            u1 = self.uniform()
            u2 = self.uniform()
            r = np.sqrt(-2.0 * np.log1p(-u1))
            theta = 2.0 * math.pi * u2
            out[:, 2 * p] = r * np.cos(theta)
            out[:, 2 * p + 1] = r * np.sin(theta)
        return out[:, :count]
