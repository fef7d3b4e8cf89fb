"""Deterministic splitmix64-based random stream.

Used everywhere reproducibility across platforms matters (augmentation
seeds, epoch shuffles). Weight initialization goes through ``numpy_rng``,
which is itself seeded from this stream.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix(z: int) -> int:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & _MASK
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & _MASK
    return z ^ (z >> 31)


class SeededRng:
    """splitmix64 generator: 64-bit state, identical stream on every platform."""

    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = seed & _MASK

    def next_u64(self) -> int:
        self.state = (self.state + _GOLDEN) & _MASK
        return _mix(self.state)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        return lo + (hi - lo) * (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n)."""
        return self.next_u64() % n

    def coin(self, p: float) -> bool:
        return self.uniform() < p

    def derive(self, *tags: int) -> "SeededRng":
        """An independent substream keyed by (state, tags)."""
        z = self.state
        for t in tags:
            z = _mix((z ^ (t & _MASK)) + _GOLDEN & _MASK)
        return SeededRng(z)

    def numpy_rng(self) -> np.random.Generator:
        return np.random.default_rng(self.next_u64())
