"""Portable seeded random streams.

Every random draw in the package comes from :class:`Rng`, a counter-based
SplitMix64 generator. The n-th 64-bit output of a stream seeded with ``s`` is
``mix(s + n * 0x9E3779B97F4A7C15)`` (n starting at 1, arithmetic mod 2**64)
where ``mix`` is the xorshift-multiply finalizer below. Because outputs only
depend on the counter, bulk draws vectorize and the sequence is trivially
reproducible in any language.

Derived quantities:

* uniform float in [0, 1): ``(z >> 11) * 2**-53``
* integer in [0, n): ``floor(uniform * n)``
* standard normal: Box-Muller on two consecutive uniforms ``u1, u2``:
  ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)``
"""

from __future__ import annotations

import numpy as np

GOLDEN_GAMMA = 0x9E3779B97F4A7C15
MIX_MUL_1 = 0xBF58476D1CE4E5B9
MIX_MUL_2 = 0x94D049BB133111EB
_MASK64 = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX_MUL_1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX_MUL_2)
    return z ^ (z >> np.uint64(31))


def mix64(value: int) -> int:
    """Scalar SplitMix64 finalizer (used for deriving stream seeds)."""
    return int(_mix(np.array([value & _MASK64], dtype=np.uint64))[0])


def _fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & _MASK64
    return h


class Rng:
    """Deterministic random stream; see module docstring for the algorithm."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed:#x}, counter={self.counter})"

    def spawn(self, name: str) -> "Rng":
        """Independent named sub-stream; does not advance this stream."""
        return Rng(mix64(self.seed ^ _fnv1a64(name)))

    def next_u64(self, size: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + size, dtype=np.uint64)
        self.counter += size
        with np.errstate(over="ignore"):
            state = np.uint64(self.seed) + idx * np.uint64(GOLDEN_GAMMA)
            return _mix(state)

    def uniform(self, size: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        u = (self.next_u64(size) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return low + (high - low) * u

    def integers(self, n: int, size: int) -> np.ndarray:
        if n < 1:
            raise ValueError("n must be positive")
        return np.minimum(np.floor(self.uniform(size) * n), n - 1).astype(np.int64)

    def normal(self, size: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        u = self.uniform(2 * size).reshape(size, 2)
        z = np.sqrt(-2.0 * np.log1p(-u[:, 0])) * np.cos(2.0 * np.pi * u[:, 1])
        return mean + std * z
