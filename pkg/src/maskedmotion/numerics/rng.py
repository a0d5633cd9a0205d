"""Seeded random number generation.

All stochastic code in this package draws from an explicit :class:`Rng`
rather than global state, so any pipeline is replayable from a single
64-bit seed. The underlying bit generator is Philox (counter-based,
4x64), whose stream depends only on the key -- identical seeds produce
identical streams on every platform.
"""

from __future__ import annotations

import numpy as np

ALGORITHM = "philox4x64"

_MASK64 = (1 << 64) - 1


def _mix64(x: int) -> int:
    """splitmix64 finalizer; spreads low-entropy seeds over 64 bits."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


class Rng:
    """Deterministic random source keyed by a 64-bit seed."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def child(self, index: int) -> "Rng":
        """Independent stream derived from (seed, index); used for
        per-item work that must not depend on iteration order."""
        return Rng(_mix64(self.seed ^ _mix64(index & _MASK64)))

    def random(self) -> float:
        return float(self._gen.random())

    def uniform(self, low: float, high: float, shape=None) -> np.ndarray:
        return self._gen.uniform(low, high, shape).astype(np.float32)

    def normal(self, shape=None, std: float = 1.0) -> np.ndarray:
        return (self._gen.standard_normal(shape) * std).astype(np.float32)

    def integers(self, low: int, high: int, shape=None):
        """Integers in [low, high)."""
        out = self._gen.integers(low, high, size=shape)
        return out if shape is not None else int(out)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)
