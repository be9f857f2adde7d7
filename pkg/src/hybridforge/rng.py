"""Deterministic, splittable random streams.

Built on numpy's Philox counter-based generator seeded through SeedSequence,
so a (seed, path) pair always yields the same stream regardless of platform
or how many sibling streams exist.  Splitting appends to the path, which is
what lets per-layer distillation jobs draw independent randomness that does
not depend on worker count or scheduling order.
"""

from __future__ import annotations

import numpy as np


class SeededRng:
    """A named stream of randomness: identical (seed, path) => identical draws."""

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def split(self, key: int) -> "SeededRng":
        """Derive an independent child stream. Pure: does not advance self."""
        return SeededRng(self.seed, self.path + (int(key),))

    def normal(self, shape, std: float = 1.0, dtype=np.float32) -> np.ndarray:
        # Draw in float64 then cast, so float32 and float64 models share
        # the same underlying sample sequence.
        x = self._gen.standard_normal(shape, dtype=np.float64) * std
        return x.astype(dtype)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0, dtype=np.float32) -> np.ndarray:
        x = self._gen.uniform(low, high, size=shape)
        return x.astype(dtype)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, path={self.path})"
