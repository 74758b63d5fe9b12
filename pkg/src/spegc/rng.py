"""Deterministic counter-based randomness with named sub-streams."""

from __future__ import annotations

import zlib

import numpy as np


def _purpose_key(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


class Rng:
    """Seeded Philox generator; ``child`` derives independent named streams.

    A child's stream depends only on the root seed and the path of
    ``(purpose, index)`` labels, never on how many draws were made elsewhere.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if seed < 0:
            raise ValueError("seed must be a non-negative integer")
        self.seed = int(seed)
        self.path = tuple(path)
        entropy = [self.seed, *self.path]
        ss = np.random.SeedSequence(entropy)
        self.gen = np.random.Generator(np.random.Philox(ss))

    def child(self, purpose: str, *index: int) -> "Rng":
        return Rng(self.seed, self.path + (_purpose_key(purpose), *[int(i) for i in index]))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def random(self, size=None):
        return self.gen.random(size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"
