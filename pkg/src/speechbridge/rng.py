"""Seeded random streams.

PCG64 draws are bit-identical across platforms for a given seed and call
sequence. Named child streams let independent consumers (masking, layer-drop,
data order) draw without perturbing each other.
"""
from __future__ import annotations

import zlib

import numpy as np


class Rng:
    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._key = _key
        self.gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=_key)))
        self.calls = 0

    def child(self, name: str) -> "Rng":
        """Independent stream identified by ``name``; does not advance this one."""
        return Rng(self.seed, self._key + (zlib.crc32(name.encode()),))

    def normal(self, size=None, scale: float = 1.0) -> np.ndarray:
        self.calls += 1
        return self.gen.normal(0.0, scale, size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        self.calls += 1
        return self.gen.uniform(low, high, size)

    def integers(self, low: int, high: int | None = None, size=None):
        self.calls += 1
        return self.gen.integers(low, high, size)

    def random(self, size=None):
        self.calls += 1
        return self.gen.random(size)

    def poisson(self, lam: float, size=None):
        self.calls += 1
        return self.gen.poisson(lam, size)

    def permutation(self, n: int) -> np.ndarray:
        self.calls += 1
        return self.gen.permutation(n)

    def choice(self, a, size=None, replace: bool = True):
        self.calls += 1
        return self.gen.choice(a, size=size, replace=replace)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, key={self._key}, calls={self.calls})"
