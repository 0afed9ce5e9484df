"""Deterministic, splittable random streams.

Every stochastic component takes an Rng rather than touching global
state. Children are derived from (seed, path of labels), so the same
seed and the same call structure reproduce the same values on any
platform; PCG64 output is platform independent.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _label_key(label) -> int:
    if isinstance(label, int):
        return label
    digest = hashlib.sha256(str(label).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class Rng:
    def __init__(self, seed: int, _path: tuple = ()):
        self.seed = int(seed)
        self.path = _path
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=_path))
        )

    def split(self, label) -> "Rng":
        """Independent child stream; same (seed, labels) gives the same stream."""
        return Rng(self.seed, self.path + (_label_key(label),))

    # -- drawing helpers ------------------------------------------------

    def normal(self, shape=(), std: float = 1.0, dtype=np.float64) -> np.ndarray:
        return (self._gen.standard_normal(shape) * std).astype(dtype)

    def uniform(self, lo: float, hi: float, shape=()) -> np.ndarray:
        return self._gen.uniform(lo, hi, shape)

    def integers(self, lo: int, hi: int, shape=None):
        return self._gen.integers(lo, hi, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen
