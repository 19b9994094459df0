"""Seeded random streams.

All randomness goes through :class:`Rng`, a thin wrapper over numpy's
PCG64 bit generator. PCG64 output is specified bit-for-bit by numpy, so a
seed reproduces the same stream on every platform numpy supports.

Named sub-streams (``rng.child("dropout")``) are derived from the parent
seed and a CRC32 of the name, never from the parent's consumption state.
That keeps e.g. the initialization of ``conv1.weight`` independent of which
other parameters exist in the model.
"""

from __future__ import annotations

import zlib

import numpy as np

ALGORITHM = "PCG64"


def _key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


class Rng:
    def __init__(self, seed: int, *path: str):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = tuple(path)
        entropy = [self.seed & 0xFFFFFFFF, self.seed >> 32, *(_key(p) for p in self.path)]
        self.algorithm = ALGORITHM
        self.gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def child(self, name: str) -> "Rng":
        return Rng(self.seed, *self.path, name)

    def uniform(self, low, high, size) -> np.ndarray:
        return self.gen.uniform(low, high, size)

    def random(self, size) -> np.ndarray:
        return self.gen.random(size)

    def uint16(self, size) -> np.ndarray:
        return self.gen.integers(0, 1 << 16, size=size, dtype=np.uint16)

    def normal(self, loc, scale, size) -> np.ndarray:
        return self.gen.normal(loc, scale, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def choice(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n)."""
        return self.gen.choice(n, size=k, replace=False)

    def __repr__(self) -> str:
        name = "/".join(self.path)
        return f"Rng(seed={self.seed}, path={name!r}, algorithm={self.algorithm})"
