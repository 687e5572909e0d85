"""Seeded random streams with label-derived children.

All randomness in the package flows through one root ``Rng``. Consumers
(init, gumbel noise, dropout, perturbations, ...) take a child stream
derived from a fixed label, so adding draws to one consumer never shifts
the stream seen by another.
"""
from __future__ import annotations

import hashlib

import numpy as np


def child_seed(seed: int, label: str) -> int:
    """Derive a deterministic 63-bit child seed from (seed, label)."""
    digest = hashlib.sha256(f"{seed}/{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


class Rng:
    """Deterministic PCG64 stream: same seed + same call sequence = same values."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, label: str) -> "Rng":
        return Rng(child_seed(self.seed, label))

    def uniform(self, rows: int, cols: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=(rows, cols))

    def normal(self, rows: int, cols: int, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=(rows, cols))

    def gumbel(self, rows: int, cols: int) -> np.ndarray:
        return self._gen.gumbel(0.0, 1.0, size=(rows, cols))

    def integers(self, low: int, high: int, size: int | None = None):
        return self._gen.integers(low, high, size=size)

    def choice(self, pool, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(pool, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed})"
