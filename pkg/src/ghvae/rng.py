"""Deterministic seeding helpers."""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def splitmix64(seed: int, index: int = 0) -> int:
    """Derive an independent 64-bit stream seed from (seed, index)."""
    x = (int(seed) + 0x9E3779B97F4A7C15 * (int(index) + 1)) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (x ^ (x >> 31)) & _MASK64


def make_rng(seed: int, index: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(splitmix64(seed, index)))
