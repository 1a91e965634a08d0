"""Seed derivation and the fixture random number generator.

Sub-seeds: ``derive_seed(seed, purpose)`` is the first 8 bytes (little-endian)
of ``sha256(f"{seed}:{purpose}")``. Every random decision in the package is
keyed by such a purpose string, so a single top-level seed fixes a run.

Fixture generator: SplitMix64 used as a counter-based stream. Output ``i``
(1-based) of a generator with state ``s`` is ``mix(s + i * 0x9E3779B97F4A7C15)``
with the standard SplitMix64 finalizer, all arithmetic mod 2**64. Uniforms are
``(x >> 11) * 2**-53``; normals use one branch of Box-Muller,
``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`` with ``u1, u2`` consecutive uniforms.
These definitions are simple enough to reproduce bit-exactly elsewhere.
"""

from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def derive_seed(seed: int, purpose: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}:{purpose}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def numpy_rng(seed: int, purpose: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, purpose)))


class SplitMix64:
    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + idx * np.uint64(GOLDEN)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * GOLDEN) & MASK64
        return z

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (2.0**-53)
        return low + (high - low) * u

    def normal(self, n: int) -> np.ndarray:
        u = self.uniform(2 * n).reshape(n, 2)
        return np.sqrt(-2.0 * np.log1p(-u[:, 0])) * np.cos(2.0 * np.pi * u[:, 1])
