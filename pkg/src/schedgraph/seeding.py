"""Deterministic seed derivation for subsystem RNG streams.

All randomness in the package funnels through a single master seed;
component streams are derived with a splitmix64 hash of the master seed
and a label path, e.g. ``derive_seed(seed, "trace", 3)``.  Streams are
therefore independent but fully reproducible, and inserting a new
consumer never shifts existing ones.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def _fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & _MASK64
    return h


def derive_seed(seed: int, *labels) -> int:
    """Derive a 64-bit stream seed from a master seed and a label path."""
    x = seed & _MASK64
    for label in labels:
        x = _splitmix64(x ^ _fnv1a64(str(label)))
    return x


def rng_for(seed: int, *labels) -> np.random.Generator:
    """A PCG64 generator seeded from the derived stream seed."""
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *labels)))
