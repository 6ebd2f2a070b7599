"""Seeded, splittable random streams.

Every stochastic routine takes an explicit integer seed. Sub-streams are
derived by hashing the seed together with integer keys, so that independent
parts of an experiment never share draws.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(k) -> int:
    if isinstance(k, (int, np.integer)):
        return int(k) & 0xFFFFFFFF
    return zlib.crc32(str(k).encode("utf-8"))


def make_rng(seed: int, *keys) -> np.random.Generator:
    """Return a generator for ``seed`` specialised by ``keys`` (ints or strings)."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_key(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def derive_seed(seed: int, *keys) -> int:
    """Deterministic child seed, handy where an API wants a plain integer."""
    return int(make_rng(seed, *keys).integers(0, 2**31 - 1))
