"""Named deterministic RNG streams.

Every stochastic component (parameter init, epoch shuffling, dropout,
synthetic text) draws from its own stream derived from the run seed plus a
stream name, so adding draws to one component never shifts another.  The
derivation must be stable across processes and platforms, hence crc32 of the
name rather than Python's salted hash().
"""

from __future__ import annotations

import zlib

import numpy as np


def rng_for(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Generator for stream `name` under `seed`.

    Extra integers (e.g. an epoch index) extend the entropy key, giving one
    independent stream per (seed, name, *extra) tuple.
    """
    key = [int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))]
    key.extend(int(x) & 0xFFFFFFFF for x in extra)
    return np.random.default_rng(key)
