"""Deterministic seed derivation.

Every random draw in the package goes through ``numpy.random.default_rng``
(the PCG64 bit generator).  Child seeds are derived with
:class:`numpy.random.SeedSequence`, which hashes the parent seed together
with an integer key path.  The derivation is splittable: the seed for
``(master, cell, repeat)`` never depends on how many siblings were drawn
before it, so grid cells can run in any order or in parallel.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _as_key(key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    return int(key) & _MASK64


def derive_seed(seed: int, *keys) -> int:
    """Mix ``seed`` with a path of integer or string keys into a 64-bit seed."""
    entropy = [int(seed) & _MASK64] + [_as_key(k) for k in keys]
    state = np.random.SeedSequence(entropy).generate_state(2, np.uint32)
    return (int(state[0]) << 32) | int(state[1])


def rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(int(seed) & _MASK64)
