"""Seed derivation.

All randomness comes from numpy's PCG64 bit generator. A run seed plus a
purpose tag (e.g. ``("init", "V1")`` or ``("shuffle", epoch)``) is mixed
through :class:`numpy.random.SeedSequence`, so each consumer draws from its
own stream and adding a consumer never perturbs another one.
"""

from __future__ import annotations

import zlib

import numpy as np

MASK64 = (1 << 64) - 1


def _tag(part) -> int:
    return zlib.crc32(str(part).encode("utf-8"))


def derive_rng(seed: int, *purpose) -> np.random.Generator:
    """Return an independent PCG64 generator for ``(seed, *purpose)``."""
    ss = np.random.SeedSequence(entropy=int(seed) & MASK64, spawn_key=tuple(_tag(p) for p in purpose))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed: int, *purpose) -> int:
    """A 64-bit child seed, for handing to components that take an int."""
    return int(derive_rng(seed, *purpose).integers(0, MASK64, dtype=np.uint64, endpoint=True))
