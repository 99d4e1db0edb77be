"""Deterministic seed derivation.

Every random stream in the package is a ``numpy.random.Generator`` seeded
from :func:`mix_seed`; nothing touches numpy's global RNG.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def _as_int(part: int | str) -> int:
    if isinstance(part, str):
        return int.from_bytes(hashlib.sha256(part.encode()).digest()[:8], "little")
    return int(part) & _MASK


def mix_seed(*parts: int | str) -> int:
    """Fold integers/strings into one 64-bit seed with a splitmix64 chain."""
    h = 0x6A09E667F3BCC908
    for part in parts:
        h = _splitmix64(h ^ _as_int(part))
    return h


def rng(*parts: int | str) -> np.random.Generator:
    return np.random.default_rng(mix_seed(*parts))
