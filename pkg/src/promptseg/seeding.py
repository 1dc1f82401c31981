"""Deterministic RNG derivation: one master seed, stable named substreams."""

from __future__ import annotations

import zlib

import numpy as np


def _as_entropy(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def derive_rng(seed: int, *parts) -> np.random.Generator:
    """A Generator keyed by (seed, *parts); parts may be ints or strings."""
    entropy = [int(seed) & 0xFFFFFFFFFFFF] + [_as_entropy(p) for p in parts]
    return np.random.default_rng(entropy)
