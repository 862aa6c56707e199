"""Deterministic RNG stream splitting.

Every consumer derives its generator from ``(seed, label, index...)``; the
label is hashed with CRC32 so streams are stable across Python versions.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, label: str, *index: int) -> np.random.Generator:
    key = [int(seed), zlib.crc32(label.encode("utf-8")), *map(int, index)]
    return np.random.default_rng(np.random.SeedSequence(key))
