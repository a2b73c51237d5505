"""Deterministic seed derivation.

A root seed is split into named, independent streams. Stream keys are hashed
with a fixed hash (crc32) so adding a new stream never perturbs another one.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key(name) -> int:
    if isinstance(name, (int, np.integer)):
        return int(name) & 0xFFFFFFFF
    return zlib.crc32(str(name).encode("utf-8"))


def derive_seed(root: int, *names) -> int:
    """Integer seed for the stream ``root/names[0]/names[1]/...``."""
    ss = np.random.SeedSequence(int(root), spawn_key=tuple(_key(n) for n in names))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def rng(root: int, *names) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(root), spawn_key=tuple(_key(n) for n in names)))
