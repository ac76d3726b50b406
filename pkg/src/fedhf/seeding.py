"""Labeled seed derivation so every pipeline stage gets its own RNG stream."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, label: str) -> int:
    digest = hashlib.sha256(f"{int(master)}/{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def rng_for(master: int, label: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng([derive_seed(master, label), *extra])
