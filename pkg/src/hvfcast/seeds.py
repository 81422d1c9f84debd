"""Stable seed derivation for independent, schedule-free RNG streams."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*parts) -> int:
    """64-bit seed from a sha256 over the stringified parts.

    Unlike Python's salted hash(), this is stable across processes and
    sessions, so worker processes can derive their own streams and still
    produce output identical to a sequential run.
    """
    key = ":".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little")


def derived_rng(*parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))
