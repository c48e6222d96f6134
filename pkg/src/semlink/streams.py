"""Deterministic RNG stream derivation.

Every random draw in the pipeline comes from a generator built out of
(root seed, stream id). Stream ids are stable hashes of a purpose string
plus integer indices, so parallel and serial execution see identical
randomness and no global RNG state exists anywhere.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

_MASK64 = (1 << 64) - 1


def stream_id(purpose: str, *indices: int) -> int:
    """Stable 64-bit stream id for (purpose, indices).

    Uses blake2b rather than hash() so ids survive process restarts.
    """
    h = hashlib.blake2b(purpose.encode("utf-8"), digest_size=8)
    for i in indices:
        h.update(struct.pack("<q", int(i)))
    return int.from_bytes(h.digest(), "little")


def make_rng(seed: int, sid: int = 0) -> np.random.Generator:
    """Generator for the stream `sid` under root `seed`."""
    return np.random.default_rng(np.random.SeedSequence([seed & _MASK64, sid & _MASK64]))


def derive_seed(seed: int, purpose: str, *indices: int) -> int:
    """Collapse (seed, purpose, indices) into a new 64-bit root seed."""
    h = hashlib.blake2b(purpose.encode("utf-8"), digest_size=8)
    h.update(struct.pack("<Q", seed & _MASK64))
    for i in indices:
        h.update(struct.pack("<q", int(i)))
    return int.from_bytes(h.digest(), "little")
