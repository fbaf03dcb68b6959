"""Stable seed derivation so every RNG stream is reproducible cross-platform."""

from __future__ import annotations

import hashlib
import random


def stable_seed(*parts) -> int:
    """Map a tuple of primitives to a 63-bit seed via blake2b.

    Python's builtin `hash` is salted per process; this is not, so derived
    seeds (and therefore every simulation output) are stable across runs and
    machines.
    """
    canon = "\x1f".join(repr(p) for p in parts).encode("utf-8")
    digest = hashlib.blake2b(canon, digest_size=8).digest()
    return int.from_bytes(digest, "big") >> 1


def derive_rng(*parts) -> random.Random:
    return random.Random(stable_seed(*parts))
