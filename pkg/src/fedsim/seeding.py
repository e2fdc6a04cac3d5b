"""Stable seed derivation for independent random streams.

Every stochastic component (init, shuffles, client selection, jitter,
partitioning) draws from its own stream derived from a base seed and a
role path, so adding or reordering one consumer never perturbs another.
The derivation hashes the printable path, which keeps it stable across
platforms and interpreter runs.
"""

from __future__ import annotations

import hashlib


def derive_seed(base: int, *path: object) -> int:
    """Map (base seed, role path) to a 63-bit stream seed."""
    text = repr((int(base),) + tuple(str(p) for p in path))
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1
