"""Deterministic seed derivation for independent RNG streams.

A derived seed is the first 8 bytes, little-endian, of
``sha256("{master}|{part}|{part}|...")``. Every sampling site keys its own
stream with a stable label, so draws never depend on iteration order and
parallel schedules reproduce sequential results. The construction is simple
enough to re-derive in an external checker: hash the decimal master seed and
the labels joined by ``|``, then read the leading 8 digest bytes as an
unsigned little-endian integer.
"""

from __future__ import annotations

import hashlib


def derive_seed(master: int, *parts: str) -> int:
    """Derive a 64-bit stream seed from a master seed and a label path."""
    h = hashlib.sha256()
    h.update(str(int(master)).encode("utf-8"))
    for part in parts:
        h.update(b"|")
        h.update(str(part).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little")
