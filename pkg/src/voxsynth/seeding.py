"""Deterministic seed derivation.

One user-facing seed fans out into independent per-stage / per-sample seeds
through a splitmix64 mix, so that any stage can be re-run in isolation and
reproduce its stream exactly.
"""

from __future__ import annotations

import zlib

_MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> int:
    """One splitmix64 output for the given 64-bit state."""
    z = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def derive_seed(seed: int, *labels) -> int:
    """Mix a base seed with string/int labels into a new 64-bit seed.

    Labels are hashed with crc32 (stable across runs and platforms), then
    folded into the splitmix64 stream one at a time.
    """
    state = seed & _MASK64
    for label in labels:
        if isinstance(label, int):
            salt = label & _MASK64
        else:
            salt = zlib.crc32(str(label).encode("utf-8"))
        state = splitmix64(state ^ salt)
    return splitmix64(state)
