"""Platform-independent seed expansion.

Child seeds come from a splitmix64 stream started at the master seed, so a
given master seed yields the same per-tree and per-repetition generators on
every platform and numpy version that ships PCG64.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1


def splitmix64(seed: int, count: int) -> list[int]:
    """Return ``count`` 64-bit outputs of splitmix64 started at ``seed``."""
    state = int(seed) & _MASK
    out = []
    for _ in range(count):
        state = (state + 0x9E3779B97F4A7C15) & _MASK
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        out.append(z ^ (z >> 31))
    return out


def child_seed(seed: int, index: int) -> int:
    return splitmix64(seed, index + 1)[index]


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed) & _MASK))
