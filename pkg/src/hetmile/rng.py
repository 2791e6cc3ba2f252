"""Deterministic stream derivation helpers.

Walk generation and negative sampling need per-task random streams that do
not depend on scheduling order, so streams are keyed by (seed, task id,
slot) through splitmix64 rather than drawn from one shared sequential
generator.
"""

import numba
import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


@numba.njit(numba.uint64(numba.uint64), cache=True, inline="always")
def splitmix64(x):
    x = (x + _GAMMA) & np.uint64(0xFFFFFFFFFFFFFFFF)
    x = (x ^ (x >> np.uint64(30))) * _MIX1
    x = (x ^ (x >> np.uint64(27))) * _MIX2
    return x ^ (x >> np.uint64(31))


@numba.njit(numba.uint64(numba.uint64, numba.uint64), cache=True, inline="always")
def mix2(a, b):
    return splitmix64(splitmix64(a) ^ b)


@numba.njit(numba.float64(numba.uint64), cache=True, inline="always")
def u01(x):
    # top 53 bits -> double in [0, 1)
    return (x >> np.uint64(11)) * (1.0 / 9007199254740992.0)


def derive_seed(seed, *parts):
    """Derive a child 64-bit seed from a root seed and integer tags."""
    s = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
    for p in parts:
        s = mix2(s, np.uint64(p & 0xFFFFFFFFFFFFFFFF))
    return int(s)
