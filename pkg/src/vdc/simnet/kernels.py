"""splitmix64 stream kernels.

Two interchangeable implementations: a numba loop and a vectorized numpy
form. ``VDC_DISABLE_NUMBA=1`` (or numba failing to import) selects numpy.
Both wrap modulo 2**64 and must agree bit for bit.
"""

from __future__ import annotations

import os

import numpy as np

GAMMA = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB


def splitmix64_numpy(seed: int, n: int) -> np.ndarray:
    """First ``n`` outputs of splitmix64 started from state ``seed``."""
    k = np.arange(1, n + 1, dtype=np.uint64)
    z = np.uint64(seed) + k * np.uint64(GAMMA)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
    return z ^ (z >> np.uint64(31))


try:
    if os.environ.get("VDC_DISABLE_NUMBA", "") not in ("", "0"):
        raise ImportError("numba disabled by VDC_DISABLE_NUMBA")
    from numba import njit
except ImportError:
    HAVE_NUMBA = False
    splitmix64_numba = None
else:
    HAVE_NUMBA = True

    @njit(cache=True, nogil=True)
    def splitmix64_numba(seed, n):
        out = np.empty(n, dtype=np.uint64)
        state = np.uint64(seed)
        for i in range(n):
            state += np.uint64(GAMMA)
            z = state
            z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
            out[i] = z ^ (z >> np.uint64(31))
        return out


def splitmix64(seed: int, n: int) -> np.ndarray:
    if HAVE_NUMBA:
        return splitmix64_numba(np.uint64(seed), n)
    return splitmix64_numpy(seed, n)


def splitmix64_bytes(seed: int, n: int) -> bytes:
    """``n`` outputs, each 8 bytes big-endian, concatenated."""
    if n == 0:
        return b""
    return splitmix64(seed, n).astype(">u8").tobytes()


BACKEND = "numba" if HAVE_NUMBA else "numpy"
