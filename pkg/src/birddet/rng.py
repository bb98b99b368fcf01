"""Seeded randomness.

All randomized code takes a ``numpy.random.Generator`` built on the PCG64
bit generator (O'Neill 2014, 128-bit LCG state with XSL-RR output). The
raw stream is identical on every platform for a given seed.
"""
import numpy as np


def make_rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def child_seed(rng):
    """Draw a 64-bit seed for an independent sub-stream."""
    return int(rng.integers(0, 2**63 - 1))
