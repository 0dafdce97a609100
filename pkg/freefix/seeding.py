"""Seeded random streams.

All randomness flows through numpy's PCG64 bit generator seeded via
SeedSequence, which is specified bit-for-bit and platform independent.
Independent consumers salt the seed rather than reusing it.
"""

from typing import Sequence, Union

import numpy as np

SeedLike = Union[int, Sequence[int]]


def make_rng(seed: SeedLike, *salt: int) -> np.random.Generator:
    """Generator for ``seed`` with optional integer salt words appended."""
    entropy = [int(seed)] if np.isscalar(seed) else [int(s) for s in seed]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy + [int(s) for s in salt])))

