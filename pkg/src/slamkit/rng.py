"""Pinned pseudo-random generator.

Every seeded operation in the package draws from ``numpy.random.Philox``
(Philox4x64-10, a counter-based generator) so that a seed means the same
stream on every platform and numpy build that implements it.
"""

import numpy as np


def make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(seed))
