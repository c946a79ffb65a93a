"""Keyed random streams.

Every random draw in the package comes from a generator keyed by a tuple of
integers (global seed, sample index, epoch, ...), so results do not depend on
evaluation order.
"""

import numpy as np

# stream tags keep draws for different purposes independent
PERTURB = 1
SHUFFLE = 2
SPLIT = 3
SENSITIVITY = 4
INIT = 5
EVAL = 6


def rng_for(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))
