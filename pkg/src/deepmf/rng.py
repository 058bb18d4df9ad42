"""Seeded random streams.

All randomness in the package flows from one root seed, fanned out into
named independent streams so that e.g. changing the shuffle stream cannot
perturb the split.
"""

import numpy as np

_STREAMS = {"split": 0, "area": 1, "init": 2, "shuffle": 3}


def stream(seed, name):
    """A fresh Generator for the named stream derived from ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_STREAMS[name],)))
