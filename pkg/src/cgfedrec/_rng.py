"""Seed derivation.

Every random draw in the simulator comes from a generator keyed on
``(seed, purpose, *indices)`` so results never depend on the order in which
clients or grid cells are executed.
"""
import numpy as np

# purpose tags
INIT_CLIENT = 1
INIT_GLOBAL = 2
NEGATIVES = 3
SHUFFLE = 4
PARTICIPANTS = 5
KMEANS = 6
RANDOM_LABELS = 7
LDP = 8
EVAL_NEGATIVES = 9
SPLIT = 10
CG_SUBSAMPLE = 11
VALIDATION = 12


def derive_rng(seed, *keys):
    """Return a fresh ``numpy.random.Generator`` for ``(seed, *keys)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *(int(k) for k in keys)]))


def derive_seed(seed, *keys):
    """Collapse ``(seed, *keys)`` into a single 63-bit integer seed."""
    state = np.random.SeedSequence([int(seed), *(int(k) for k in keys)]).generate_state(2, np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))
