"""Independent random streams keyed by (root seed, purpose, indices).

Every random draw in a run comes from ``stream(root, TAG, ...)`` so results do
not depend on call order or on how work is split across workers.
"""
import numpy as np

INIT = 1
SELECT = 2
CLIENT = 3
NOISE = 4
CANARY = 5
TRIAL_COHORT = 6
TRIAL_NOISE = 7
TRIAL_ORDER = 8


def stream(root: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(root), spawn_key=tuple(int(k) for k in keys)))
