"""Seed stream splitting.

Every randomized quantity is derived from one master seed. A child stream is
identified by a tuple of non-negative integer keys and obtained through
``numpy.random.SeedSequence(master, spawn_key=keys)``, so two streams with
different keys are statistically independent and each one is reproducible on
its own. The named streams used by the pipelines are listed below.
"""

import numpy as np

COVARIANCE = 0
TRAINING = 1
TABLE = 2
HYPER = 3
CALIBRATION = 4
VALIDATION = 5
OBJECTIVE = 6
BASELINE = 7


def stream_seed(seed, *keys):
    """Return a 63-bit integer seed for the child stream ``keys`` of ``seed``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))


def make_rng(seed, *keys):
    if keys:
        return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys)))
    return np.random.default_rng(int(seed))
