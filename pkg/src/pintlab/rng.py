"""Deterministic random streams.

All randomness in the package flows through counter-based Philox generators
derived from an integer seed plus an integer path, so any point of a run
(data generation, a particular training iteration, a particular perturbation
pass) can be reproduced or resumed without serializing generator state.
There is no global RNG.
"""

from __future__ import annotations

import numpy as np


def stream(seed: int, *path: int) -> np.random.Generator:
    """Independent generator for the given (seed, path) coordinates.

    Streams with different paths are statistically independent; the same
    (seed, path) always yields the same sequence.
    """
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(seq))


# Path tags, centralized so no two call sites can collide on the same
# (seed, tag, ...) coordinates even when dataset seed == training seed.
# Trainer streams (re-derivable from (seed, tag, iteration) for resume):
MODEL_INIT = 0
BATCH = 1
STUDENT_DROPOUT = 2
PERTURBATION = 3
# Data-generation streams:
SHAPES = 10
TEXTURE = 11
LABEL_NOISE = 12
