"""Reproducible random substreams.

Every random draw in a run comes from a generator keyed on
``(master_seed, client_id, round, purpose)``. The key is hashed by numpy's
``SeedSequence`` so streams are statistically independent and do not depend
on the order in which clients are executed.
"""

from enum import IntEnum

import numpy as np


class Purpose(IntEnum):
    BATCH = 0
    GRAD_NOISE = 1
    LOSS_BOUND_NOISE = 2
    LOSS_NOISE = 3
    PARTITION = 4
    SHUFFLE = 5
    INIT = 6
    HOLDOUT = 7
    DATA = 8


# Offset so that "no client" (server-side draws) never collides with a real id.
SERVER = -1


def substream(master_seed: int, client_id: int, round_: int, purpose: Purpose) -> np.random.Generator:
    """Return a fresh generator for one (client, round, purpose) cell."""
    key = [int(master_seed) & 0xFFFFFFFFFFFFFFFF, client_id + 1, round_ + 1, int(purpose)]
    return np.random.default_rng(np.random.SeedSequence(key))
