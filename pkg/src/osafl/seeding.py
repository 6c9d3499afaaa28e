"""Keyed random streams.

Every stochastic draw in a run comes from a generator keyed by
``(seed, purpose, client, round)``, so results do not depend on execution
order, worker count or which protocol is being simulated.
"""

from __future__ import annotations

import numpy as np

# purposes
POPULATION = 0
CATALOG = 1
PROFILE = 2
STREAM = 3
ARRIVAL = 4
SHADOWING = 5
TRAIN = 6
TEST = 7
GENIE = 8
MODEL_INIT = 9


def keyed_rng(seed: int, purpose: int, client: int = 0, round_: int = 0) -> np.random.Generator:
    if seed < 0:
        raise ValueError("seed must be non-negative")
    return np.random.default_rng([int(seed), int(purpose), int(client), int(round_)])
