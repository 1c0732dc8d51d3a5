"""Deterministic RNG derivation.

Every random draw in the package comes from a generator derived here from
the master seed plus a structured key (purpose tag, round index, client id,
...). Derived streams are independent of execution order, so client updates
can run in any order, or concurrently, without changing results, and a
checkpoint only needs the master seed and round index to resume bit-exactly.
"""

from __future__ import annotations

import numpy as np

# Purpose tags (arbitrary distinct ints, fixed forever for reproducibility).
TAG_DATA = 1
TAG_INIT = 2
TAG_DISC_INIT = 3
TAG_SELECT = 4
TAG_BATCH = 5


def rng_for(seed: int, *key: int) -> np.random.Generator:
    """Return a generator for `seed` specialized by a structured key."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=tuple(key)))
