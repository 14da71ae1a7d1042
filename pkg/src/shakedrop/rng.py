"""Seeded, splittable random streams."""

from __future__ import annotations

import numpy as np

# stream tags; kept small and stable so resolved configs reproduce runs
INIT = 1
SHUFFLE = 2
AUGMENT = 3
MIXUP = 4
REGULARIZER = 5
DATA = 6


class RandomStreams:
    """Derives independent generators from a global seed and an integer key.

    ``streams.generator(REGULARIZER, block, unit, step, replica)`` always
    returns the same stream for the same key, and streams for distinct keys
    are statistically independent (``numpy.random.SeedSequence`` spawn keys).
    """

    def __init__(self, seed: int):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)

    def generator(self, *key: int) -> np.random.Generator:
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=tuple(int(k) for k in key))
        return np.random.Generator(np.random.PCG64(seq))

    def __repr__(self) -> str:
        return f"RandomStreams(seed={self.seed})"
