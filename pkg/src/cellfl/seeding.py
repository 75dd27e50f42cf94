"""Independent random streams derived from one master seed.

Each stream is keyed by (purpose, round, user) through numpy's SeedSequence
spawn keys, so the participant draw of round t never shares state with the
SGD shuffling of any user, and adding a user or a round does not perturb
the streams of the others.
"""

from __future__ import annotations

import numpy as np

_DATASET, _PARTITION, _INIT, _PARTICIPANTS, _TRAIN = range(5)


class SeedStreams:
    def __init__(self, seed: int):
        if seed < 0:
            raise ValueError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed)

    def _rng(self, *key: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=key))

    def dataset(self) -> np.random.Generator:
        return self._rng(_DATASET)

    def partition(self) -> np.random.Generator:
        return self._rng(_PARTITION)

    def init(self) -> np.random.Generator:
        return self._rng(_INIT)

    def participants(self, rnd: int) -> np.random.Generator:
        return self._rng(_PARTICIPANTS, rnd)

    def training(self, rnd: int, user: int) -> np.random.Generator:
        return self._rng(_TRAIN, rnd, user)
