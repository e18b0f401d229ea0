"""Fan a single run seed out to per-stage and per-item seeds.

A derived seed is ``SeedSequence([seed, stage, *index]).generate_state(1)[0]``,
so it depends only on the run seed, the stage counter below and the item
index, never on execution order or worker count.
"""

from __future__ import annotations

import numpy as np

WORLD = 0
EPISODE = 1
EXTRACT = 2
SPLIT = 3
AUGMENT = 4
TRAIN = 5
INFER = 6
PLAN = 7


def derive_seed(seed: int, stage: int, *index: int) -> int:
    ss = np.random.SeedSequence([int(seed), int(stage), *(int(i) for i in index)])
    return int(ss.generate_state(1)[0])


def derive_rng(seed: int, stage: int, *index: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, stage, *index))
