"""Deterministic seed derivation shared by every module.

All randomness in the project flows from numpy SeedSequence so that any
artifact is a pure function of (master seed, structural indices), independent
of execution order or worker count.
"""

from __future__ import annotations

import numpy as np

# Stream tags keep sibling RNG streams (env, actions, ...) independent even
# when they share an episode seed.
ENV_STREAM = 1
ACTION_STREAM = 2
PERTURB_STREAM = 3
EXPERT_STREAM = 4
RND_STREAM = 5
TRAIN_STREAM = 6
COLLECT_STREAM = 7
EVAL_STREAM = 8


def derive_seed(*components: int) -> int:
    """Collapse integer components into a stable 64-bit seed."""
    ss = np.random.SeedSequence([int(c) & 0xFFFFFFFFFFFFFFFF for c in components])
    return int(ss.generate_state(1, np.uint64)[0])


def rng_from(*components: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*components))
