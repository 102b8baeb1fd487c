"""Named random streams derived from one integer seed.

Every consumer asks for ``stream(seed, name, *keys)``; the keys make streams
counter-based, e.g. the dropout mask of sample 17 in epoch 3 is
``stream(seed, "dropout", 3, 17)`` no matter how batches are scheduled.
"""
from __future__ import annotations

import numpy as np

_NAMES = {"init": 0, "shuffle": 1, "dropout": 2, "synth": 3, "split": 4}


def stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    try:
        tag = _NAMES[name]
    except KeyError:
        raise ValueError(f"unknown random stream {name!r}") from None
    return np.random.default_rng([int(seed), tag, *(int(k) for k in keys)])
