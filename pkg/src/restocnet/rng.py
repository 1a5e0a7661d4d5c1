"""Keyed, counter-based random streams.

Every stochastic phase draws from a Philox generator whose key is derived
from ``(seed, phase, *indices)``.  A stream therefore depends only on *what*
is being simulated (which image, which layer, which iteration/step) and never
on the order in which work is scheduled, so results are identical for any
worker count.
"""

from __future__ import annotations

import numpy as np

# Phase tags.  Values are part of the reproducibility contract; never reorder.
ENCODE = 1
INIT = 2
DROPOUT = 3
STDP = 4
CLASSIFIER_INIT = 5
CLASSIFIER_SHUFFLE = 6
CLASSIFIER_DROPOUT = 7
FCSNN_INIT = 8
FCSNN_STDP = 9
FCSNN_ENCODE = 10


def stream(seed: int, phase: int, *key: int) -> np.random.Generator:
    """Return the generator for ``(seed, phase, *key)``.

    All key components must be non-negative integers.
    """
    words = [int(seed), int(phase), *(int(k) for k in key)]
    if any(w < 0 for w in words):
        raise ValueError(f"stream key components must be non-negative: {words}")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))
