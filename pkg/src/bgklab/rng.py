"""Reproducible random streams keyed by (base seed, replica index, ...)."""

from __future__ import annotations

import numpy as np


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent Philox stream for the key path (seed, *key).

    Philox is counter-based, so streams for distinct keys never overlap and a
    replica's draws do not depend on how many other replicas run or in which order.
    """
    ss = np.random.SeedSequence([int(seed), *(int(k) for k in key)])
    return np.random.Generator(np.random.Philox(ss))
