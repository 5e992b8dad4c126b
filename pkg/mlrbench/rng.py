"""Named random streams derived from one 64-bit master seed.

Each stream is a Philox (counter-based) generator keyed by the master seed and a
spawn key ``(stream id, *extra)``, so drawing more solver noise never shifts the
data streams and vice versa.
"""
from typing import Tuple

import numpy as np

STREAMS = {
    "data-x": 0,
    "data-noise": 1,
    "data-latent": 2,
    "init": 3,
    "solver-noise": 4,
    "solver-latent": 5,
    "truth": 6,
    "participation": 7,
    "check": 8,
    "power": 9,
}

SEED_MASK = (1 << 64) - 1


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    if name not in STREAMS:
        raise KeyError(f"Unknown random stream '{name}'")
    key: Tuple[int, ...] = (STREAMS[name],) + tuple(int(e) for e in extra)
    seq = np.random.SeedSequence(int(seed) & SEED_MASK, spawn_key=key)
    return np.random.Generator(np.random.Philox(seq))
