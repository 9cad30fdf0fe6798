"""Reproducible per-trajectory random streams.

Trajectory ``i`` of an ensemble with base seed ``s`` draws from a Philox
(counter-based) generator keyed by ``SeedSequence(s, spawn_key=(i,))``.  The
stream depends only on ``(s, i)``, never on how trajectories are scheduled.
"""

import numpy as np


def trajectory_stream(base_seed: int, index: int) -> np.random.Generator:
    if base_seed < 0 or index < 0:
        raise ValueError("seed and stream index must be non-negative")
    ss = np.random.SeedSequence(int(base_seed), spawn_key=(int(index),))
    return np.random.Generator(np.random.Philox(ss))


def streams(base_seed: int, start: int, stop: int):
    return [trajectory_stream(base_seed, i) for i in range(start, stop)]
