"""Ensembles of independent CSL trajectories.

Trajectories are integrated in fixed chunks of :data:`CHUNK` consecutive
indices.  Chunk boundaries never depend on the worker count, and chunk
results are concatenated in index order, so the output is byte-identical for
any number of workers.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
import multiprocessing
import os

import numpy as np

from .lattice import CslParams, Hamiltonian, Wavefunction
from .rng import streams
from .sde import CollapseStepper, TrajectoryConfig, integrate_batch

CHUNK = 32
WORKERS_ENV = "CSLKIT_WORKERS"


def default_workers() -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        n = int(env)
        if n < 1:
            raise ValueError(f"{WORKERS_ENV} must be >= 1")
        return n
    return os.cpu_count() or 1


def chunk_bounds(n_traj: int, chunk: int = CHUNK):
    return [(s, min(s + chunk, n_traj)) for s in range(0, n_traj, chunk)]


def map_chunks(fn, tasks, workers=None):
    """Apply ``fn`` to each task, in order; parallel when ``workers > 1``."""
    workers = default_workers() if workers is None else int(workers)
    if workers <= 1 or len(tasks) <= 1:
        return [fn(*t) for t in tasks]
    ctx = multiprocessing.get_context("fork")
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks)), mp_context=ctx) as ex:
        return list(ex.map(fn, *zip(*tasks)))


@dataclass
class EnsembleRecord:
    """Per-trajectory observable series plus final states.

    ``series[key]`` has shape ``(n_traj, n_samples)``; ``final`` has shape
    ``(n_traj, n_sites)``; ``snapshots`` (optional) ``(n_traj, n_samples, n_sites)``.
    """

    times: np.ndarray
    series: dict
    final: np.ndarray
    base_seed: int
    grid: object
    snapshots: np.ndarray | None = None

    @property
    def n_traj(self) -> int:
        return self.final.shape[0]

    def mean(self, key):
        return self.series[key].mean(axis=0)

    def stderr(self, key):
        v = self.series[key]
        return v.std(axis=0, ddof=1) / np.sqrt(v.shape[0])


def _run_chunk(psi0, H, params, config, regions, start, stop):
    stepper = CollapseStepper(psi0.grid, params, H, config.dt, config.splitting)
    rngs = streams(config.seed, start, stop)
    return integrate_batch(psi0.amps, stepper, config, rngs, H, regions)


def run_ensemble(psi0: Wavefunction, H: Hamiltonian | None, params: CslParams,
                 config: TrajectoryConfig, n_traj: int, regions=None,
                 workers: int | None = None) -> EnsembleRecord:
    """Run ``n_traj`` trajectories from ``psi0``; stream ``i`` of ``config.seed`` drives trajectory ``i``."""
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    tasks = [(psi0, H, params, config, regions, a, b) for a, b in chunk_bounds(n_traj)]
    parts = map_chunks(_run_chunk, tasks, workers)
    series = {k: np.concatenate([p[0][k] for p in parts]) for k in parts[0][0]}
    final = np.concatenate([p[1] for p in parts])
    snaps = None
    if config.store_snapshots:
        snaps = np.concatenate([p[2] for p in parts])
    return EnsembleRecord(config.times, series, final, config.seed, psi0.grid, snaps)
