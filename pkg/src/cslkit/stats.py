"""Monte-Carlo collapse statistics: Born-rule frequencies, martingale and
collapse-time checks for two-packet superpositions."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
import math

import numpy as np

from .ensemble import chunk_bounds, map_chunks
from .errors import GridMismatch, InsufficientData, Undecidable
from .lattice import CslParams, Grid1D, Wavefunction, two_gaussian_state
from .master import decay_rate
from .rng import streams
from .sde import NOISE_BLOCK, CollapseStepper

__all__ = [
    "Decision",
    "RegionSpec",
    "BornResult",
    "CollapseTimeStats",
    "classify",
    "is_collapsed",
    "born_grid",
    "born_experiment",
    "martingale_check",
    "collapse_time_stats",
]

UNDECIDED_LIMIT = 0.01


class Decision(str, Enum):
    LEFT = "left"
    RIGHT = "right"
    UNDECIDED = "undecided"


@dataclass(frozen=True)
class RegionSpec:
    """Two disjoint site sets and the decision threshold ``eps``."""

    left: np.ndarray
    right: np.ndarray
    eps: float = 0.01
    n_sites: int | None = None

    def __post_init__(self):
        left = np.unique(np.asarray(self.left, dtype=int))
        right = np.unique(np.asarray(self.right, dtype=int))
        if left.size == 0 or right.size == 0:
            raise ValueError("regions must be non-empty")
        if np.intersect1d(left, right).size:
            raise ValueError("regions must be disjoint")
        if not 0.0 < self.eps < 0.5:
            raise ValueError("eps must lie in (0, 0.5)")
        if self.n_sites is not None and max(left.max(), right.max()) >= self.n_sites:
            raise GridMismatch("region sites exceed the grid")
        left.setflags(write=False)
        right.setflags(write=False)
        object.__setattr__(self, "left", left)
        object.__setattr__(self, "right", right)

    @classmethod
    def halves(cls, grid: Grid1D, center: float = 0.0, eps: float = 0.01) -> "RegionSpec":
        """Split the lattice at ``center``: left is ``x < center``."""
        x = grid.x
        return cls(np.flatnonzero(x < center), np.flatnonzero(x >= center), eps,
                   grid.n_sites)

    def with_eps(self, eps: float) -> "RegionSpec":
        return RegionSpec(self.left, self.right, eps, self.n_sites)


def classify(p_left: float, eps: float) -> Decision:
    """Left if ``p_left >= 1 - eps``, Right if ``p_left <= eps`` (both inclusive)."""
    if p_left >= 1.0 - eps:
        return Decision.LEFT
    if p_left <= eps:
        return Decision.RIGHT
    return Decision.UNDECIDED


def is_collapsed(psi: Wavefunction, regions: RegionSpec) -> Decision:
    if regions.n_sites is not None and regions.n_sites != psi.grid.n_sites:
        raise GridMismatch("regions were built for a different grid")
    if max(regions.left.max(), regions.right.max()) >= psi.grid.n_sites:
        raise GridMismatch("region sites exceed the grid")
    return classify(psi.probability(regions.left), regions.eps)


@dataclass
class BornResult:
    """Outcome tallies of a Born-rule experiment.

    ``decisions`` holds +1 (left), -1 (right) or 0 (undecided) per trajectory;
    ``decision_times`` the first time the ``eps`` band was reached (NaN if never).
    """

    alpha2: float
    n_traj: int
    n_left: int
    n_right: int
    n_undecided: int
    eps: float
    t_max: float
    dt: float
    base_seed: int
    decisions: np.ndarray = field(repr=False)
    decision_times: np.ndarray = field(repr=False)
    hysteresis_violations: int = 0

    @property
    def f_left(self) -> float:
        return self.n_left / self.n_traj

    @property
    def f_right(self) -> float:
        return self.n_right / self.n_traj

    @property
    def se_left(self) -> float:
        f = self.f_left
        return math.sqrt(f * (1.0 - f) / self.n_traj)

    @property
    def se_right(self) -> float:
        f = self.f_right
        return math.sqrt(f * (1.0 - f) / self.n_traj)

    @property
    def undecided_fraction(self) -> float:
        return self.n_undecided / self.n_traj

    def born_band(self, n_sigma: float = 3.0) -> tuple:
        """``|alpha|^2 -+ n_sigma sqrt(|alpha|^2 (1 - |alpha|^2) / n)``."""
        half = n_sigma * math.sqrt(self.alpha2 * (1.0 - self.alpha2) / self.n_traj)
        return self.alpha2 - half, self.alpha2 + half

    def to_dict(self) -> dict:
        t = self.decision_times[np.isfinite(self.decision_times)]
        return {
            "alpha2": self.alpha2,
            "n_traj": self.n_traj,
            "n_left": self.n_left,
            "n_right": self.n_right,
            "n_undecided": self.n_undecided,
            "f_left": self.f_left,
            "f_right": self.f_right,
            "se_left": self.se_left,
            "se_right": self.se_right,
            "collapse_time_mean": float(t.mean()) if t.size else None,
            "collapse_time_std": float(t.std(ddof=1)) if t.size > 1 else None,
            "eps": self.eps,
            "t_max": self.t_max,
            "dt": self.dt,
            "base_seed": self.base_seed,
            "hysteresis_violations": self.hysteresis_violations,
        }

    def decision_log(self) -> dict:
        """Columns for the per-trajectory CSV log."""
        names = {1: "left", -1: "right", 0: "undecided"}
        return {
            "trajectory": np.arange(self.n_traj),
            "decision": np.array([names[int(d)] for d in self.decisions]),
            "decision_time": self.decision_times,
        }


def born_grid(separation: float, r_C: float) -> Grid1D:
    """Default lattice: ``dx = r_C/4``, power-of-two size, span >= 2 separation + 16 r_C."""
    dx = r_C / 4.0
    need = max(16.0 * r_C, 2.0 * separation + 16.0 * r_C)
    n = 1 << max(3, math.ceil(math.log2(need / dx)))
    return Grid1D(n, dx)


def _born_chunk(psi0, params, dt, max_steps, regions, seed, start, stop):
    grid = psi0.grid
    stepper = CollapseStepper(grid, params, None, dt)
    rngs = streams(seed, start, stop)
    B, n, dx, eps = stop - start, grid.n_sites, grid.dx, regions.eps
    psi = np.array(np.broadcast_to(psi0.amps, (B, n)))
    decision = np.zeros(B, dtype=int)
    when = np.full(B, np.nan)
    violated = np.zeros(B, dtype=bool)
    left = regions.left
    for s in range(max_steps):
        b = s % NOISE_BLOCK
        if b == 0:
            m = min(NOISE_BLOCK, max_steps - s)
            block = np.stack([r.standard_normal((m, n)) for r in rngs], axis=1)
        psi, _ = stepper.step(psi, block[b], step_index=s)
        pl = np.sum(psi[:, left].real ** 2 + psi[:, left].imag ** 2, axis=1) * dx
        # Hysteresis: a decided trajectory must never cross back past 2 eps.
        violated |= ((decision == 1) & (pl < 1.0 - 2.0 * eps)) | (
            (decision == -1) & (pl > 2.0 * eps))
        new = decision == 0
        dl = new & (pl >= 1.0 - eps)
        dr = new & (pl <= eps)
        decision[dl] = 1
        decision[dr] = -1
        when[dl | dr] = (s + 1) * dt
        if np.all(decision != 0):
            break
    return decision, when, violated


def born_experiment(alpha: complex, beta: complex, separation: float,
                    params: CslParams, n_traj: int, base_seed: int, *,
                    grid: Grid1D | None = None, dt: float | None = None,
                    eps: float = 0.01, t_max: float | None = None,
                    sigma: float | None = None, workers: int | None = None,
                    check_undecided: bool = True) -> BornResult:
    """Collapse ``alpha|G_left> + beta|G_right>`` (H = 0) ``n_traj`` times and tally outcomes.

    Packets have position spread ``sigma`` (default ``r_C/2``) and sit
    ``separation`` apart, symmetric about the origin.  Each trajectory runs
    until ``P_left`` enters an ``eps`` band or until ``t_max`` (default
    ``50 / Gamma(separation)``).  The default step is ``dt = 1e-3`` in units of
    the saturated rate.

    Raises
    ------
    Undecidable
        If more than 1% of trajectories are still undecided at ``t_max``; the
        result is attached as ``exc.result``.
    """
    a2 = abs(alpha) ** 2
    if abs(a2 + abs(beta) ** 2 - 1.0) > 1e-10:
        raise ValueError("|alpha|^2 + |beta|^2 must equal 1")
    if separation < 6.0 * params.r_C:
        raise ValueError("separation must be at least 6 r_C")
    if n_traj < 1:
        raise ValueError("n_traj must be positive")
    grid = grid or born_grid(separation, params.r_C)
    sigma = 0.5 * params.r_C if sigma is None else sigma
    rate = decay_rate(separation, params)
    sat = decay_rate(np.inf, params)
    dt = 1e-3 / sat if dt is None else dt
    t_max = 50.0 / rate if t_max is None else t_max
    max_steps = int(math.ceil(t_max / dt - 1e-9))
    regions = RegionSpec.halves(grid, 0.0, eps)
    psi0 = two_gaussian_state(grid, alpha, beta, separation, sigma)
    tasks = [(psi0, params, dt, max_steps, regions, base_seed, a, b)
             for a, b in chunk_bounds(n_traj)]
    parts = map_chunks(_born_chunk, tasks, workers)
    decisions = np.concatenate([p[0] for p in parts])
    times = np.concatenate([p[1] for p in parts])
    violated = np.concatenate([p[2] for p in parts])
    result = BornResult(
        alpha2=float(a2), n_traj=n_traj,
        n_left=int(np.sum(decisions == 1)), n_right=int(np.sum(decisions == -1)),
        n_undecided=int(np.sum(decisions == 0)), eps=eps, t_max=t_max, dt=dt,
        base_seed=base_seed, decisions=decisions, decision_times=times,
        hysteresis_violations=int(violated.sum()),
    )
    if check_undecided and result.undecided_fraction > UNDECIDED_LIMIT:
        exc = Undecidable(
            f"{result.n_undecided}/{n_traj} trajectories undecided at t_max={t_max:g}")
        exc.result = result
        raise exc
    return result


def _p_left_series(records):
    if hasattr(records, "series"):
        return np.asarray(records.series["p_left"], dtype=float)
    return np.asarray(records, dtype=float)


def martingale_check(records) -> float:
    """Worst standardized deviation of the ensemble mean of ``P_left`` from its start value.

    ``records`` is an ensemble record with a ``p_left`` series or an array
    ``(n_traj, n_samples)``.  A deviation with zero spread is 0 if exact and
    ``inf`` otherwise.  Values <= 3 pass.
    """
    P = _p_left_series(records)
    if P.ndim != 2 or P.shape[0] < 2 or P.shape[1] < 2:
        raise InsufficientData("need >= 2 trajectories and >= 2 samples")
    p0 = P[:, 0].mean()
    dev = np.abs(P[:, 1:].mean(axis=0) - p0)
    se = P[:, 1:].std(axis=0, ddof=1) / math.sqrt(P.shape[0])
    # Spread and deviation at round-off level count as exact.
    tol = 64 * np.finfo(float).eps * max(1.0, abs(p0))
    dev = np.where(dev > tol, dev, 0.0)
    se = np.where(se > tol, se, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, dev / np.where(se > 0, se, 1.0), np.where(dev > 0, np.inf, 0.0))
    return float(z.max())


@dataclass(frozen=True)
class CollapseTimeStats:
    mean: float
    median: float
    q1: float
    q3: float
    std: float
    n_decided: int
    n_total: int

    def rate_constant(self, rate: float) -> float:
        """``c`` in ``mean = c / rate``."""
        return self.mean * rate


def first_passage_times(times, p_left, eps):
    """First time each row of ``p_left`` enters an ``eps`` band (NaN if never)."""
    hit = (p_left >= 1.0 - eps) | (p_left <= eps)
    first = np.argmax(hit, axis=1)
    out = np.asarray(times, dtype=float)[first]
    out[~hit.any(axis=1)] = np.nan
    return out


def collapse_time_stats(records, regions: RegionSpec | None = None,
                        min_decided: float = 0.9) -> CollapseTimeStats:
    """Summary of first-decision times.

    ``records`` may be a :class:`BornResult`, an ensemble record with a
    ``p_left`` series (``regions`` supplies ``eps``), or an array of decision
    times with NaN marking undecided trajectories.
    """
    if isinstance(records, BornResult):
        t = records.decision_times
    elif hasattr(records, "series"):
        if regions is None:
            raise ValueError("regions are required to extract first-passage times")
        t = first_passage_times(records.times, _p_left_series(records), regions.eps)
    else:
        t = np.asarray(records, dtype=float)
    n = t.size
    if n == 0:
        raise InsufficientData("empty ensemble")
    done = t[np.isfinite(t)]
    if done.size < min_decided * n or done.size == 0:
        raise InsufficientData(f"only {done.size}/{n} trajectories decided")
    q1, med, q3 = np.percentile(done, [25, 50, 75])
    return CollapseTimeStats(float(done.mean()), float(med), float(q1), float(q3),
                             float(done.std(ddof=1)) if done.size > 1 else 0.0,
                             int(done.size), int(n))
