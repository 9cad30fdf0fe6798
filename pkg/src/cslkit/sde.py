"""Euler-Maruyama integration of the single-particle CSL equation on a lattice.

One step (Strang splitting, ``splitting="strang"``)::

    psi <- exp(-i T dt / 2 hbar) psi                      (Fourier space)
    psi <- exp(-i V dt / hbar) (1 + (A - <A>) - D dt) psi   (position space)
    psi <- exp(-i T dt / 2 hbar) psi
    psi <- psi / ||psi||

``A`` is the noise increment smeared by the Gaussian kernel and ``D`` the
collapse drift potential.  With ``splitting="euler"`` the Hamiltonian enters
as the plain Euler term ``-i H psi dt / hbar`` instead.

All heavy lifting happens in :class:`CollapseStepper`, which advances a batch
``(B, n)`` of trajectories at once; the public single-state functions are
thin wrappers around it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np

from .errors import GridMismatch, NonFinite, StepTooLarge
from .lattice import (
    CslParams,
    Grid1D,
    Hamiltonian,
    Wavefunction,
    _apply_h,
    convolve,
    gaussian_kernel,
    kernel_overlap,
)
from .rng import trajectory_stream

__all__ = [
    "NoiseField",
    "TrajectoryConfig",
    "TrajectoryRecord",
    "CollapseStepper",
    "sample_noise",
    "smeared_noise_potential",
    "collapse_drift_potential",
    "csl_step",
    "run_trajectory",
    "OBSERVABLES",
]

#: Observables understood by the trajectory and ensemble runners.  Each maps
#: to the series keys it produces.
OBSERVABLES = {
    "norm": ("norm",),
    "position-mean": ("x_mean",),
    "position-variance": ("x_var",),
    "energy": ("energy",),
    "region-probabilities": ("p_left", "p_right"),
    "coherence": ("coherence",),
}

MAX_NORM_DRIFT = 1e-2
NOISE_BLOCK = 64


@dataclass(frozen=True)
class NoiseField:
    """Wiener increments for one step, variance ``dt/dx`` per site."""

    grid: Grid1D
    dW: np.ndarray = field(repr=False)
    dt: float = 0.0


def sample_noise(grid: Grid1D, dt: float, rng: np.random.Generator) -> NoiseField:
    if not dt > 0:
        raise ValueError("dt must be positive")
    dW = rng.standard_normal(grid.n_sites) * math.sqrt(dt / grid.dx)
    return NoiseField(grid, dW, dt)


def smeared_noise_potential(psi: Wavefunction, noise: NoiseField, kernel,
                            params: CslParams):
    """Return ``(A, <A>)`` with ``A = sqrt(gamma) (m/m0) (g * dW)``."""
    if noise.grid != psi.grid:
        raise GridMismatch("noise and wavefunction grids differ")
    dx = psi.grid.dx
    A = math.sqrt(params.gamma) * params.mass_ratio * convolve(noise.dW, kernel, dx)
    return A, float(np.sum(psi.density * A) * dx)


def collapse_drift_potential(psi: Wavefunction, kernel, params: CslParams) -> np.ndarray:
    """Collapse drift ``D(q) = (gamma m^2 / 2 m0^2) sum_x [g(q-x) - gbar(x)]^2 dx``.

    Evaluated through the kernel autocorrelation ``K``::

        D = (gamma m^2 / 2 m0^2) [K(0) - 2 (K*rho)(q) + <K*rho>]
    """
    grid = psi.grid
    if len(kernel) != grid.n_sites:
        raise GridMismatch("kernel and wavefunction grids differ")
    K = kernel_overlap(grid, np.asarray(kernel))
    rho = psi.density
    Kr = convolve(rho, K, grid.dx)
    D = 0.5 * params.gamma * params.mass_ratio**2 * (
        K[0] - 2.0 * Kr + np.sum(rho * Kr) * grid.dx)
    # Round-off can push the fixed point of a single-site state a hair below 0.
    return np.maximum(D, 0.0)


@dataclass(frozen=True)
class TrajectoryConfig:
    """Stepping and recording options for one trajectory or an ensemble.

    ``seed`` is the base seed; trajectory ``stream`` (default 0) of that seed
    is the one :func:`run_trajectory` integrates.  ``splitting`` is
    ``"strang"`` (exact kinetic half-steps around the position-space update)
    or ``"euler"``.
    """

    dt: float
    n_steps: int
    seed: int = 0
    snapshot_stride: int = 1
    observables: tuple = ("norm",)
    store_snapshots: bool = False
    splitting: str = "strang"
    stream: int = 0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if int(self.n_steps) != self.n_steps or self.n_steps < 0:
            raise ValueError("n_steps must be a non-negative integer")
        if int(self.snapshot_stride) != self.snapshot_stride or self.snapshot_stride < 1:
            raise ValueError("snapshot_stride must be a positive integer")
        if self.splitting not in ("strang", "euler"):
            raise ValueError(f"unknown splitting {self.splitting!r}")
        unknown = set(self.observables) - set(OBSERVABLES)
        if unknown:
            raise ValueError(f"unknown observables {sorted(unknown)}")
        object.__setattr__(self, "observables", tuple(self.observables))

    @property
    def sample_steps(self) -> np.ndarray:
        return np.arange(0, self.n_steps + 1, self.snapshot_stride)

    @property
    def times(self) -> np.ndarray:
        return self.sample_steps * self.dt

    def series_keys(self):
        return [k for o in self.observables for k in OBSERVABLES[o]]


@dataclass
class TrajectoryRecord:
    times: np.ndarray
    series: dict
    final: Wavefunction
    seed: int
    stream: int = 0
    snapshots: np.ndarray | None = None

    def to_csv(self, path, header=None):
        from .io import write_csv
        cols = {"time": self.times}
        cols.update(_expand_complex(self.series))
        write_csv(path, cols, header)


def _expand_complex(series):
    out = {}
    for k, v in series.items():
        v = np.asarray(v)
        if np.iscomplexobj(v):
            out[f"{k}_re"] = v.real
            out[f"{k}_im"] = v.imag
        else:
            out[k] = v
    return out


class CollapseStepper:
    """Batched CSL stepper for fixed ``(grid, params, H, dt)``.

    Parameters
    ----------
    grid, params : lattice and collapse constants.
    H : Hamiltonian or None
        ``None`` switches the unitary part off.
    dt : float
    splitting : {"strang", "euler"}
    """

    def __init__(self, grid: Grid1D, params: CslParams, H: Hamiltonian | None,
                 dt: float, splitting: str = "strang"):
        if H is not None and H.grid != grid:
            raise GridMismatch("Hamiltonian grid differs from state grid")
        if params.dim != 1:
            raise ValueError("lattice dynamics run in one dimension (params.dim must be 1)")
        self.grid, self.params, self.H, self.dt = grid, params, H, float(dt)
        self.splitting = splitting
        n, dx = grid.n_sites, grid.dx
        g = gaussian_kernel(grid, params.r_C, 1)
        K = kernel_overlap(grid, g)
        self.g_hat = np.fft.rfft(g) * dx
        self.K_hat = np.fft.rfft(K) * dx
        self.K0 = K[0]
        self.noise_amp = math.sqrt(params.gamma) * params.mass_ratio
        self.drift_amp = 0.5 * params.gamma * params.mass_ratio**2
        self.dW_scale = math.sqrt(self.dt / dx)
        self.kin_half = None
        self.pot_phase = None
        if H is not None and splitting == "strang":
            self.kin_half = np.exp(-0.5j * H.dispersion * self.dt / H.hbar)
            if H.potential is not None:
                self.pot_phase = np.exp(-1j * H.potential * self.dt / H.hbar)
        self.n = n

    def _kinetic(self, psi):
        return np.fft.ifft(self.kin_half * np.fft.fft(psi, axis=-1), axis=-1)

    def potentials(self, rho, dW):
        """Return ``(A - <A>, D)`` for densities ``rho`` and increments ``dW``."""
        n, dx = self.n, self.grid.dx
        A = self.noise_amp * np.fft.irfft(np.fft.rfft(dW, axis=-1) * self.g_hat, n=n, axis=-1)
        A -= np.sum(rho * A, axis=-1, keepdims=True) * dx
        Kr = np.fft.irfft(np.fft.rfft(rho, axis=-1) * self.K_hat, n=n, axis=-1)
        D = self.drift_amp * (self.K0 - 2.0 * Kr + np.sum(rho * Kr, axis=-1, keepdims=True) * dx)
        return A, D

    def step(self, psi, xi, step_index=None):
        """Advance ``psi`` (``(B, n)``) by one step driven by standard normals ``xi``.

        Returns the renormalized state and the pre-renormalization norm drift
        ``| ||psi'|| - 1 |`` per trajectory.
        """
        dx = self.grid.dx
        dW = xi * self.dW_scale
        if self.kin_half is not None:
            psi = self._kinetic(psi)
        rho = psi.real**2 + psi.imag**2
        A, D = self.potentials(rho, dW)
        update = psi * (1.0 + A - D * self.dt)
        if self.H is not None and self.splitting == "euler":
            update = update - 1j * self.dt / self.H.hbar * _apply_h(self.H, psi)
        psi = update
        if self.pot_phase is not None:
            psi = psi * self.pot_phase
        if self.kin_half is not None:
            psi = self._kinetic(psi)
        norm = np.sqrt(np.sum(psi.real**2 + psi.imag**2, axis=-1) * dx)
        if not np.all(np.isfinite(norm)):
            raise NonFinite("non-finite amplitudes", step_index)
        drift = np.abs(norm - 1.0)
        worst = float(drift.max())
        if worst >= MAX_NORM_DRIFT:
            raise StepTooLarge(
                f"pre-renormalization norm drift {worst:.3g} exceeds {MAX_NORM_DRIFT}",
                step_index)
        return psi / norm[:, None], drift


def csl_step(psi: Wavefunction, H: Hamiltonian | None, params: CslParams,
             noise: NoiseField, dt: float, splitting: str = "strang") -> Wavefunction:
    """Advance one state by a single step using the supplied noise increments."""
    if noise.grid != psi.grid:
        raise GridMismatch("noise and wavefunction grids differ")
    stepper = CollapseStepper(psi.grid, params, H, dt, splitting)
    xi = noise.dW[None, :] / stepper.dW_scale
    out, _ = stepper.step(psi.amps[None, :], xi)
    return Wavefunction(psi.grid, out[0])


def measure(psi, keys, grid, H=None, regions=None):
    """Evaluate series ``keys`` on a batch of states; returns ``{key: (B,)}``."""
    dx = grid.dx
    out = {}
    rho = psi.real**2 + psi.imag**2
    if "norm" in keys:
        out["norm"] = np.sqrt(np.sum(rho, axis=-1) * dx)
    if "x_mean" in keys or "x_var" in keys:
        x = grid.x
        mean = np.sum(rho * x, axis=-1) * dx
        if "x_mean" in keys:
            out["x_mean"] = mean
        if "x_var" in keys:
            out["x_var"] = np.sum(rho * x**2, axis=-1) * dx - mean**2
    if "energy" in keys:
        if H is None:
            raise ValueError("energy observable requires a Hamiltonian")
        out["energy"] = np.real(np.sum(psi.conj() * _apply_h(H, psi), axis=-1)) * dx
    if "p_left" in keys or "p_right" in keys or "coherence" in keys:
        if regions is None:
            raise ValueError("region observables require a RegionSpec")
        if "p_left" in keys:
            out["p_left"] = np.sum(rho[:, regions.left], axis=-1) * dx
            out["p_right"] = np.sum(rho[:, regions.right], axis=-1) * dx
        if "coherence" in keys:
            a = np.sum(psi[:, regions.left], axis=-1) * dx
            b = np.sum(psi[:, regions.right], axis=-1) * dx
            out["coherence"] = a * np.conj(b)
    return out


def integrate_batch(psi0, stepper: CollapseStepper, config: TrajectoryConfig,
                    streams, H=None, regions=None):
    """Integrate a batch of trajectories, one RNG per row.

    Returns ``(series, final, snapshots)`` where ``series[key]`` has shape
    ``(B, n_samples)``.
    """
    grid = stepper.grid
    B, n = len(streams), grid.n_sites
    psi = np.array(np.broadcast_to(psi0, (B, n)), dtype=complex)
    keys = config.series_keys()
    sample_steps = config.sample_steps
    n_samples = len(sample_steps)
    series = {k: np.empty((B, n_samples), dtype=complex if k == "coherence" else float)
              for k in keys}
    snaps = np.empty((B, n_samples, n), dtype=complex) if config.store_snapshots else None

    def record(j):
        vals = measure(psi, keys, grid, H, regions)
        for k in keys:
            series[k][:, j] = vals[k]
        if snaps is not None:
            snaps[:, j] = psi

    record(0)
    j = 1
    block = None
    for s in range(config.n_steps):
        b = s % NOISE_BLOCK
        if b == 0:
            m = min(NOISE_BLOCK, config.n_steps - s)
            block = np.stack([rng.standard_normal((m, n)) for rng in streams], axis=1)
        psi, _ = stepper.step(psi, block[b], step_index=s)
        if j < n_samples and s + 1 == sample_steps[j]:
            record(j)
            j += 1
    return series, psi, snaps


def run_trajectory(psi0: Wavefunction, H: Hamiltonian | None, params: CslParams,
                   config: TrajectoryConfig, regions=None) -> TrajectoryRecord:
    """Integrate one trajectory using stream ``config.stream`` of ``config.seed``."""
    if H is not None and H.grid != psi0.grid:
        raise GridMismatch("Hamiltonian grid differs from state grid")
    stepper = CollapseStepper(psi0.grid, params, H, config.dt, config.splitting)
    rng = trajectory_stream(config.seed, config.stream)
    series, final, snaps = integrate_batch(psi0.amps, stepper, config, [rng], H, regions)
    return TrajectoryRecord(
        times=config.times,
        series={k: v[0] for k, v in series.items()},
        final=Wavefunction(psi0.grid, final[0]),
        seed=config.seed,
        stream=config.stream,
        snapshots=None if snaps is None else snaps[0],
    )
