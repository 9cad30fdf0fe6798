"""Periodic 1D lattice substrate: grids, smearing kernels, states, Hamiltonians.

Everything here is immutable and side-effect free.  Arrays handed out by the
dataclasses are flagged read-only so they can be shared between workers.

Kernels are indexed by lattice *displacement*: entry ``j`` holds the value at
the minimum-image distance ``j*dx`` (wrapping past ``n/2`` to negative
displacements).  With that layout ``convolve(f, g)`` is the plain circular
convolution ``sum_i g[q - i] f[i] dx``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np

from .errors import GridMismatch, KernelUnresolvable

__all__ = [
    "Grid1D",
    "CslParams",
    "Wavefunction",
    "Hamiltonian",
    "gaussian_kernel",
    "kernel_overlap",
    "convolve",
    "lambda_from_gamma",
    "gamma_from_lambda",
    "apply_hamiltonian",
    "gaussian_packet",
    "two_gaussian_state",
]


def _frozen(a):
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Grid1D:
    """Uniform periodic lattice of ``n_sites`` points spaced by ``dx``.

    ``x_min`` defaults to ``-n_sites*dx/2`` so the origin sits on site
    ``n_sites // 2``.
    """

    n_sites: int
    dx: float
    x_min: float | None = None

    def __post_init__(self):
        if int(self.n_sites) != self.n_sites or self.n_sites < 8:
            raise ValueError(f"n_sites must be an integer >= 8, got {self.n_sites}")
        if not self.dx > 0:
            raise ValueError(f"dx must be positive, got {self.dx}")
        object.__setattr__(self, "n_sites", int(self.n_sites))
        object.__setattr__(self, "dx", float(self.dx))
        if self.x_min is None:
            object.__setattr__(self, "x_min", -0.5 * self.n_sites * self.dx)
        else:
            object.__setattr__(self, "x_min", float(self.x_min))

    @property
    def span(self) -> float:
        return self.n_sites * self.dx

    @property
    def x(self) -> np.ndarray:
        return self.x_min + self.dx * np.arange(self.n_sites)

    @property
    def displacement(self) -> np.ndarray:
        """Minimum-image displacement of each lattice offset ``j``."""
        j = np.arange(self.n_sites)
        j = np.where(j > self.n_sites // 2, j - self.n_sites, j)
        return j * self.dx

    @property
    def k(self) -> np.ndarray:
        """Angular wavenumbers in FFT order."""
        return 2.0 * np.pi * np.fft.fftfreq(self.n_sites, d=self.dx)

    def min_image(self, d):
        """Wrap separations into ``[-span/2, span/2)``."""
        L = self.span
        return (np.asarray(d) + 0.5 * L) % L - 0.5 * L

    def site_of(self, x: float) -> int:
        return int(round((x - self.x_min) / self.dx)) % self.n_sites

    def interval(self, lo: float, hi: float) -> np.ndarray:
        """Site indices with ``lo <= x < hi`` (no wrapping)."""
        x = self.x
        return np.flatnonzero((x >= lo) & (x < hi))


@dataclass(frozen=True)
class CslParams:
    """Collapse-model constants.

    Attributes
    ----------
    gamma : float
        Collapse coupling, units length**dim / time.
    r_C : float
        Correlation (smearing) length.
    m0 : float
        Reference mass.
    m : float
        Particle mass.
    hbar : float
        Action constant.
    dim : int
        Spatial dimension used by the rate formulas.
    """

    gamma: float
    r_C: float
    m0: float = 1.0
    m: float = 1.0
    hbar: float = 1.0
    dim: int = 1

    def __post_init__(self):
        # gamma == 0 is accepted: it is the Schroedinger limit used throughout
        # the test-suite.
        if not self.gamma >= 0:
            raise ValueError(f"gamma must be non-negative, got {self.gamma}")
        for name in ("r_C", "m0", "m", "hbar"):
            v = getattr(self, name)
            if not v > 0:
                raise ValueError(f"{name} must be positive, got {v}")
        if self.dim not in (1, 2, 3):
            raise ValueError(f"dim must be 1, 2 or 3, got {self.dim}")

    @classmethod
    def from_lambda(cls, lam, r_C, **kw):
        dim = kw.get("dim", 1)
        return cls(gamma=gamma_from_lambda(lam, r_C, dim), r_C=r_C, **kw)

    @property
    def lam(self) -> float:
        """Collapse rate for a reference-mass particle, ``gamma/(4 pi r_C^2)^(dim/2)``."""
        return lambda_from_gamma(self.gamma, self.r_C, self.dim)

    @property
    def mass_ratio(self) -> float:
        return self.m / self.m0

    def replace(self, **changes) -> "CslParams":
        kw = dict(gamma=self.gamma, r_C=self.r_C, m0=self.m0, m=self.m,
                  hbar=self.hbar, dim=self.dim)
        if "lam" in changes:
            lam = changes.pop("lam")
            kw.update(changes)
            kw["gamma"] = gamma_from_lambda(lam, kw["r_C"], kw["dim"])
        else:
            kw.update(changes)
        return CslParams(**kw)


@dataclass(frozen=True)
class Wavefunction:
    """Complex amplitudes on a grid with ``sum |psi|^2 dx == 1``.

    The constructor checks the norm; use :meth:`normalized` to build one from
    arbitrary (non-zero) amplitudes.
    """

    grid: Grid1D
    amps: np.ndarray = field(repr=False)

    def __post_init__(self):
        a = np.asarray(self.amps, dtype=complex)
        if a.shape != (self.grid.n_sites,):
            raise GridMismatch(
                f"amplitude shape {a.shape} does not match grid of {self.grid.n_sites} sites")
        if not np.all(np.isfinite(a)):
            raise ValueError("amplitudes must be finite")
        norm = float(np.sum(np.abs(a) ** 2) * self.grid.dx)
        if abs(norm - 1.0) > 1e-10:
            raise ValueError(f"wavefunction not normalized (norm^2 = {norm!r})")
        object.__setattr__(self, "amps", _frozen(a))

    @classmethod
    def normalized(cls, grid: Grid1D, amps) -> "Wavefunction":
        a = np.asarray(amps, dtype=complex)
        n2 = float(np.sum(np.abs(a) ** 2) * grid.dx)
        if not n2 > 0 or not math.isfinite(n2):
            raise ValueError("cannot normalize a zero or non-finite wavefunction")
        return cls(grid, a / math.sqrt(n2))

    @property
    def density(self) -> np.ndarray:
        return np.abs(self.amps) ** 2

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.density) * self.grid.dx))

    def inner(self, other: "Wavefunction") -> complex:
        """``<self|other>``."""
        if other.grid != self.grid:
            raise GridMismatch("wavefunctions live on different grids")
        return complex(np.vdot(self.amps, other.amps) * self.grid.dx)

    def probability(self, sites) -> float:
        return float(np.sum(self.density[sites]) * self.grid.dx)


@dataclass(frozen=True)
class Hamiltonian:
    """Single-particle lattice Hamiltonian ``p^2/2m + V(x)``.

    ``kinetic`` selects the discretization of the Laplacian: ``"spectral"``
    uses the exact dispersion ``hbar^2 k^2 / 2m``; ``"stencil"`` the 3-point
    finite difference, whose dispersion is ``hbar^2 (1 - cos k dx) / (m dx^2)``.
    Both are diagonal in Fourier space, which is what the split-step
    integrators exploit.
    """

    grid: Grid1D
    kind: str = "free"
    m: float = 1.0
    hbar: float = 1.0
    potential: np.ndarray | None = field(default=None, repr=False)
    kinetic: str = "spectral"
    omega: float | None = None

    def __post_init__(self):
        if self.kind not in ("free", "harmonic", "external-potential"):
            raise ValueError(f"unknown Hamiltonian kind {self.kind!r}")
        if self.kinetic not in ("spectral", "stencil"):
            raise ValueError(f"unknown kinetic scheme {self.kinetic!r}")
        if not self.m > 0 or not self.hbar > 0:
            raise ValueError("mass and hbar must be positive")
        if self.potential is not None:
            v = np.asarray(self.potential, dtype=float)
            if v.shape != (self.grid.n_sites,):
                raise GridMismatch("potential shape does not match grid")
            object.__setattr__(self, "potential", _frozen(v))

    @classmethod
    def free(cls, grid, m=1.0, hbar=1.0, kinetic="spectral"):
        return cls(grid, "free", m, hbar, None, kinetic)

    @classmethod
    def harmonic(cls, grid, omega, m=1.0, hbar=1.0, center=0.0, kinetic="spectral"):
        d = grid.min_image(grid.x - center)
        v = 0.5 * m * omega**2 * d**2
        return cls(grid, "harmonic", m, hbar, v, kinetic, float(omega))

    @classmethod
    def external(cls, grid, potential, m=1.0, hbar=1.0, kinetic="spectral"):
        return cls(grid, "external-potential", m, hbar, potential, kinetic)

    @property
    def dispersion(self) -> np.ndarray:
        """Kinetic energy of each Fourier mode (FFT order)."""
        k = self.grid.k
        if self.kinetic == "spectral":
            return self.hbar**2 * k**2 / (2.0 * self.m)
        dx = self.grid.dx
        return self.hbar**2 * (1.0 - np.cos(k * dx)) / (self.m * dx**2)

    def matrix(self) -> np.ndarray:
        """Dense ``n x n`` matrix of the operator in the site basis."""
        n = self.grid.n_sites
        F = np.fft.fft(np.eye(n), axis=0)
        T = np.fft.ifft(self.dispersion[:, None] * F, axis=0)
        T = 0.5 * (T + T.conj().T)
        if self.potential is not None:
            T = T + np.diag(self.potential)
        return T


def gaussian_kernel(grid: Grid1D, r_C: float, dim: int = 1) -> np.ndarray:
    """Smearing function ``(2 pi r_C^2)^(-dim/2) exp(-x^2 / 2 r_C^2)``.

    Sampled at the minimum-image displacement of every lattice offset.  For
    ``dim > 1`` only the radial profile along the line is returned; the
    prefactor is still the ``dim``-dimensional one.

    Raises
    ------
    KernelUnresolvable
        If ``r_C < 2 dx``.
    """
    if r_C < 2.0 * grid.dx:
        raise KernelUnresolvable(
            f"r_C={r_C} is below two lattice spacings (dx={grid.dx})")
    d = grid.displacement
    pref = (2.0 * np.pi * r_C**2) ** (-dim / 2.0)
    return pref * np.exp(-d**2 / (2.0 * r_C**2))


def kernel_overlap(grid: Grid1D, kernel: np.ndarray) -> np.ndarray:
    """Lattice autocorrelation ``K(d) = sum_z g(z) g(z - d) dx``.

    In the continuum (dim=1) this is ``(4 pi r_C^2)^(-1/2) exp(-d^2/4 r_C^2)``.
    """
    return convolve(kernel, kernel[(-np.arange(grid.n_sites)) % grid.n_sites], grid.dx)


def convolve(field, kernel, dx: float, method: str = "fft"):
    """Circular convolution ``out[q] = sum_i kernel[q - i] field[i] dx``.

    ``field`` may carry leading batch axes; the kernel is broadcast over them.
    Real inputs give a real result.
    """
    field = np.asarray(field)
    kernel = np.asarray(kernel)
    if kernel.ndim != 1 or field.shape[-1] != kernel.shape[0]:
        raise GridMismatch(
            f"field of length {field.shape[-1]} vs kernel of length {kernel.shape[-1]}")
    n = kernel.shape[0]
    real = not (np.iscomplexobj(field) or np.iscomplexobj(kernel))
    if method == "direct":
        idx = (np.arange(n)[:, None] - np.arange(n)[None, :]) % n
        out = field @ kernel[idx].T * dx
        return out
    if method != "fft":
        raise ValueError(f"unknown convolution method {method!r}")
    if real:
        return np.fft.irfft(np.fft.rfft(field) * np.fft.rfft(kernel), n=n) * dx
    return np.fft.ifft(np.fft.fft(field) * np.fft.fft(kernel)) * dx


def lambda_from_gamma(gamma: float, r_C: float, dim: int = 3) -> float:
    """Collapse rate ``gamma / (4 pi r_C^2)^(dim/2)``."""
    if not (gamma >= 0 and r_C > 0):
        raise ValueError("gamma must be non-negative and r_C positive")
    return gamma / (4.0 * math.pi * r_C**2) ** (dim / 2.0)


def gamma_from_lambda(lam: float, r_C: float, dim: int = 3) -> float:
    if not (lam >= 0 and r_C > 0):
        raise ValueError("lambda must be non-negative and r_C positive")
    return lam * (4.0 * math.pi * r_C**2) ** (dim / 2.0)


def _apply_h(H: Hamiltonian, amps: np.ndarray) -> np.ndarray:
    out = np.fft.ifft(H.dispersion * np.fft.fft(amps, axis=-1), axis=-1)
    if H.potential is not None:
        out = out + H.potential * amps
    return out


def apply_hamiltonian(H: Hamiltonian, psi: Wavefunction) -> np.ndarray:
    """Return the site field ``H psi``."""
    if psi.grid != H.grid:
        raise GridMismatch("Hamiltonian and wavefunction grids differ")
    return _apply_h(H, psi.amps)


def energy(H: Hamiltonian, psi: Wavefunction) -> float:
    return float(np.real(np.vdot(psi.amps, apply_hamiltonian(H, psi))) * psi.grid.dx)


def gaussian_packet(grid: Grid1D, center: float = 0.0, sigma: float = 1.0,
                    k0: float = 0.0) -> Wavefunction:
    """Gaussian with position spread ``sigma`` (std of ``|psi|^2``) and mean wavenumber ``k0``."""
    d = grid.min_image(grid.x - center)
    amps = np.exp(-d**2 / (4.0 * sigma**2) + 1j * k0 * d)
    return Wavefunction.normalized(grid, amps)


def two_gaussian_state(grid: Grid1D, alpha: complex, beta: complex,
                       separation: float, sigma: float,
                       center: float = 0.0) -> Wavefunction:
    """``alpha |G_left> + beta |G_right>`` with packets ``separation`` apart."""
    gl = gaussian_packet(grid, center - 0.5 * separation, sigma)
    gr = gaussian_packet(grid, center + 0.5 * separation, sigma)
    return Wavefunction.normalized(grid, alpha * gl.amps + beta * gr.amps)
