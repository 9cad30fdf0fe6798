"""Toy trace dynamics for bosonic matrix degrees of freedom.

A trace polynomial is a sum of terms ``c * Tr(F_1 F_2 ... F_k)`` where each
factor is either a variable reference (``q(label)`` / ``p(label)``) or a fixed
matrix.  The trace derivative follows the cyclic convention

    delta Tr P = Tr(delta q . dP/dq),

so for a term the derivative with respect to an occurrence ``F_j = q`` is the
cyclic remainder ``F_{j+1} ... F_k F_1 ... F_{j-1}``.

Hamilton's equations read ``dq/dt = dH/dp`` and ``dp/dt = -dH/dq``.  Separable
Hamiltonians (every term purely in ``q`` or purely in ``p``) are integrated
with kick-drift-kick leapfrog; anything else falls back to RK4.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
import json
import math

import numpy as np

from .errors import NonFinite, NonHermitian, UnboundVariable

__all__ = [
    "Var",
    "q",
    "p",
    "MatrixDegree",
    "TracePolynomial",
    "MatrixFourVector",
    "trace_eval",
    "trace_derivative",
    "hamilton_flow",
    "adler_millard",
    "trace_line_element",
    "lorentz_boost",
    "random_hermitian",
    "random_dofs",
    "convergence_order",
    "save_system",
    "load_system",
]


@dataclass(frozen=True)
class Var:
    kind: str  # "q" or "p"
    label: str

    def __post_init__(self):
        if self.kind not in ("q", "p"):
            raise ValueError("variable kind must be 'q' or 'p'")


def q(label) -> Var:
    return Var("q", str(label))


def p(label) -> Var:
    return Var("p", str(label))


@dataclass(frozen=True)
class MatrixDegree:
    """Bosonic matrix degree of freedom ``(q, p)``."""

    label: str
    q: np.ndarray
    p: np.ndarray
    grade: str = "bosonic"

    def __post_init__(self):
        if self.grade != "bosonic":
            raise ValueError("only bosonic degrees of freedom are supported")
        qq = np.array(self.q, dtype=complex)
        pp = np.array(self.p, dtype=complex)
        if qq.ndim != 2 or qq.shape[0] != qq.shape[1] or qq.shape[0] < 2:
            raise ValueError("q must be an N x N matrix with N >= 2")
        if pp.shape != qq.shape:
            raise ValueError("q and p must have the same shape")
        if not (np.all(np.isfinite(qq)) and np.all(np.isfinite(pp))):
            raise NonFinite(f"degree {self.label!r} has non-finite entries")
        object.__setattr__(self, "q", qq)
        object.__setattr__(self, "p", pp)

    @property
    def N(self) -> int:
        return self.q.shape[0]

    def replace(self, q=None, p=None) -> "MatrixDegree":
        return MatrixDegree(self.label, self.q if q is None else q,
                            self.p if p is None else p, self.grade)


class TracePolynomial:
    """``sum_t c_t Tr(prod_j F_tj)``.

    Parameters
    ----------
    terms : iterable of ``(coef, factors)``
        ``factors`` is a sequence of :class:`Var` and/or fixed ``N x N`` arrays.
    """

    def __init__(self, terms=()):
        self.terms = []
        for coef, factors in terms:
            factors = tuple(f if isinstance(f, Var) else np.asarray(f, dtype=complex)
                            for f in factors)
            if not factors:
                raise ValueError("a term needs at least one factor")
            self.terms.append((complex(coef), factors))

    def __add__(self, other):
        return TracePolynomial(self.terms + other.terms)

    def __mul__(self, c):
        return TracePolynomial([(c * k, f) for k, f in self.terms])

    __rmul__ = __mul__

    def __repr__(self):
        def show(f):
            return f"{f.kind}[{f.label}]" if isinstance(f, Var) else "M"
        body = " + ".join(f"{c:g}*Tr({' '.join(show(f) for f in fs)})" for c, fs in self.terms)
        return f"TracePolynomial({body or '0'})"

    def variables(self) -> set:
        return {f for _, fs in self.terms for f in fs if isinstance(f, Var)}

    def is_separable(self) -> bool:
        """True when each term involves only ``q`` variables or only ``p`` variables."""
        for _, fs in self.terms:
            kinds = {f.kind for f in fs if isinstance(f, Var)}
            if len(kinds) > 1:
                return False
        return True

    def part(self, kind) -> "TracePolynomial":
        """Terms whose variables are all of ``kind`` (constant terms go with ``q``)."""
        out = []
        for c, fs in self.terms:
            kinds = {f.kind for f in fs if isinstance(f, Var)}
            if kinds == {kind} or (not kinds and kind == "q"):
                out.append((c, fs))
        return TracePolynomial(out)

    @classmethod
    def kinetic(cls, labels) -> "TracePolynomial":
        """``sum_r Tr(p_r^2) / 2``."""
        return cls([(0.5, (p(r), p(r))) for r in labels])

    @classmethod
    def power(cls, labels, k, coef) -> "TracePolynomial":
        """``coef * sum_r Tr(q_r^k)``."""
        return cls([(coef, (q(r),) * k) for r in labels])


def _bind(binding):
    if isinstance(binding, dict):
        dofs = binding.values()
    else:
        dofs = binding
    return {d.label: d for d in dofs}


def _resolve(f, dofs):
    if not isinstance(f, Var):
        return f
    try:
        d = dofs[f.label]
    except KeyError:
        raise UnboundVariable(f"variable {f.kind}[{f.label}] is not bound") from None
    return d.q if f.kind == "q" else d.p


def _product(mats, N):
    out = None
    for m in mats:
        out = m if out is None else out @ m
    return np.eye(N, dtype=complex) if out is None else out


def trace_eval(P: TracePolynomial, binding) -> complex:
    """Scalar ``Tr P`` for the bound degrees of freedom."""
    dofs = _bind(binding)
    total = 0j
    for c, fs in P.terms:
        mats = [_resolve(f, dofs) for f in fs]
        if len(mats) == 1:
            total += c * np.trace(mats[0])
        else:
            head = _product(mats[:-1], mats[0].shape[0])
            total += c * np.sum(head * mats[-1].T)
    return complex(total)


def _derivative_plan(P: TracePolynomial, var: Var):
    """Merge identical cyclic remainders: ``[(coef, factors), ...]``."""
    merged = defaultdict(complex)
    keep = {}
    for c, fs in P.terms:
        k = len(fs)
        for j, f in enumerate(fs):
            if isinstance(f, Var) and f == var:
                rest = fs[j + 1:] + fs[:j]
                key = tuple(f if isinstance(f, Var) else id(f) for f in rest)
                merged[key] += c
                keep[key] = rest
    return [(merged[k], keep[k]) for k in merged if merged[k] != 0]


def _apply_plan(plan, dofs, N):
    out = np.zeros((N, N), dtype=complex)
    for c, rest in plan:
        out += c * _product([_resolve(f, dofs) for f in rest], N)
    return out


def trace_derivative(P: TracePolynomial, var: Var, binding) -> np.ndarray:
    """Matrix ``dP/dvar`` with ``delta Tr P = Tr(delta var . dP/dvar)``."""
    dofs = _bind(binding)
    if var.label not in dofs:
        raise UnboundVariable(f"variable {var.kind}[{var.label}] is not bound")
    for v in P.variables():
        if v.label not in dofs:
            raise UnboundVariable(f"variable {v.kind}[{v.label}] is not bound")
    N = dofs[var.label].N
    return _apply_plan(_derivative_plan(P, var), dofs, N)


class _Flow:
    def __init__(self, H, labels, N):
        self.labels = labels
        self.N = N
        self.dq = {r: _derivative_plan(H, q(r)) for r in labels}
        self.dp = {r: _derivative_plan(H, p(r)) for r in labels}

    def forces(self, dofs):
        return {r: -_apply_plan(self.dq[r], dofs, self.N) for r in self.labels}

    def velocities(self, dofs):
        return {r: _apply_plan(self.dp[r], dofs, self.N) for r in self.labels}


def hamilton_flow(dofs, H: TracePolynomial, dt: float, n_steps: int,
                  method: str = "auto", observe=None, observe_every: int = 1):
    """Integrate Hamilton's equations for ``n_steps`` steps of ``dt``.

    ``method`` is ``"leapfrog"``, ``"rk4"`` or ``"auto"`` (leapfrog when ``H``
    is separable).  ``observe(step, dofs)`` is called at step 0 and every
    ``observe_every`` steps.  Returns the evolved list of degrees of freedom.
    """
    dofs = list(dofs)
    by_label = _bind(dofs)
    if len(by_label) != len(dofs):
        raise ValueError("degree-of-freedom labels must be unique")
    for v in H.variables():
        if v.label not in by_label:
            raise UnboundVariable(f"variable {v.kind}[{v.label}] is not bound")
    if method == "auto":
        method = "leapfrog" if H.is_separable() else "rk4"
    if method not in ("leapfrog", "rk4"):
        raise ValueError(f"unknown method {method!r}")
    if method == "leapfrog" and not H.is_separable():
        raise ValueError("leapfrog needs a separable Hamiltonian")
    labels = [d.label for d in dofs]
    N = dofs[0].N
    Q = {d.label: d.q.copy() for d in dofs}
    P = {d.label: d.p.copy() for d in dofs}

    def pack():
        return {r: MatrixDegree(r, Q[r], P[r]) for r in labels}

    if method == "leapfrog":
        kick = _Flow(H.part("q"), labels, N)
        drift = _Flow(H.part("p"), labels, N)
    else:
        flow = _Flow(H, labels, N)
    if observe is not None:
        observe(0, list(pack().values()))
    h = float(dt)
    # Overflow surfaces as NonFinite below rather than as a warning.
    with np.errstate(over="ignore", invalid="ignore"):
        for s in range(n_steps):
            if method == "leapfrog":
                F = kick.forces(pack())
                for r in labels:
                    P[r] = P[r] + 0.5 * h * F[r]
                V = drift.velocities(pack())
                for r in labels:
                    Q[r] = Q[r] + h * V[r]
                F = kick.forces(pack())
                for r in labels:
                    P[r] = P[r] + 0.5 * h * F[r]
            else:
                Q, P = _rk4(flow, labels, Q, P, h)
            if not all(np.all(np.isfinite(Q[r])) and np.all(np.isfinite(P[r])) for r in labels):
                raise NonFinite("non-finite matrix entries", s)
            if observe is not None and (s + 1) % observe_every == 0:
                observe(s + 1, list(pack().values()))
    return [MatrixDegree(r, Q[r], P[r]) for r in labels]


def _rk4(flow, labels, Q, P, h):
    def rhs(Qs, Ps):
        dofs = {r: MatrixDegree(r, Qs[r], Ps[r]) for r in labels}
        return flow.velocities(dofs), flow.forces(dofs)

    def shift(X, dX, a):
        return {r: X[r] + a * dX[r] for r in labels}

    k1q, k1p = rhs(Q, P)
    k2q, k2p = rhs(shift(Q, k1q, h / 2), shift(P, k1p, h / 2))
    k3q, k3p = rhs(shift(Q, k2q, h / 2), shift(P, k2p, h / 2))
    k4q, k4p = rhs(shift(Q, k3q, h), shift(P, k3p, h))
    Qn = {r: Q[r] + h / 6 * (k1q[r] + 2 * k2q[r] + 2 * k3q[r] + k4q[r]) for r in labels}
    Pn = {r: P[r] + h / 6 * (k1p[r] + 2 * k2p[r] + 2 * k3p[r] + k4p[r]) for r in labels}
    return Qn, Pn


def adler_millard(dofs) -> np.ndarray:
    """Bosonic Adler-Millard charge ``sum_r [q_r, p_r]``."""
    dofs = list(dofs)
    C = np.zeros_like(dofs[0].q)
    for d in dofs:
        C += d.q @ d.p - d.p @ d.q
    return C


def convergence_order(dofs, H, dt, t_final, method="auto"):
    """Observed order from runs at ``dt``, ``dt/2``, ``dt/4``.

    Returns ``(order, diffs)`` with ``order = log2(|x_dt - x_dt/2| / |x_dt/2 - x_dt/4|)``
    measured on the stacked final ``(q, p)`` matrices.
    """
    finals = []
    for k in (1, 2, 4):
        n = int(round(t_final / (dt / k)))
        out = hamilton_flow(dofs, H, dt / k, n, method)
        finals.append(np.concatenate([np.ravel([d.q, d.p]) for d in out]))
    d1 = np.linalg.norm(finals[0] - finals[1])
    d2 = np.linalg.norm(finals[1] - finals[2])
    return math.log2(d1 / d2), (float(d1), float(d2))


@dataclass(frozen=True)
class MatrixFourVector:
    """Non-commuting coordinate differentials ``(dt, dx, dy, dz)``."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        shapes = set()
        for name in ("t", "x", "y", "z"):
            a = np.array(getattr(self, name), dtype=complex)
            if a.ndim != 2 or a.shape[0] != a.shape[1]:
                raise ValueError(f"component {name} must be square")
            shapes.add(a.shape)
            object.__setattr__(self, name, a)
        if len(shapes) != 1:
            raise ValueError("components must share a common dimension")

    @property
    def components(self):
        return (self.t, self.x, self.y, self.z)

    def scale(self) -> float:
        """``sum_mu ||dX_mu||_F^2``, the natural size of ``ds^2``."""
        return float(sum(np.sum(np.abs(c) ** 2) for c in self.components))

    def allclose(self, other, atol=1e-12) -> bool:
        return all(np.allclose(a, b, rtol=0, atol=atol)
                   for a, b in zip(self.components, other.components))


def _is_hermitian(a, tol=1e-12):
    return np.max(np.abs(a - a.conj().T)) <= tol * max(1.0, float(np.max(np.abs(a))))


def trace_line_element(dX: MatrixFourVector) -> float:
    """``Tr[dt^2 - dx^2 - dy^2 - dz^2]`` (real for Hermitian components)."""
    for name, c in zip("txyz", dX.components):
        if not _is_hermitian(c):
            raise NonHermitian(f"component d{name} is not Hermitian")
    t, x, y, z = dX.components
    # Tr(A^2) = sum_ij A_ij A_ji; for Hermitian A that is sum |A_ij|^2.
    return float(sum(s * np.real(np.sum(c * c.T)) for s, c in ((1, t), (-1, x), (-1, y), (-1, z))))


def lorentz_boost(dX: MatrixFourVector, rapidity: float, axis: str = "x") -> MatrixFourVector:
    """Boost along ``axis`` with the given rapidity (matrix-valued components)."""
    if not math.isfinite(rapidity):
        raise ValueError("rapidity must be finite")
    if axis not in ("x", "y", "z"):
        raise ValueError("axis must be 'x', 'y' or 'z'")
    ch, sh = math.cosh(rapidity), math.sinh(rapidity)
    comps = {"t": dX.t, "x": dX.x, "y": dX.y, "z": dX.z}
    a = comps[axis]
    comps["t"], comps[axis] = ch * dX.t - sh * a, -sh * dX.t + ch * a
    return MatrixFourVector(**comps)


def random_hermitian(N, rng, scale=1.0) -> np.ndarray:
    a = rng.standard_normal((N, N)) + 1j * rng.standard_normal((N, N))
    return scale * 0.5 * (a + a.conj().T) / math.sqrt(N)


def random_dofs(n_dofs, N, rng, scale=1.0):
    return [MatrixDegree(f"r{i}", random_hermitian(N, rng, scale),
                         random_hermitian(N, rng, scale)) for i in range(n_dofs)]


def _enc(a):
    return [[[float(v.real), float(v.imag)] for v in row] for row in np.asarray(a)]


def _dec(rows):
    a = np.asarray(rows, dtype=float)
    return a[..., 0] + 1j * a[..., 1]


def save_system(path, dofs):
    """Write degrees of freedom as JSON with ``[re, im]`` pairs for every entry."""
    data = {"dofs": [{"label": d.label, "grade": d.grade, "q": _enc(d.q), "p": _enc(d.p)}
                     for d in dofs]}
    with open(path, "w") as fh:
        json.dump(data, fh)


def load_system(path):
    with open(path) as fh:
        data = json.load(fh)
    return [MatrixDegree(d["label"], _dec(d["q"]), _dec(d["p"]), d.get("grade", "bosonic"))
            for d in data["dofs"]]
