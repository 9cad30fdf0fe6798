"""Upper bounds on the collapse rate and lambda-r_C exclusion grids (SI units)."""

from __future__ import annotations

from dataclasses import dataclass, field
import json
import math

import numpy as np

from .errors import EmptyRecordSet

__all__ = [
    "AMU",
    "NUCLEON_MASS",
    "HBAR",
    "MODEL_POINT",
    "BoundRecord",
    "ExclusionGrid",
    "interferometry_bound",
    "heating_bound",
    "builtin_bounds",
    "projected_bounds",
    "load_records",
    "exclusion_grid",
    "evaluate_point",
]

AMU = 1.66053906660e-27          # kg
NUCLEON_MASS = 1.67492749804e-27  # kg, neutron
HBAR = 1.054571817e-34           # J s
CM = 1e-2

#: Canonical model point ``(lambda [1/s], r_C [m])``.
MODEL_POINT = (1e-17, 1e-5 * CM)

KINDS = ("interferometry", "heating", "quoted")
QUOTED_DECADES = 1.0


def interferometry_bound(mass: float, flight_time: float, r_C: float,
                         m0: float = AMU) -> float:
    """Largest rate compatible with surviving interference over ``flight_time``.

    Assumes a point-like object and a path separation well beyond ``r_C`` so
    the decoherence rate is saturated at ``lambda (m/m0)^2``; requiring at most
    one expected decay over the flight gives ``(m0/m)^2 / T``.  ``r_C`` only
    enters through those assumptions.
    """
    if not (mass > 0 and flight_time > 0 and r_C > 0):
        raise ValueError("mass, flight time and r_C must be positive")
    if mass < m0 * (1 - 1e-12):
        raise ValueError("mass must be at least the reference mass")
    return (m0 / mass) ** 2 / flight_time


def heating_bound(power_limit: float, mass: float, r_C: float,
                  m0: float = NUCLEON_MASS, hbar: float = HBAR) -> float:
    """Invert the 3D heating rate: ``P (4/3) r_C^2 m0^2 / (hbar^2 M)``."""
    if not (power_limit > 0 and mass > 0 and r_C > 0):
        raise ValueError("power limit, mass and r_C must be positive")
    return power_limit * (4.0 / 3.0) * r_C**2 * m0**2 / (hbar**2 * mass)


@dataclass(frozen=True)
class BoundRecord:
    """One experimental upper bound on ``lambda``.

    ``kind`` decides how the bound extends in ``r_C``: interferometry bounds
    are flat (saturated regime), heating bounds scale as ``r_C^2`` and quoted
    bounds hold only within one decade of ``r_C_assumed``.
    """

    name: str
    kind: str
    lambda_max: float
    r_C_assumed: float
    mass: float | None = None
    flight_time: float | None = None
    power_limit: float | None = None
    source: str = ""
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown bound kind {self.kind!r}")
        if not self.lambda_max > 0 or not self.r_C_assumed > 0:
            raise ValueError(f"{self.name}: lambda_max and r_C_assumed must be positive")
        if self.kind == "interferometry" and not (self.mass and self.flight_time):
            raise ValueError(f"{self.name}: interferometry bounds need mass and flight_time")
        if self.kind == "heating" and not (self.mass and self.power_limit):
            raise ValueError(f"{self.name}: heating bounds need mass and power_limit")

    def bound_at(self, r_C: float) -> float | None:
        """The bound at ``r_C``, or ``None`` where the record does not apply."""
        if self.kind == "interferometry":
            return interferometry_bound(self.mass, self.flight_time, r_C)
        if self.kind == "heating":
            return heating_bound(self.power_limit, self.mass, r_C)
        if abs(math.log10(r_C / self.r_C_assumed)) <= QUOTED_DECADES + 1e-12:
            return self.lambda_max
        return None

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind, "lambda_max": self.lambda_max,
             "r_C_assumed": self.r_C_assumed, "source": self.source}
        for k in ("mass", "flight_time", "power_limit"):
            if getattr(self, k) is not None:
                d[k] = getattr(self, k)
        if self.metadata:
            d["metadata"] = dict(self.metadata)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BoundRecord":
        known = {"name", "kind", "lambda_max", "r_C_assumed", "mass", "flight_time",
                 "power_limit", "source", "metadata"}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown bound record fields {sorted(extra)}")
        d = dict(d)
        if "lambda_max" not in d:
            if d.get("kind") == "interferometry":
                d["lambda_max"] = interferometry_bound(d["mass"], d["flight_time"],
                                                       d["r_C_assumed"])
            elif d.get("kind") == "heating":
                d["lambda_max"] = heating_bound(d["power_limit"], d["mass"],
                                                d["r_C_assumed"])
        return cls(**d)


_POINT_LIKE = {"amplification": "point-like (m/m0)^2 only; no structure factor"}


def builtin_bounds() -> list:
    """Bounds shipped with the toolkit.

    * ``Ge-11keV``: spontaneous 11 keV emission from Germanium, ``lambda < 1e-11 /s``.
    * ``interferometry-1e4amu``: matter-wave interference at ``1e4`` amu,
      ``lambda <~ 1e-5 /s`` at ``r_C = 1e-5 cm``.  The flight time (1 ms) is
      not a measured input; it is the value that reproduces the quoted bound.
    """
    return [
        BoundRecord(
            name="Ge-11keV", kind="quoted", lambda_max=1e-11, r_C_assumed=1e-5 * CM,
            source="spontaneous 11 keV X-ray emission from Germanium",
            metadata={"quoted_window_decades": QUOTED_DECADES},
        ),
        BoundRecord(
            name="interferometry-1e4amu", kind="interferometry",
            lambda_max=interferometry_bound(1e4 * AMU, 1e-3, 1e-5 * CM),
            r_C_assumed=1e-5 * CM, mass=1e4 * AMU, flight_time=1e-3,
            source="matter-wave interferometry with ~1e4 amu molecules",
            metadata={"flight_time": "calibrated (1 ms) to reproduce the quoted 1e-5 /s",
                      **_POINT_LIKE},
        ),
    ]


def projected_bounds() -> list:
    """Prospective bounds (not experimental results).

    Interferometry at ``1e9`` amu would push the bound down to the model value
    ``1e-17 /s``; that requires a flight time of about 0.1 s, stated here.
    """
    return [
        BoundRecord(
            name="interferometry-1e9amu-projected", kind="interferometry",
            lambda_max=interferometry_bound(1e9 * AMU, 0.1, 1e-5 * CM),
            r_C_assumed=1e-5 * CM, mass=1e9 * AMU, flight_time=0.1,
            source="projected interferometry with ~1e9 amu objects",
            metadata={"projected": True,
                      "flight_time": "assumed 0.1 s; not stated with the projection",
                      **_POINT_LIKE},
        ),
    ]


def load_records(path) -> list:
    """Read bound records from JSON: a list of objects or ``{"records": [...]}``."""
    with open(path) as fh:
        data = json.load(fh)
    if isinstance(data, dict):
        data = data.get("records", [])
    return [BoundRecord.from_dict(d) for d in data]


def evaluate_point(lam: float, r_C: float, records) -> tuple:
    """Return ``(excluded, binding_name)`` for one point of the plane.

    The binding record is the applicable one with the smallest bound; the
    point is excluded when ``lam`` reaches or exceeds that bound.
    """
    best, name = math.inf, ""
    for rec in records:
        b = rec.bound_at(r_C)
        if b is not None and b < best:
            best, name = b, rec.name
    return (lam >= best, name if lam >= best else "")


@dataclass
class ExclusionGrid:
    """Boolean exclusion mask over ``(lambda, r_C)``, shape ``(len(lambdas), len(r_Cs))``."""

    lambdas: np.ndarray
    r_Cs: np.ndarray
    excluded: np.ndarray
    binding: np.ndarray

    def columns(self) -> dict:
        L, R = np.meshgrid(self.lambdas, self.r_Cs, indexing="ij")
        return {
            "lambda": L.ravel(),
            "r_C": R.ravel(),
            "excluded": self.excluded.ravel().astype(int),
            "binding_record": self.binding.ravel(),
        }

    def to_csv(self, path, header=None):
        from .io import write_csv
        write_csv(path, self.columns(), header)


def _axis(rng, n):
    rng = np.asarray(rng, dtype=float)
    if rng.size == 0 or n == 0:
        return np.empty(0)
    if rng.size == 2 and n is not None:
        lo, hi = rng
        if not (lo > 0 and hi > 0):
            raise ValueError("ranges must be positive")
        return np.logspace(math.log10(lo), math.log10(hi), int(n))
    if np.any(rng <= 0):
        raise ValueError("axis values must be positive")
    return rng


def exclusion_grid(records, lambda_range, r_C_range, resolution=64) -> ExclusionGrid:
    """Evaluate ``records`` on a log-spaced ``lambda`` x ``r_C`` grid.

    ``lambda_range``/``r_C_range`` are ``(lo, hi)`` pairs (log-spaced with
    ``resolution`` points; an int or a ``(n_lambda, n_r_C)`` pair) or explicit
    axis values when ``resolution`` is ``None``.  Empty ranges give an empty grid.
    """
    records = list(records)
    if not records:
        raise EmptyRecordSet("no bound records supplied")
    if resolution is None:
        n_l = n_r = None
    elif np.ndim(resolution) == 0:
        n_l = n_r = int(resolution)
    else:
        n_l, n_r = (int(v) for v in resolution)
    lams = _axis(lambda_range, n_l)
    rcs = _axis(r_C_range, n_r)
    excluded = np.zeros((lams.size, rcs.size), dtype=bool)
    binding = np.full((lams.size, rcs.size), "", dtype=object)
    for j, rc in enumerate(rcs):
        best, name = math.inf, ""
        for rec in records:
            b = rec.bound_at(rc)
            if b is not None and b < best:
                best, name = b, rec.name
        col = lams >= best
        excluded[:, j] = col
        binding[col, j] = name
    return ExclusionGrid(lams, rcs, excluded, binding)
