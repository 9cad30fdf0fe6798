"""Command-line front-end.

Usage::

    cslkit SUBCOMMAND --config run.json [--set run.n_traj=500] [--seed N]
                      [--workers N] [--out DIR]

Subcommands: trajectory, ensemble, born, heating, master, exclusion,
td-conserve, td-boost.  Exit status is 0 on success, 1 on a numerical
failure and 2 on a configuration error.
"""

from __future__ import annotations

import argparse
from dataclasses import dataclass, field
import copy
import json
import math
import os
import sys

import numpy as np

from . import __version__
from .errors import ConfigError, CslError, NumericalError
from .lattice import (
    CslParams,
    Grid1D,
    Hamiltonian,
    KernelUnresolvable,
    gamma_from_lambda,
    gaussian_kernel,
    gaussian_packet,
    lambda_from_gamma,
    two_gaussian_state,
)

SUBCOMMANDS = ("trajectory", "ensemble", "born", "heating", "master", "exclusion",
               "td-conserve", "td-boost")
NEEDS_PARAMS = {"trajectory", "ensemble", "born", "heating", "master"}
NEEDS_GRID = {"trajectory", "ensemble", "heating", "master"}
NEEDS_RUN = {"trajectory", "ensemble", "heating", "master", "born"}

RUN_DEFAULTS = {"n_steps": 0, "n_traj": 1, "base_seed": 0, "snapshot_stride": 1,
                "splitting": "strang"}


@dataclass
class RunConfig:
    """Validated configuration; ``echo`` is the resolved config written to every output."""

    subcommand: str
    grid: Grid1D | None
    params: CslParams | None
    run: dict
    sections: dict
    out_dir: str
    workers: int | None
    echo: dict = field(default_factory=dict)


def _set_path(d, dotted, value):
    keys = dotted.split(".")
    for k in keys[:-1]:
        if not isinstance(d.get(k), dict):
            d[k] = {}
        d = d[k]
    d[keys[-1]] = value


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _num(block, name, path, positive=True, integer=False, required=True, default=None):
    if name not in block or block[name] is None:
        if required:
            raise ConfigError(f"{path}.{name}", "required")
        return default
    v = block[name]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{path}.{name}", f"expected a number, got {v!r}")
    if integer and int(v) != v:
        raise ConfigError(f"{path}.{name}", "expected an integer")
    if not math.isfinite(v):
        raise ConfigError(f"{path}.{name}", "must be finite")
    if positive and not v > 0:
        raise ConfigError(f"{path}.{name}", "must be positive")
    if not positive and v < 0:
        raise ConfigError(f"{path}.{name}", "must be non-negative")
    return int(v) if integer else float(v)


def _parse_params(block):
    if not isinstance(block, dict):
        raise ConfigError("params", "must be an object")
    has_g, has_l = "gamma" in block, "lambda" in block
    if has_g and has_l:
        raise ConfigError("params", "give exactly one of gamma and lambda, not both")
    if not (has_g or has_l):
        raise ConfigError("params.gamma", "one of gamma or lambda is required")
    dim = block.get("dim", 1)
    if dim not in (1, 2, 3):
        raise ConfigError("params.dim", "must be 1, 2 or 3")
    r_C = _num(block, "r_C", "params")
    kw = {k: _num(block, k, "params", required=False, default=1.0) for k in ("m", "m0", "hbar")}
    if has_l:
        lam = _num(block, "lambda", "params", positive=False)
        gamma = gamma_from_lambda(lam, r_C, dim)
    else:
        gamma = _num(block, "gamma", "params", positive=False)
        lam = lambda_from_gamma(gamma, r_C, dim)
    return CslParams(gamma=gamma, r_C=r_C, dim=dim, **kw), {"lambda": lam, "gamma": gamma}


def _parse_grid(block):
    if not isinstance(block, dict):
        raise ConfigError("grid", "must be an object")
    n = _num(block, "n_sites", "grid", integer=True)
    dx = _num(block, "dx", "grid")
    if n < 8:
        raise ConfigError("grid.n_sites", "must be >= 8")
    x_min = block.get("x_min")
    return Grid1D(n, dx, x_min)


def _parse_run(block, dt_required=True):
    if not isinstance(block, dict):
        raise ConfigError("run", "must be an object")
    run = dict(RUN_DEFAULTS)
    run.update(block)
    out = {"dt": _num(run, "dt", "run", required=dt_required),
           "n_steps": _num(run, "n_steps", "run", positive=False, integer=True),
           "n_traj": _num(run, "n_traj", "run", integer=True),
           "base_seed": _num(run, "base_seed", "run", positive=False, integer=True),
           "snapshot_stride": _num(run, "snapshot_stride", "run", integer=True),
           "splitting": run["splitting"]}
    if out["splitting"] not in ("strang", "euler"):
        raise ConfigError("run.splitting", "must be 'strang' or 'euler'")
    if out["base_seed"] >= 2**64:
        raise ConfigError("run.base_seed", "must fit in 64 bits")
    return out


def parse_config(path=None, overrides=(), subcommand=None, data=None) -> RunConfig:
    """Load, override and validate a JSON run configuration.

    ``overrides`` are ``"dotted.path=value"`` strings (values parsed as JSON
    where possible).  Raises :class:`ConfigError` naming the offending field.
    """
    if data is None:
        if path is None:
            data = {}
        else:
            try:
                with open(path) as fh:
                    data = json.load(fh)
            except FileNotFoundError:
                raise ConfigError("config", f"file not found: {path}") from None
            except json.JSONDecodeError as e:
                raise ConfigError("config", f"invalid JSON: {e}") from None
    data = copy.deepcopy(data)
    if not isinstance(data, dict):
        raise ConfigError("config", "top level must be an object")
    for item in overrides or ():
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError("--set", f"expected key=value, got {item!r}")
        _set_path(data, key, _parse_value(value))
    sub = subcommand or data.get("subcommand")
    if sub not in SUBCOMMANDS:
        raise ConfigError("subcommand", f"unknown subcommand {sub!r}")
    data["subcommand"] = sub

    params = derived = None
    if "params" in data or sub in NEEDS_PARAMS:
        if "params" not in data:
            raise ConfigError("params", "required")
        params, derived = _parse_params(data["params"])
    if sub in NEEDS_PARAMS and params.dim != 1:
        raise ConfigError("params.dim", "dynamics run in one dimension; use dim=1")
    grid = None
    if "grid" in data or sub in NEEDS_GRID:
        if "grid" not in data:
            raise ConfigError("grid", "required")
        grid = _parse_grid(data["grid"])
    run = None
    if sub in NEEDS_RUN:
        # born picks its own step from the saturated rate unless told otherwise.
        run = _parse_run(data.get("run", {}), dt_required=sub != "born")
    if grid is not None and params is not None:
        try:
            gaussian_kernel(grid, params.r_C)
        except KernelUnresolvable as e:
            raise ConfigError("params.r_C", str(e)) from None
    workers = data.get("run", {}).get("workers") if isinstance(data.get("run"), dict) else None
    if workers is not None and (not isinstance(workers, int) or workers < 1):
        raise ConfigError("run.workers", "must be a positive integer")
    output = data.get("output", {})
    out_dir = output.get("dir", ".") if isinstance(output, dict) else "."

    echo = copy.deepcopy(data)
    # Worker count and output location never influence results; keep them out
    # of the echo so outputs stay byte-identical across schedules.
    if isinstance(echo.get("run"), dict):
        echo["run"].pop("workers", None)
    echo.pop("output", None)
    if run is not None:
        echo["run"] = dict(run)
    echo["derived"] = derived
    echo["version"] = __version__
    sections = {k: v for k, v in data.items()
                if k not in ("grid", "params", "run", "output", "subcommand")}
    return RunConfig(sub, grid, params, run, sections, out_dir, workers, echo)


class _Outputs:
    """Track files written by a run so a failure can remove them."""

    def __init__(self, out_dir):
        self.dir = out_dir
        self.paths = []

    def path(self, name):
        os.makedirs(self.dir, exist_ok=True)
        p = os.path.join(self.dir, name)
        self.paths.append(p)
        return p

    def discard(self):
        for p in self.paths:
            for q in (p, f"{p}.part"):
                if os.path.exists(q):
                    os.remove(q)


def _header(cfg: RunConfig):
    return {"cslkit": cfg.echo}


def _hamiltonian(cfg: RunConfig, default="none"):
    block = cfg.sections.get("hamiltonian", {"kind": default})
    kind = block.get("kind", default)
    m = cfg.params.m if cfg.params else 1.0
    hbar = cfg.params.hbar if cfg.params else 1.0
    kinetic = block.get("kinetic", "spectral")
    if kinetic not in ("spectral", "stencil"):
        raise ConfigError("hamiltonian.kinetic", "must be 'spectral' or 'stencil'")
    if kind == "none":
        return None
    if kind == "free":
        return Hamiltonian.free(cfg.grid, m, hbar, kinetic)
    if kind == "harmonic":
        omega = _num(block, "omega", "hamiltonian")
        return Hamiltonian.harmonic(cfg.grid, omega, m, hbar, block.get("center", 0.0), kinetic)
    raise ConfigError("hamiltonian.kind", f"unknown kind {kind!r}")


def _state(cfg: RunConfig, grid=None):
    grid = grid or cfg.grid
    block = cfg.sections.get("state", {"kind": "gaussian"})
    kind = block.get("kind", "gaussian")
    r_C = cfg.params.r_C
    if kind == "gaussian":
        return gaussian_packet(grid, block.get("center", 0.0),
                               block.get("sigma", r_C), block.get("k0", 0.0))
    if kind == "two-gaussian":
        a2 = block.get("alpha2", 0.5)
        if not 0 <= a2 <= 1:
            raise ConfigError("state.alpha2", "must lie in [0, 1]")
        return two_gaussian_state(grid, math.sqrt(a2), math.sqrt(1 - a2),
                                  block.get("separation", 6 * r_C),
                                  block.get("sigma", 0.5 * r_C), block.get("center", 0.0))
    raise ConfigError("state.kind", f"unknown kind {kind!r}")


def _regions(cfg, grid):
    from .stats import RegionSpec
    block = cfg.sections.get("regions", {})
    return RegionSpec.halves(grid, block.get("center", 0.0), block.get("eps", 0.01))


def _observables(cfg, H, default):
    obs = cfg.sections.get("observables", default)
    from .sde import OBSERVABLES
    bad = [o for o in obs if o not in OBSERVABLES]
    if bad:
        raise ConfigError("observables", f"unknown observables {bad}")
    if "energy" in obs and H is None:
        raise ConfigError("observables", "energy requires a Hamiltonian")
    return tuple(obs)


def _traj_config(cfg, observables):
    from .sde import TrajectoryConfig
    r = cfg.run
    return TrajectoryConfig(dt=r["dt"], n_steps=r["n_steps"], seed=r["base_seed"],
                            snapshot_stride=r["snapshot_stride"], observables=observables,
                            splitting=r["splitting"])


def cmd_trajectory(cfg, out):
    from .sde import run_trajectory
    H = _hamiltonian(cfg)
    psi0 = _state(cfg)
    tc = _traj_config(cfg, _observables(cfg, H, ["norm", "position-mean", "position-variance"]))
    rec = run_trajectory(psi0, H, cfg.params, tc, _regions(cfg, cfg.grid))
    from .io import write_json
    rec.to_csv(out.path("trajectory.csv"), _header(cfg))
    write_json(out.path("trajectory.json"), {
        "cslkit": cfg.echo, "seed": rec.seed, "stream": rec.stream,
        "scheme": {"splitting": tc.splitting,
                   "kinetic": H.kinetic if H is not None else None,
                   "stepper": "euler-maruyama+renormalization"},
        "grid": {"n_sites": cfg.grid.n_sites, "dx": cfg.grid.dx, "x_min": cfg.grid.x_min}})


def cmd_ensemble(cfg, out):
    from .ensemble import run_ensemble
    from .io import write_csv, write_json
    from .master import ensemble_average, write_density_binary, write_density_csv
    from .sde import _expand_complex
    H = _hamiltonian(cfg)
    psi0 = _state(cfg)
    tc = _traj_config(cfg, _observables(cfg, H, ["norm", "position-mean", "region-probabilities"]))
    rec = run_ensemble(psi0, H, cfg.params, tc, cfg.run["n_traj"], _regions(cfg, cfg.grid),
                       cfg.workers)
    cols = {"time": rec.times}
    for k in rec.series:
        for name, v in _expand_complex({k: rec.mean(k)}).items():
            cols[f"{name}_mean"] = v
        cols[f"{k}_stderr"] = rec.stderr(k) if rec.n_traj > 1 else np.zeros(len(rec.times))
    write_csv(out.path("ensemble_observables.csv"), cols, _header(cfg))
    if rec.n_traj >= 2:
        rho = ensemble_average(rec, -1)
        write_density_csv(out.path("ensemble_rho.csv"), rho, _header(cfg))
        write_density_binary(out.path("ensemble_rho.bin"), rho)
    write_json(out.path("ensemble.json"), {"cslkit": cfg.echo, "n_traj": rec.n_traj,
                                           "base_seed": rec.base_seed})


def cmd_born(cfg, out):
    from .io import write_csv, write_json
    from .stats import born_experiment
    block = cfg.sections.get("born", {})
    a2 = block.get("alpha2", 0.5)
    if not isinstance(a2, (int, float)) or not 0 <= a2 <= 1:
        raise ConfigError("born.alpha2", "must lie in [0, 1]")
    sep = block.get("separation", 6 * cfg.params.r_C)
    if sep < 6 * cfg.params.r_C:
        raise ConfigError("born.separation", "must be at least 6 r_C")
    kw = {}
    if cfg.grid is not None:
        kw["grid"] = cfg.grid
    if "t_max" in block:
        kw["t_max"] = block["t_max"]
    if cfg.run["dt"] is not None:
        kw["dt"] = cfg.run["dt"]
    res = born_experiment(math.sqrt(a2), math.sqrt(1 - a2), sep, cfg.params,
                          cfg.run["n_traj"], cfg.run["base_seed"],
                          eps=block.get("eps", 0.01), workers=cfg.workers, **kw)
    write_json(out.path("born.json"), {"cslkit": cfg.echo, "result": res.to_dict(),
                                       "born_band_3sigma": list(res.born_band())})
    write_csv(out.path("born_decisions.csv"), res.decision_log(), _header(cfg))


def cmd_heating(cfg, out):
    from .ensemble import run_ensemble
    from .io import write_csv, write_json
    from .master import heating_rate, measure_heating
    H = _hamiltonian(cfg, default="free")
    if H is None:
        raise ConfigError("hamiltonian.kind", "heating needs a Hamiltonian")
    psi0 = _state(cfg)
    tc = _traj_config(cfg, ("energy",))
    rec = run_ensemble(psi0, H, cfg.params, tc, cfg.run["n_traj"], None, cfg.workers)
    fit = measure_heating(rec, seed=cfg.run["base_seed"])
    pred = heating_rate(cfg.params, cfg.params.m)
    write_json(out.path("heating.json"), {"cslkit": cfg.echo, "fit": fit.to_dict(),
                                          "predicted": pred,
                                          "relative_error": fit.slope / pred - 1.0})
    write_csv(out.path("heating.csv"), {"time": rec.times, "energy_mean": rec.mean("energy"),
                                        "energy_stderr": rec.stderr("energy")}, _header(cfg))


def cmd_master(cfg, out):
    from .io import write_csv, write_json
    from .master import DensityMatrix, evolve_master, write_density_csv
    H = _hamiltonian(cfg)
    psi0 = _state(cfg)
    rho = DensityMatrix.pure(psi0)
    regions = _regions(cfg, cfg.grid)
    stride, n = cfg.run["snapshot_stride"], cfg.run["n_steps"]
    Hm = H.matrix() if H is not None else None
    rows = {"time": [], "trace": [], "purity": [], "p_left": [], "coherence_abs": []}
    if Hm is not None:
        rows["energy"] = []
    done = 0
    while True:
        rows["time"].append(done * cfg.run["dt"])
        rows["trace"].append(rho.trace())
        rows["purity"].append(rho.purity())
        rows["p_left"].append(float(np.real(np.trace(rho.rho[np.ix_(regions.left, regions.left)])))
                              * cfg.grid.dx)
        rows["coherence_abs"].append(abs(rho.block_sum(regions.left, regions.right)))
        if Hm is not None:
            rows["energy"].append(float(np.real(rho.expectation(Hm))))
        if done >= n:
            break
        k = min(stride, n - done)
        rho = evolve_master(rho, H, cfg.params, cfg.run["dt"], k)
        done += k
    write_csv(out.path("master.csv"), rows, _header(cfg))
    write_density_csv(out.path("master_rho.csv"), rho, _header(cfg))
    write_json(out.path("master.json"), {"cslkit": cfg.echo, "final_purity": rho.purity(),
                                         "min_eigenvalue": rho.min_eigenvalue()})


def cmd_exclusion(cfg, out):
    from .exclusion import (MODEL_POINT, builtin_bounds, evaluate_point, exclusion_grid,
                            load_records, projected_bounds)
    from .io import write_csv, write_json
    block = cfg.sections.get("exclusion", {})
    if block.get("records"):
        try:
            records = load_records(block["records"])
        except (OSError, ValueError, KeyError, TypeError) as e:
            raise ConfigError("exclusion.records", str(e)) from None
    else:
        records = builtin_bounds()
    if block.get("include_projections", False):
        records = records + projected_bounds()
    res = block.get("resolution", [41, 25])
    grid = exclusion_grid(records, block.get("lambda_range", [1e-20, 1.0]),
                          block.get("r_C_range", [1e-9, 1e-3]), res)
    grid.to_csv(out.path("exclusion.csv"), _header(cfg))
    rec_cols = {k: [] for k in ("name", "kind", "lambda_max", "r_C_assumed", "source")}
    for r in records:
        for k in rec_cols:
            rec_cols[k].append(getattr(r, k))
    write_csv(out.path("exclusion_bounds.csv"), rec_cols, _header(cfg))
    excl, binding = evaluate_point(*MODEL_POINT, records)
    write_json(out.path("exclusion.json"), {
        "cslkit": cfg.echo, "records": [r.to_dict() for r in records],
        "model_point": {"lambda": MODEL_POINT[0], "r_C": MODEL_POINT[1],
                        "excluded": excl, "binding_record": binding}})


def _td_hamiltonian(kind, labels):
    from .trace_dynamics import TracePolynomial
    T = TracePolynomial.kinetic(labels)
    if kind == "quartic":
        return T + TracePolynomial.power(labels, 4, 0.25)
    if kind == "harmonic":
        return T + TracePolynomial.power(labels, 2, 0.5)
    if kind == "free":
        return T
    raise ConfigError("td.hamiltonian", f"unknown Hamiltonian {kind!r}")


def cmd_td_conserve(cfg, out):
    from .io import write_json
    from .trace_dynamics import (adler_millard, convergence_order, hamilton_flow,
                                 load_system, random_dofs, trace_eval)
    block = cfg.sections.get("td", {})
    seed = int(block.get("seed", 0))
    if block.get("system"):
        dofs = load_system(block["system"])
    else:
        N = _num(block, "N", "td", integer=True, required=False, default=8)
        nd = _num(block, "n_dofs", "td", integer=True, required=False, default=3)
        if not 2 <= N <= 64:
            raise ConfigError("td.N", "must lie in [2, 64]")
        dofs = random_dofs(nd, N, np.random.default_rng(seed))
    dt = _num(block, "dt", "td", required=False, default=1e-3)
    n = _num(block, "n_steps", "td", integer=True, required=False, default=10000)
    H = _td_hamiltonian(block.get("hamiltonian", "quartic"), [d.label for d in dofs])
    C0 = adler_millard(dofs)
    E0 = trace_eval(H, dofs).real
    drifts = []
    for k in (1, 2):
        fin = hamilton_flow(dofs, H, dt / k, n * k)
        drifts.append({"dt": dt / k, "n_steps": n * k,
                       "charge_rel_drift": float(np.linalg.norm(adler_millard(fin) - C0)
                                                 / np.linalg.norm(C0)),
                       "energy_drift": float(abs(trace_eval(H, fin).real - E0))})
    order, diffs = convergence_order(dofs, H, dt, n * dt)
    write_json(out.path("td_conserve.json"), {
        "cslkit": cfg.echo, "charge_norm": float(np.linalg.norm(C0)), "runs": drifts,
        "flow_order": order, "flow_step_differences": list(diffs)})


def cmd_td_boost(cfg, out):
    from .io import write_json
    from .trace_dynamics import (MatrixFourVector, lorentz_boost, random_hermitian,
                                 trace_line_element)
    block = cfg.sections.get("td_boost", {})
    rng = np.random.default_rng(int(block.get("seed", 0)))
    N = int(block.get("N", 4))
    nv = int(block.get("n_vectors", 100))
    etas = np.linspace(-2.0, 2.0, int(block.get("n_rapidities", 41)))
    worst = 0.0
    for _ in range(nv):
        dX = MatrixFourVector(*(random_hermitian(N, rng) for _ in range(4)))
        s0, scale = trace_line_element(dX), dX.scale()
        for axis in "xyz":
            for eta in etas:
                ds = abs(trace_line_element(lorentz_boost(dX, float(eta), axis)) - s0)
                worst = max(worst, ds / scale)
    write_json(out.path("td_boost.json"), {
        "cslkit": cfg.echo, "N": N, "n_vectors": nv, "rapidity_min": float(etas[0]),
        "rapidity_max": float(etas[-1]), "max_relative_violation": worst,
        "tolerance": 1e-12, "passed": worst <= 1e-12})


COMMANDS = {
    "trajectory": cmd_trajectory,
    "ensemble": cmd_ensemble,
    "born": cmd_born,
    "heating": cmd_heating,
    "master": cmd_master,
    "exclusion": cmd_exclusion,
    "td-conserve": cmd_td_conserve,
    "td-boost": cmd_td_boost,
}


def dispatch(cfg: RunConfig) -> int:
    """Run one subcommand; returns the process exit status."""
    out = _Outputs(cfg.out_dir)
    try:
        COMMANDS[cfg.subcommand](cfg, out)
    except ConfigError as e:
        out.discard()
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (NumericalError, CslError, FloatingPointError) as e:
        out.discard()
        print(f"numerical failure: {e}", file=sys.stderr)
        return 1
    except BaseException:
        out.discard()
        raise
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="cslkit", description=__doc__.split("\n\n")[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", "-c", help="JSON run configuration")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override a config value (dotted path, JSON value)")
    ap.add_argument("--seed", type=int, help="override run.base_seed")
    ap.add_argument("--n-traj", type=int, help="override run.n_traj")
    ap.add_argument("--workers", type=int, help="worker processes (default: $CSLKIT_WORKERS or all cores)")
    ap.add_argument("--out", help="output directory (overrides output.dir)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"run.base_seed={args.seed}")
    if args.n_traj is not None:
        overrides.append(f"run.n_traj={args.n_traj}")
    if args.workers is not None:
        overrides.append(f"run.workers={args.workers}")
    if args.out is not None:
        overrides.append(f"output.dir={json.dumps(args.out)}")
    try:
        cfg = parse_config(args.config, overrides, args.subcommand)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    return dispatch(cfg)


if __name__ == "__main__":
    sys.exit(main())
