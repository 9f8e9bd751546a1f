"""Batch front end: ``levyobstacle <command> --config exp.toml --out dir``.

Commands ``calibrate``, ``simulate``, ``solve``, ``diagnose``, ``crosscheck``
and ``run`` (everything listed under ``outputs.reports``). Exit codes:
0 success, 2 invalid configuration or data, 3 solver non-convergence.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import platform
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import scipy

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import __version__
from .diagnostics import regularity_report
from .errors import ConfigError, EmptyContact, LevyObstacleError, NoConvergence
from .generator import OperatorSpec
from .levy_core import LevyModel, cgmy_model, point_mass_model, stable_model, vg_model
from .obstacle_solver import (ObstacleProblemSpec, call_payoff, dpp_check, free_boundary, put_payoff,
                              solve_evolution_grid, solve_evolution_mc, solve_stationary_grid,
                              solve_stationary_mc)
from .process_sim import ProcessSpec, simulate_paths

SCHEMA_VERSION = 1
REPORTS = ("model", "value", "boundary", "regularity", "paths", "crosscheck")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class ModelConfig:
    family: str = "vg"
    r: float = 0.05
    nu_vg: Optional[float] = None
    sigma: Optional[float] = None
    theta: float = 0.0
    C: Optional[float] = None
    G: Optional[float] = None
    M: Optional[float] = None
    Y: Optional[float] = None
    s: Optional[float] = None
    masses: Optional[list] = None
    drift: Optional[float] = None   # None: calibrate to r


@dataclass
class ProblemConfig:
    kind: str = "stationary"
    payoff: str = "put"
    strike: float = 1.0
    horizon: Optional[float] = None
    padding: float = 4.0
    table: Optional[str] = None
    terminal: str = "payoff"
    discount: Optional[float] = None
    running: float = 0.0
    extension: str = "obstacle"


@dataclass
class SolverConfig:
    grid: int = 801
    t_mesh: int = 100
    tol: float = 1e-10
    max_iter: Optional[int] = None
    method: str = "policy"
    omega: float = 0.8
    mc_paths: int = 20000
    mc_steps: int = 50
    mc_dt: float = 0.05
    basis_degree: int = 3
    eps_trunc: float = 3e-3
    target_tol: float = 1e-3
    seed: int = 0
    probes: list = field(default_factory=lambda: [-0.3, -0.15, 0.0, 0.15, 0.3])
    dpp_radius: float = 0.2
    dpp_paths: int = 20000


@dataclass
class OutputConfig:
    directory: str = "out"
    reports: list = field(default_factory=lambda: ["model", "value", "boundary", "regularity"])
    paths: int = 16
    paths_horizon: float = 1.0
    paths_steps: int = 100


@dataclass
class ExperimentConfig:
    model: ModelConfig
    problem: ProblemConfig
    solver: SolverConfig
    outputs: OutputConfig
    schema_version: int = SCHEMA_VERSION
    base_dir: str = "."
    sha256: str = ""

    def to_dict(self) -> dict:
        return {"schema_version": self.schema_version, "model": asdict(self.model),
                "problem": asdict(self.problem), "solver": asdict(self.solver),
                "outputs": asdict(self.outputs)}


def _section(cls, data, name):
    if not isinstance(data, dict):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    return cls(**data)


def parse_config(text: str, base_dir=".") -> ExperimentConfig:
    """Parse and validate a TOML experiment description."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"config is not valid TOML: {e}") from None
    version = raw.pop("schema_version", None)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    sections = {"model": ModelConfig, "problem": ProblemConfig, "solver": SolverConfig,
                "outputs": OutputConfig}
    unknown = sorted(set(raw) - set(sections))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    parts = {k: _section(cls, raw.get(k, {}), k) for k, cls in sections.items()}
    cfg = ExperimentConfig(**parts, base_dir=str(base_dir),
                           sha256=hashlib.sha256(text.encode("utf-8")).hexdigest())
    validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), path.parent)


def validate(cfg: ExperimentConfig):
    m, p, s, o = cfg.model, cfg.problem, cfg.solver, cfg.outputs
    need = {"vg": ("nu_vg", "sigma"), "cgmy": ("C", "G", "M", "Y"), "stable": ("s",),
            "point_mass": ("masses",)}
    if m.family not in need:
        raise ConfigError(f"model.family must be one of {sorted(need)}, got {m.family!r}")
    missing = [k for k in need[m.family] if getattr(m, k) is None]
    if missing:
        raise ConfigError(f"model.family={m.family!r} needs {', '.join(missing)}")
    if m.family == "stable" and m.drift is None:
        raise ConfigError("stable laws have no exponential moment; give model.drift explicitly")
    if p.kind not in ("stationary", "evolution"):
        raise ConfigError("problem.kind must be 'stationary' or 'evolution'")
    if p.payoff not in ("put", "call", "custom-table"):
        raise ConfigError("problem.payoff must be 'put', 'call' or 'custom-table'")
    if p.kind == "evolution" and not (p.horizon and p.horizon > 0):
        raise ConfigError("evolution problems need a positive problem.horizon")
    if p.terminal not in ("payoff", "zero"):
        raise ConfigError("problem.terminal must be 'payoff' or 'zero'")
    if p.extension not in ("obstacle", "edge", "affine"):
        raise ConfigError("problem.extension must be 'obstacle', 'edge' or 'affine'")
    if not p.strike > 0 or not p.padding > 0:
        raise ConfigError("problem.strike and problem.padding must be positive")
    if p.payoff == "custom-table":
        if not p.table:
            raise ConfigError("payoff 'custom-table' needs problem.table")
        if not table_path(cfg).is_file():
            raise ConfigError(f"payoff table not found: {table_path(cfg)}")
    if s.method not in ("policy", "jacobi"):
        raise ConfigError("solver.method must be 'policy' or 'jacobi'")
    if s.grid < 64 or s.t_mesh < 2:
        raise ConfigError("solver.grid must be >= 64 and solver.t_mesh >= 2")
    if not 0 <= s.seed < 2 ** 64:
        raise ConfigError("solver.seed must be an unsigned 64-bit integer")
    bad = sorted(set(o.reports) - set(REPORTS))
    if bad:
        raise ConfigError(f"unknown report(s): {', '.join(bad)}")


def table_path(cfg: ExperimentConfig) -> Path:
    p = Path(cfg.problem.table)
    return p if p.is_absolute() else Path(cfg.base_dir) / p


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def build_model(cfg: ExperimentConfig) -> LevyModel:
    m = cfg.model
    if m.family == "vg":
        base = vg_model(m.nu_vg, m.sigma, m.theta)
    elif m.family == "cgmy":
        base = cgmy_model(m.C, m.G, m.M, m.Y)
    elif m.family == "stable":
        base = stable_model(m.s)
    else:
        base = point_mass_model([tuple(map(float, pm)) for pm in m.masses])
    if m.drift is not None:
        return base.with_drift(float(m.drift), rate=m.r)
    return base.calibrated(m.r)


def _table_payoff(cfg):
    with open(table_path(cfg), encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    try:
        x = np.array([float(r["x"]) for r in rows])
        y = np.array([float(r["phi"]) for r in rows])
    except (KeyError, ValueError):
        raise ConfigError("payoff table needs numeric columns 'x' and 'phi'") from None
    if len(x) < 2 or np.any(np.diff(x) <= 0):
        raise ConfigError("payoff table x column must be strictly increasing")
    return lambda z: np.interp(z, x, y)


def build_problem(cfg: ExperimentConfig) -> ObstacleProblemSpec:
    p = cfg.problem
    K = p.strike
    pay = {"put": lambda: put_payoff(K), "call": lambda: call_payoff(K),
           "custom-table": lambda: _table_payoff(cfg)}[p.payoff]()
    c = cfg.model.r if p.discount is None else p.discount
    centre = math.log(K)
    dom = (centre - p.padding, centre + p.padding)
    label = f"{p.payoff} K={K:g}"
    if p.kind == "stationary":
        return ObstacleProblemSpec("stationary", pay, p.running, c, domain=dom, extension=p.extension,
                                   label=label)
    g = pay if p.terminal == "payoff" else (lambda x: np.zeros_like(np.asarray(x, dtype=float)))
    spec = ObstacleProblemSpec("evolution", lambda t, x: pay(x), p.running, c, terminal_g=g,
                               horizon_T=p.horizon, domain=dom, extension=p.extension, label=label)
    spec.check_compatibility(np.linspace(*dom, cfg.solver.grid))
    return spec


def solve_grid(cfg, spec, op, grid=None, t_mesh=None):
    s = cfg.solver
    grid = s.grid if grid is None else grid
    if spec.stationary:
        return solve_stationary_grid(spec, op, grid, s.tol, s.max_iter, s.method, s.omega)
    return solve_evolution_grid(spec, op, s.t_mesh if t_mesh is None else t_mesh, grid, s.tol, s.max_iter)


def psi_table(model: LevyModel, xi=None):
    xi = np.linspace(-10.0, 10.0, 41) if xi is None else xi
    return [[float(z), float(model.psi(z).real), float(model.psi(z).imag)] for z in xi]


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------

def write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Run:
    """Per-invocation state: config, output directory, written files."""

    def __init__(self, cfg: ExperimentConfig, out: Path, threads: int = 1, quiet: bool = False):
        self.cfg, self.out, self.threads, self.quiet = cfg, out, max(1, int(threads)), quiet
        self.files = []
        self.seeds = {"solver": int(cfg.solver.seed)}
        self.summary = {}
        out.mkdir(parents=True, exist_ok=True)
        self._model = self._spec = self._grid = None

    def log(self, msg):
        if not self.quiet:
            print(msg)

    def path(self, name) -> Path:
        self.files.append(name)
        return self.out / name

    @property
    def model(self):
        if self._model is None:
            self._model = build_model(self.cfg)
        return self._model

    @property
    def spec(self):
        if self._spec is None:
            self._spec = build_problem(self.cfg)
        return self._spec

    @property
    def op(self):
        return OperatorSpec.from_model(self.model)

    @property
    def grid(self):
        if self._grid is None:
            self._grid = solve_grid(self.cfg, self.spec, self.op)
        return self._grid

    def provenance(self, command):
        write_json(self.path("run.json"), {
            "command": command,
            "config": self.cfg.to_dict(),
            "config_sha256": self.cfg.sha256,
            "seeds": self.seeds,
            "threads_independent": True,
            "versions": {"levyobstacle": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                         "python": platform.python_version()},
            "outputs": {f: _sha(self.out / f) for f in sorted(set(self.files)) if f != "run.json"},
            "summary": self.summary,
        })


def do_calibrate(run: Run):
    m = run.model
    write_json(run.path("model.json"), {
        "family": run.cfg.model.family, "parameters": asdict(run.cfg.model), "rate": m.rate,
        "drift": m.drift, "calibrated": run.cfg.model.drift is None,
        "finite_variation": bool(m.finite_variation),
        "psi_at_minus_i": [m.psi(-1j).real, m.psi(-1j).imag],
        "psi_table": {"columns": ["xi", "re", "im"], "rows": psi_table(m)},
        "seed": run.seeds["solver"]})
    run.summary["drift"] = m.drift
    run.log(f"calibrated drift b* = {m.drift:.12g} (r = {m.rate})")


def do_simulate(run: Run):
    o, s = run.cfg.outputs, run.cfg.solver
    x0 = 0.0
    mesh = np.linspace(0.0, o.paths_horizon, o.paths_steps + 1)
    batch = simulate_paths(ProcessSpec.from_model(run.model), x0, o.paths_horizon, mesh, s.eps_trunc,
                           o.paths, s.seed, threads=run.threads)
    path = run.path("paths.csv")
    batch.to_csv(path)
    run.files.append("paths.json")
    run.seeds["paths"] = int(s.seed)
    run.log(f"simulated {o.paths} paths to T = {o.paths_horizon}")


def do_solve(run: Run):
    vg = run.grid
    vg.to_csv(run.path("value.csv"))
    try:
        fb = free_boundary(vg)
        fb.to_csv(run.path("boundary.csv"))
    except EmptyContact:
        write_csv(run.path("boundary.csv"), ["t", "x_star"], [])
    run.summary["grid"] = {"n_x": len(vg.x), "iterations": vg.meta.get("iterations")}
    run.log(f"solved {run.spec.kind} grid problem on {len(vg.x)} nodes")


def do_diagnose(run: Run):
    rep = regularity_report(run.grid, run.spec)
    d = rep.to_dict()
    d["seed"] = run.seeds["solver"]
    write_json(run.path("regularity.json"), d)
    rep.moduli_csv(run.path("moduli.csv"))
    run.summary["alpha_x"] = rep.alpha_x
    run.log(f"alpha_x = {rep.alpha_x}, r2 = {rep.r2}, alpha_t = {rep.alpha_t}")


def do_crosscheck(run: Run):
    """Grid (Richardson over two meshes) against Monte Carlo, plus DPP rows."""
    cfg, spec, s = run.cfg, run.spec, run.cfg.solver
    probes = np.log(cfg.problem.strike) + np.asarray(s.probes, dtype=float)
    proc = ProcessSpec.from_model(run.model)
    op = run.op
    n2 = 2 * s.grid - 1

    def fine():
        return solve_grid(cfg, spec, op, n2, 2 * s.t_mesh)

    def mc():
        if spec.stationary:
            return solve_stationary_mc(spec, proc, probes, n_paths=s.mc_paths, seed=s.seed, dt=s.mc_dt,
                                       eps_trunc=s.eps_trunc, target_tol=s.target_tol)
        return solve_evolution_mc(spec, proc, 0.0, probes, n_paths=s.mc_paths, n_steps=s.mc_steps,
                                  basis_degree=s.basis_degree, seed=s.seed, eps_trunc=s.eps_trunc)

    with ThreadPoolExecutor(max_workers=run.threads) as ex:
        jf, jm = ex.submit(fine), ex.submit(mc)
        coarse = run.grid
        vf, est = jf.result(), jm.result()
    run.seeds["mc"] = int(s.seed)
    a, b = coarse.at(probes), vf.at(probes)
    ref = 2 * b - a
    rows, ok = [], True
    for i, x in enumerate(probes):
        diff = abs(float(est.value[i]) - float(ref[i]))
        budget = max(0.01 * abs(float(ref[i])),
                     3 * float(est.stderr[i]) + float(est.bermudan_bias[i]) + float(est.horizon_bias))
        ok &= diff <= budget
        rows.append(["grid-vs-mc", repr(float(x)), repr(float(ref[i])), repr(float(est.value[i])),
                     repr(float(est.stderr[i])), repr(diff), repr(budget), "PASS" if diff <= budget else "FAIL"])
    if spec.stationary:
        try:
            xs = free_boundary(vf).points[0]
        except EmptyContact:
            xs = np.array([])
        h = vf.h
        dpp_x = [float(probes[len(probes) // 2])]
        if len(xs) == 1:
            dpp_x = [float(xs[0]) + h, dpp_x[0], float(xs[0]) - 0.5]
        # grid nodes, so the reference carries no interpolation error
        dpp_x = [float(vf.x[np.argmin(np.abs(vf.x - z))]) for z in dpp_x]
        grid_err = np.abs(vf.at(dpp_x) - coarse.at(dpp_x))
        for k, x in enumerate(dpp_x):
            r = dpp_check(spec, proc, x, s.dpp_radius, s.dpp_paths, s.seed + 1 + k, vf,
                          grid_error=float(grid_err[k]), eps_trunc=s.eps_trunc)
            ok &= r.passed
            rows.append(["dpp", repr(float(x)), repr(r.grid_value), repr(r.recomputed), repr(r.stderr),
                         repr(r.discrepancy), repr(r.budget), "PASS" if r.passed else "FAIL"])
            run.seeds[f"dpp_{k}"] = int(s.seed + 1 + k)
    write_csv(run.path("crosscheck.csv"),
              ["check", "x", "reference", "estimate", "stderr", "discrepancy", "budget", "status"], rows)
    run.summary["crosscheck_pass"] = bool(ok)
    if not run.quiet:
        print(f"{'check':<11}{'x':>10}{'reference':>12}{'estimate':>12}{'|diff|':>11}{'budget':>11}  status")
        for r in rows:
            print(f"{r[0]:<11}{float(r[1]):>10.4f}{float(r[2]):>12.6f}{float(r[3]):>12.6f}"
                  f"{float(r[5]):>11.2e}{float(r[6]):>11.2e}  {r[7]}")


def do_run(run: Run):
    reps = run.cfg.outputs.reports
    if "model" in reps:
        do_calibrate(run)
    if "value" in reps or "boundary" in reps:
        do_solve(run)
    if "regularity" in reps:
        do_diagnose(run)
    if "paths" in reps:
        do_simulate(run)
    if "crosscheck" in reps:
        do_crosscheck(run)


COMMANDS = {"calibrate": do_calibrate, "simulate": do_simulate, "solve": do_solve,
            "diagnose": do_diagnose, "crosscheck": do_crosscheck, "run": do_run}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="levyobstacle", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="TOML experiment description")
    ap.add_argument("--out", help="output directory (overrides outputs.directory)")
    ap.add_argument("--seed", type=int, help="master seed (overrides solver.seed)")
    ap.add_argument("--threads", type=int, default=1, help="worker threads; results do not depend on it")
    ap.add_argument("--quiet", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.solver.seed = args.seed
            validate(cfg)
        out = Path(args.out) if args.out else Path(cfg.base_dir) / cfg.outputs.directory
        run = Run(cfg, out, args.threads, args.quiet)
        COMMANDS[args.command](run)
        run.provenance(args.command)
    except NoConvergence as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 3
    except (LevyObstacleError, ValueError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
