"""Path simulation for pure-jump SDEs driven by a compensated Poisson measure.

Jumps with ``|y| <= eps_trunc`` are dropped (their second moment is
recorded as ``sigma2_eps``); the retained jumps form a compound Poisson
stream whose intensity is compensated in the drift.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy import special

from .errors import TruncationError
from .levy_core import LevyMeasureSpec, LevyModel

BLOCK_SIZE = 1024
N_TABLE = 4096
N_INV = 2 ** 16 + 1
_INV_TAIL_CELLS = 64
_GL_X, _GL_W = np.polynomial.legendre.leggauss(8)


def block_rng(seed: int, block: int) -> np.random.Generator:
    """Counter-based stream for one fixed block of paths."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(block),))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class ProcessSpec:
    """SDE ``dX = b(X-) dt + int F(X-, y) Ntilde(dt, dy)``.

    ``drift_b`` is a constant or a vectorized callable; ``jump_map_F`` is a
    vectorized callable ``F(x, y)`` or ``None`` for ``F(x, y) = y``.
    """

    measure: LevyMeasureSpec
    drift_b: Union[float, Callable] = 0.0
    jump_map_F: Optional[Callable] = None
    lipschitz_b: float = 0.0
    K_bound: float = math.inf
    state_dependent_F: bool = False

    def __post_init__(self):
        xs = np.linspace(-5.0, 5.0, 201)
        if callable(self.drift_b):
            bx = np.asarray(self.drift_b(xs), dtype=float)
            if not np.all(np.isfinite(bx)):
                raise ValueError("drift must be finite")
            slopes = np.abs(np.diff(bx)) / np.diff(xs)
            if slopes.max() > self.lipschitz_b * (1 + 1e-6) + 1e-12:
                raise ValueError(f"drift Lipschitz constant {slopes.max():.4g} exceeds "
                                 f"declared lipschitz_b={self.lipschitz_b}")
        if self.jump_map_F is not None:
            small = np.array([1e-10, -1e-10])
            for x in xs[::40]:
                if np.max(np.abs(self.jump_map_F(np.full(2, x), small))) > 1e-6:
                    raise ValueError("F(x, y) must vanish as y -> 0")
            if not self.state_dependent_F:
                y = np.array([0.3, -0.2, 1.5])
                ref = self.jump_map_F(np.zeros(3), y)
                for x in (-2.0, 1.0, 3.0):
                    if not np.allclose(self.jump_map_F(np.full(3, x), y), ref, rtol=0, atol=1e-14):
                        raise ValueError("F depends on x; set state_dependent_F=True")

    @classmethod
    def from_model(cls, model: LevyModel, **kw) -> "ProcessSpec":
        return cls(measure=model.measure, drift_b=float(model.drift), **kw)

    @property
    def constant_drift(self) -> bool:
        return not callable(self.drift_b)

    def b(self, x):
        if callable(self.drift_b):
            return np.asarray(self.drift_b(x), dtype=float)
        return np.full(np.shape(x), float(self.drift_b))

    def F(self, x, y):
        if self.jump_map_F is None:
            return np.asarray(y, dtype=float)
        return np.asarray(self.jump_map_F(x, y), dtype=float)


# ---------------------------------------------------------------------------
# jump tables
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class JumpTable:
    """Inverse-CDF tabulation of ``nu`` restricted to ``|y| > eps``."""

    eps: float
    side_rates: tuple            # (positive side, negative side) intensities
    nodes: tuple                 # per side: log-spaced |y| nodes
    cum: tuple                   # per side: mass of (eps, node_k]
    mass_h: np.ndarray           # point-mass locations kept
    mass_lam: np.ndarray
    inv: tuple = ()              # per side: log|y| at uniform probability levels

    @property
    def rate(self) -> float:
        return float(sum(self.side_rates) + self.mass_lam.sum())


def _side_cutoff(m: LevyMeasureSpec, s: int, eps: float) -> float:
    x = max(1.0, 2 * eps)
    while x < 1e6:
        if float(m.evaluate(np.array([s * x]))[0]) * x < 1e-18:
            return x
        x *= 1.25
    raise TruncationError("Levy density tail too heavy to tabulate; second moment required")


def jump_table(m: LevyMeasureSpec, eps: float, n_nodes: int = N_TABLE) -> JumpTable:
    if not eps > 0:
        raise TruncationError(f"eps_trunc must be positive, got {eps}")
    rates, nodes, cums = [], [], []
    for s in (1, -1):
        if m.density is None:
            rates.append(0.0)
            nodes.append(np.array([eps, 2 * eps]))
            cums.append(np.zeros(2))
            continue
        hi = _side_cutoff(m, s, eps)
        if hi <= eps:
            rates.append(0.0)
            nodes.append(np.array([eps, 2 * eps]))
            cums.append(np.zeros(2))
            continue
        u = np.geomspace(eps, hi, n_nodes)
        lu = np.log(u)
        mid, half = 0.5 * (lu[1:] + lu[:-1]), 0.5 * (lu[1:] - lu[:-1])
        t = mid[:, None] + half[:, None] * _GL_X[None, :]
        y = np.exp(t)
        cell = (m.evaluate(s * y) * y * _GL_W[None, :]).sum(axis=1) * half
        cum = np.concatenate([[0.0], np.cumsum(cell)])
        rates.append(float(cum[-1]))
        nodes.append(u)
        cums.append(cum)
    keep = [(h, lam) for h, lam in m.point_masses if abs(h) > eps]
    mh = np.array([h for h, _ in keep], dtype=float)
    ml = np.array([lam for _, lam in keep], dtype=float)
    levels = np.linspace(0.0, 1.0, N_INV)
    inv = tuple(np.interp(levels * c[-1], c, np.log(u)) for c, u in zip(cums, nodes))
    return JumpTable(eps, tuple(rates), tuple(nodes), tuple(cums), mh, ml, inv)


def _draw_marks(table: JumpTable, n: int, rng: np.random.Generator) -> np.ndarray:
    if n == 0:
        return np.zeros(0)
    weights = np.concatenate([np.array(table.side_rates), table.mass_lam])
    cw = np.cumsum(weights)
    cat = np.minimum(np.searchsorted(cw, rng.random(n) * cw[-1], side="right"), len(weights) - 1)
    u = rng.random(n)
    side = np.minimum(cat, 1)
    pos = u * (N_INV - 1)
    k = np.minimum(pos.astype(np.int64), N_INV - 2)
    inv = np.stack(table.inv)
    lo = inv[side, k]
    logy = lo + (pos - k) * (inv[side, k + 1] - lo)
    # the inverse is log-singular at the top; use the full table there
    top = k >= N_INV - 1 - _INV_TAIL_CELLS
    for i in (0, 1):
        sel = top & (side == i)
        if np.any(sel):
            logy[sel] = np.interp(u[sel] * table.cum[i][-1], table.cum[i], np.log(table.nodes[i]))
    out = np.where(side == 0, 1.0, -1.0) * np.exp(logy)
    for j, h in enumerate(table.mass_h):
        out[cat == 2 + j] = h
    return out


def _sample_block(table: JumpTable, T: float, n: int, rng: np.random.Generator, ordered=True):
    """Jump counts, times and marks for ``n`` paths on ``[0, T]``.

    With ``ordered`` the jumps are sorted by (path, time); binning onto a
    mesh does not need the order.
    """
    counts = rng.poisson(table.rate * T, size=n) if table.rate > 0 else np.zeros(n, dtype=np.int64)
    total = int(counts.sum())
    times = rng.random(total) * T
    marks = _draw_marks(table, total, rng)
    path = np.repeat(np.arange(n), counts)
    if not ordered:
        return counts, times, marks, path
    order = np.lexsort((times, path))
    return counts, times[order], marks[order], path[order]


def sample_jumps(measure: LevyMeasureSpec, eps_trunc: float, T: float, rng) -> list:
    """Time-ordered ``(time, mark)`` pairs of the jumps with ``|mark| > eps_trunc``."""
    table = jump_table(measure, eps_trunc)
    _, times, marks, _ = _sample_block(table, T, 1, rng)
    return list(zip(times.tolist(), marks.tolist()))


def truncation_variance(spec_or_measure, eps: float) -> float:
    """``sigma2_eps = int_{|y| <= eps} |F|^2 nu(dy)`` (F the identity unless given)."""
    m = spec_or_measure.measure if isinstance(spec_or_measure, ProcessSpec) else spec_or_measure
    if isinstance(spec_or_measure, ProcessSpec) and spec_or_measure.jump_map_F is not None:
        F = spec_or_measure.jump_map_F
        val = m.integrate(lambda y: float(F(np.zeros(1), np.array([y]))[0]) ** 2,
                          upper=eps, small_order=2, small_coeff=None)
    else:
        val = m.integrate(lambda y: y * y, upper=eps, small_order=2, small_coeff=lambda s: 1.0)
    val = float(np.real(val))
    val += sum(lam * h * h for h, lam in m.point_masses if abs(h) == eps)
    return val


def _compensator_nodes(table: JumpTable, m: LevyMeasureSpec, n_cells: int = 64):
    """Quadrature nodes/weights for ``int_{|y|>eps} . nu(dy)``."""
    ys, ws = [], []
    for i, s in enumerate((1, -1)):
        if table.side_rates[i] == 0.0:
            continue
        u = table.nodes[i]
        lu = np.log(np.geomspace(u[0], u[-1], n_cells + 1))
        mid, half = 0.5 * (lu[1:] + lu[:-1]), 0.5 * (lu[1:] - lu[:-1])
        t = (mid[:, None] + half[:, None] * _GL_X[None, :]).ravel()
        y = np.exp(t)
        w = (half[:, None] * _GL_W[None, :]).ravel() * y * m.evaluate(s * y)
        ys.append(s * y)
        ws.append(w)
    ys.append(table.mass_h)
    ws.append(table.mass_lam)
    return np.concatenate(ys), np.concatenate(ws)


# ---------------------------------------------------------------------------
# path batches
# ---------------------------------------------------------------------------

@dataclass
class PathBatch:
    times: np.ndarray
    states: np.ndarray
    seed: int
    eps_trunc: float
    n_paths: int
    sigma2_eps: float
    compensator: float
    jump_counts: np.ndarray
    meta: dict = field(default_factory=dict)

    def to_csv(self, path, sidecar=True):
        m = len(self.times)
        with open(path, "w", newline="\n", encoding="utf-8") as fh:
            fh.write("path_id,t,x\n")
            for p in range(self.n_paths):
                for j in range(m):
                    fh.write(f"{p},{float(self.times[j])!r},{float(self.states[p, j])!r}\n")
        if sidecar:
            side = str(path)[:-4] + ".json" if str(path).endswith(".csv") else str(path) + ".json"
            with open(side, "w", encoding="utf-8", newline="\n") as fh:
                json.dump(self.metadata(), fh, indent=2, sort_keys=True)
                fh.write("\n")

    def metadata(self) -> dict:
        t = self.times
        uniform = bool(np.allclose(np.diff(t), t[1] - t[0])) if len(t) > 1 else True
        return {
            "seed": int(self.seed),
            "eps_trunc": float(self.eps_trunc),
            "sigma2_eps": float(self.sigma2_eps),
            "compensator": float(self.compensator),
            "n_paths": int(self.n_paths),
            "mesh": {"t0": float(t[0]), "T": float(t[-1]), "n_points": int(len(t)),
                     "uniform": uniform},
            **self.meta,
        }


def _as_mesh(mesh, T) -> np.ndarray:
    if np.isscalar(mesh):
        return np.linspace(0.0, T, int(mesh) + 1)
    mesh = np.asarray(mesh, dtype=float)
    if mesh[0] != 0.0 or np.any(np.diff(mesh) <= 0) or not np.isclose(mesh[-1], T):
        raise ValueError("mesh must increase from 0 to T")
    return mesh


def _levy_block(table, drift, mesh, x0, n, rng, F=None):
    counts, times, marks, path = _sample_block(table, mesh[-1], n, rng, ordered=False)
    if F is not None:
        marks = F(np.zeros_like(marks), marks)
    dt = mesh[1] - mesh[0]
    if np.allclose(np.diff(mesh), dt, rtol=1e-12, atol=0):
        k = np.clip(np.ceil(times / dt).astype(np.int64), 1, len(mesh) - 1)
    else:
        k = np.searchsorted(mesh, times, side="left")
    incr = np.bincount(path * len(mesh) + k, weights=marks,
                       minlength=n * len(mesh)).reshape(n, len(mesh))
    X = np.cumsum(incr, axis=1)
    X += x0 + drift * mesh[None, :]
    return X, counts


def _rk4(f, x, dt):
    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def _general_block(spec, table, comp_nodes, mesh, x0, n, rng, dt_max):
    counts, times, marks, path = _sample_block(table, mesh[-1], n, rng)
    order = np.argsort(times, kind="stable")
    times, marks, path = times[order], marks[order], path[order]
    yq, wq = comp_nodes
    if spec.state_dependent_F:
        def comp(x):
            return (spec.F(np.repeat(x[:, None], len(yq), 1), yq[None, :]) * wq).sum(axis=1)
    else:
        c0 = float((spec.F(np.zeros_like(yq), yq) * wq).sum())
        comp = lambda x: c0

    def velocity(x):
        return spec.b(x) - comp(x)

    X = np.empty((n, len(mesh)))
    x = np.full(n, float(x0))
    X[:, 0] = x
    ptr = 0
    for j in range(len(mesh) - 1):
        t0, t1 = mesh[j], mesh[j + 1]
        nsub = max(1, int(math.ceil((t1 - t0) / dt_max)))
        edges = np.linspace(t0, t1, nsub + 1)
        edges[-1] = t1
        for q in range(nsub):
            x = _rk4(velocity, x, edges[q + 1] - edges[q])
            # jumps in (edges[q], edges[q+1]] land at the sub-step end, in time order
            end = int(np.searchsorted(times, edges[q + 1], side="right"))
            if end > ptr:
                p_idx, y = path[ptr:end], marks[ptr:end]
                rank = _rank_within(p_idx)
                for r in range(int(rank.max()) + 1):
                    s = rank == r
                    pi = p_idx[s]
                    x[pi] = x[pi] + spec.F(x[pi], y[s])
                ptr = end
        X[:, j + 1] = x
    return X, counts


def _rank_within(ids: np.ndarray) -> np.ndarray:
    """Occurrence index of each entry among equal ids (order preserved)."""
    order = np.argsort(ids, kind="stable")
    sorted_ids = ids[order]
    start = np.r_[0, np.flatnonzero(np.diff(sorted_ids)) + 1]
    run = np.repeat(start, np.diff(np.r_[start, len(ids)]))
    rank = np.empty(len(ids), dtype=np.int64)
    rank[order] = np.arange(len(ids)) - run
    return rank


def _block_plan(spec: ProcessSpec, x0, mesh, eps_trunc, n_paths, seed, dt_max):
    """Per-block worker plus the shared bookkeeping of a simulation run."""
    table = jump_table(spec.measure, eps_trunc)
    n_blocks = (n_paths + BLOCK_SIZE - 1) // BLOCK_SIZE
    sizes = [min(BLOCK_SIZE, n_paths - b * BLOCK_SIZE) for b in range(n_blocks)]
    nodes = _compensator_nodes(table, spec.measure)
    yq, wq = nodes
    if spec.constant_drift and not spec.state_dependent_F:
        comp = float((spec.F(np.zeros_like(yq), yq) * wq).sum())
        drift = float(spec.drift_b) - comp
        F = None if spec.jump_map_F is None else spec.F
        work = lambda b: _levy_block(table, drift, mesh, x0, sizes[b], block_rng(seed, b), F)
    else:
        comp = float((spec.F(np.zeros_like(yq), yq) * wq).sum()) if not spec.state_dependent_F else float("nan")
        work = lambda b: _general_block(spec, table, nodes, mesh, x0, sizes[b], block_rng(seed, b), dt_max)
    return work, n_blocks, table, comp


def iter_path_blocks(spec: ProcessSpec, x0: float, T: float, mesh, eps_trunc: float,
                     n_paths: int, seed: int, dt_max: float = 1e-3):
    """Yield ``(states, jump_counts)`` block by block; same paths as ``simulate_paths``.

    Useful for long horizons where the full path matrix would not fit in memory.
    """
    mesh = _as_mesh(mesh, T)
    work, n_blocks, _, _ = _block_plan(spec, x0, mesh, eps_trunc, n_paths, seed, dt_max)
    for b in range(n_blocks):
        yield work(b)


def simulate_paths(spec: ProcessSpec, x0: float, T: float, mesh, eps_trunc: float,
                   n_paths: int, seed: int, threads: int = 1, dt_max: float = 1e-3) -> PathBatch:
    """Simulate ``n_paths`` trajectories from ``x0`` on ``mesh`` (times in years).

    Paths are generated in fixed blocks of ``BLOCK_SIZE`` paths, each with its
    own counter-based stream keyed by ``(seed, block)``, so the result does not
    depend on ``threads``.
    """
    mesh = _as_mesh(mesh, T)
    work, n_blocks, table, comp = _block_plan(spec, x0, mesh, eps_trunc, n_paths, seed, dt_max)
    sigma2 = truncation_variance(spec, eps_trunc)
    if threads > 1 and n_blocks > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(work, range(n_blocks)))
    else:
        parts = [work(b) for b in range(n_blocks)]
    states = np.concatenate([p[0] for p in parts], axis=0)
    counts = np.concatenate([p[1] for p in parts])
    return PathBatch(mesh, states, int(seed), float(eps_trunc), int(n_paths), sigma2, comp, counts,
                     meta={"jump_rate": table.rate})


def levy_increments(model: LevyModel, T: float, mesh, eps_trunc: float, n_paths: int,
                    seed: int, threads: int = 1) -> PathBatch:
    """Paths of ``X(t) - X(0)`` for a constant-drift Levy model."""
    return simulate_paths(ProcessSpec.from_model(model), 0.0, T, mesh, eps_trunc, n_paths, seed, threads)


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

@dataclass
class MomentReport:
    t: np.ndarray
    diff_sq_max: np.ndarray        # E max_{s<=t} |X^{x1}(s) - X^{x2}(s)|^2
    diff_sq_stderr: np.ndarray
    incr_sq_max: np.ndarray        # E max_{r in [t0, t]} |X^{x1}(r) - X^{x1}(t0)|^2
    incr_sq_stderr: np.ndarray
    C_diff: float
    C_incr: float
    dx: float
    gronwall_ok: Optional[bool] = None


def _fit_exp_constant(a: np.ndarray, t: np.ndarray) -> float:
    """Smallest ``C`` with ``C*exp(C*t_j) >= a_j`` for every j."""
    out = 0.0
    for aj, tj in zip(a, t):
        if aj <= 0:
            continue
        c = aj if tj == 0 else float(np.real(special.lambertw(aj * tj))) / tj
        out = max(out, c)
    return out


def path_moment_diagnostics(spec: ProcessSpec, x1: float, x2: float, t_grid, n_paths: int,
                            seed: int, eps_trunc: float = 1e-3, dt_max: float = 1e-3) -> MomentReport:
    """Moment estimates for the path-continuity bounds, under common random numbers."""
    t_grid = np.asarray(t_grid, dtype=float)
    T = float(t_grid[-1])
    a = simulate_paths(spec, x1, T, t_grid, eps_trunc, n_paths, seed, dt_max=dt_max).states
    b = simulate_paths(spec, x2, T, t_grid, eps_trunc, n_paths, seed, dt_max=dt_max).states
    d2 = np.maximum.accumulate((a - b) ** 2, axis=1)
    inc = np.maximum.accumulate((a - a[:, :1]) ** 2, axis=1)
    sq = math.sqrt(n_paths)
    dx2 = (x1 - x2) ** 2
    dmean = d2.mean(axis=0)
    imean = inc.mean(axis=0)
    C1 = _fit_exp_constant(dmean / dx2, t_grid) if dx2 > 0 else 0.0
    dt = t_grid[1:] - t_grid[0]
    C2 = float(np.max(imean[1:] / np.maximum(dt, dt ** 2))) if len(dt) else 0.0
    gron = None
    if spec.measure.is_zero:
        env = dx2 * np.exp(2 * spec.lipschitz_b * t_grid)
        gron = bool(np.all(dmean <= env * (1 + 1e-9) + 1e-15))
    return MomentReport(t_grid, dmean, d2.std(axis=0, ddof=1) / sq if n_paths > 1 else np.zeros_like(dmean),
                        imean, inc.std(axis=0, ddof=1) / sq if n_paths > 1 else np.zeros_like(imean),
                        C1, C2, math.sqrt(dx2), gron)


@dataclass
class MartingaleResult:
    mean: float
    stderr: float
    bias_bound: float
    sigma2_eps: float

    @property
    def passed(self) -> bool:
        return abs(self.mean - 1.0) <= 3 * self.stderr + self.bias_bound


def martingale_check(model: LevyModel, T: float, n_paths: int, seed: int,
                     eps_trunc: float = 1e-4, r: Optional[float] = None,
                     threads: int = 1) -> MartingaleResult:
    """Sample mean and standard error of ``exp(-r T + X(T))`` with ``X(0) = 0``.

    Dropping jumps below ``eps`` multiplies the true mean 1 by
    ``exp(-T int_{|y|<=eps} (e^y - 1 - y) nu(dy))``; the bias bound uses
    ``e^y - 1 - y <= e^eps y^2 / 2`` there.
    """
    r = model.rate if r is None else r
    if r is None:
        raise ValueError("model carries no rate; calibrate it first")
    batch = levy_increments(model, T, 1, eps_trunc, n_paths, seed, threads)
    z = np.exp(-r * T + batch.states[:, -1])
    bias = -math.expm1(-T * batch.sigma2_eps * math.exp(eps_trunc) / 2)
    se = float(z.std(ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else 0.0
    return MartingaleResult(float(z.mean()), se, bias, batch.sigma2_eps)
