"""Obstacle problems for the nonlocal generator: grid and Monte Carlo solvers.

Stationary:  min{-Lv + c v - f, v - phi} = 0 on the line.
Evolution:   min{-v_t - Lv + c v - f, v - phi} = 0 on [0, T), v(T) = g.

The grid route discretizes L monotonically (linear interpolation weights,
upwind drift) and solves the complementarity system exactly per step by
policy iteration. The Monte Carlo route estimates the optimal stopping
representation with a policy fitted on one path set and priced on an
independent one, so estimates are low-biased up to simulation error.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy import linalg

from .errors import (CompatibilityError, DomainError, EmptyContact, NoConvergence,
                     StabilityError)
from .generator import DiscreteGenerator, Extension, OperatorSpec, SampledFunction
from .process_sim import ProcessSpec, iter_path_blocks, simulate_paths, truncation_variance

Data = Union[float, Callable]


def tol_contact(tol: float) -> float:
    return max(1e-8, 10.0 * tol)


def derived_seed(seed: int, stream: int) -> int:
    """Independent integer seed for a named sub-stream of ``seed``."""
    return int(np.random.SeedSequence([int(seed), int(stream)]).generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------------------
# problem data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ObstacleProblemSpec:
    """Data of a stationary or evolution obstacle problem.

    Stationary data are functions of x, evolution data functions of (t, x);
    constants are accepted anywhere. ``extension`` says how the value is
    continued outside ``domain``: ``"obstacle"`` (the obstacle itself),
    ``"edge"``, ``"affine"`` or a callable of x (stationary) or (t, x).
    """

    kind: str
    obstacle: Data
    running_f: Data = 0.0
    discount_c: Data = 0.0
    terminal_g: Optional[Data] = None
    horizon_T: Optional[float] = None
    domain: tuple = (-3.0, 3.0)
    extension: Union[str, Callable] = "obstacle"
    lipschitz_b: float = 0.0
    label: str = ""

    def __post_init__(self):
        if self.kind not in ("stationary", "evolution"):
            raise ValueError(f"kind must be 'stationary' or 'evolution', got {self.kind!r}")
        if not self.domain[0] < self.domain[1]:
            raise ValueError("empty domain")
        if self.kind == "evolution":
            if self.terminal_g is None or self.horizon_T is None or not self.horizon_T > 0:
                raise ValueError("evolution problems need terminal_g and a positive horizon_T")

    @property
    def stationary(self) -> bool:
        return self.kind == "stationary"

    def _eval(self, g, x, t):
        x = np.asarray(x, dtype=float)
        if not callable(g):
            return np.full(x.shape, float(g))
        out = g(x) if self.stationary else g(t, x)
        return np.broadcast_to(np.asarray(out, dtype=float), x.shape).copy()

    def phi(self, x, t=None):
        return self._eval(self.obstacle, x, t)

    def f(self, x, t=None):
        return self._eval(self.running_f, x, t)

    def c(self, x, t=None):
        return self._eval(self.discount_c, x, t)

    def g(self, x):
        x = np.asarray(x, dtype=float)
        if not callable(self.terminal_g):
            return np.full(x.shape, float(self.terminal_g))
        return np.asarray(self.terminal_g(x), dtype=float)

    def extension_at(self, t=None) -> Extension:
        e = self.extension
        if e in ("edge", "affine"):
            return Extension(e)
        if e == "obstacle":
            return Extension("function", lambda x: self.phi(x, t))
        if callable(e):
            return Extension("function", (lambda x: e(x)) if self.stationary else (lambda x: e(t, x)))
        raise ValueError(f"unknown extension rule {e!r}")

    def c0(self, x) -> float:
        """Smallest sampled discount rate (over all sampled times for evolution)."""
        if self.stationary:
            return float(np.min(self.c(x)))
        ts = np.linspace(0.0, self.horizon_T, 5)
        return float(min(np.min(self.c(x, t)) for t in ts))

    def check_stationary(self, x):
        c0 = self.c0(x)
        if not c0 > 0:
            raise DomainError(f"stationary problem needs c >= c0 > 0; sampled min c = {c0}")
        return c0

    def check_compatibility(self, x):
        gap = self.g(x) - self.phi(x, self.horizon_T)
        if np.any(gap < 0):
            j = int(np.argmin(gap))
            raise CompatibilityError(
                f"terminal data below the obstacle at x={x[j]:.6g} (g - phi = {gap[j]:.3g})")

    def oscillation(self, x) -> float:
        """``sup phi - inf phi + sup|f| / c0`` over the sampled domain."""
        p = self.phi(x) if self.stationary else self.phi(x, 0.0)
        c0 = self.c0(x)
        fmax = float(np.max(np.abs(self.f(x) if self.stationary else self.f(x, 0.0))))
        return float(p.max() - p.min()) + (fmax / c0 if fmax > 0 else 0.0)


def put_payoff(K: float) -> Callable:
    return lambda x: np.maximum(K - np.exp(x), 0.0)


def call_payoff(K: float) -> Callable:
    return lambda x: np.maximum(np.exp(x) - K, 0.0)


def perpetual_put(K: float, r: float, domain=(-3.0, 3.0), **kw) -> ObstacleProblemSpec:
    return ObstacleProblemSpec("stationary", put_payoff(K), 0.0, r, domain=domain,
                               label=f"perpetual put K={K:g} r={r:g}", **kw)


def american_put(K: float, r: float, T: float, domain=(-3.0, 3.0), **kw) -> ObstacleProblemSpec:
    p = put_payoff(K)
    return ObstacleProblemSpec("evolution", lambda t, x: p(x), 0.0, r, terminal_g=p, horizon_T=T,
                               domain=domain, label=f"american put K={K:g} r={r:g} T={T:g}", **kw)


# ---------------------------------------------------------------------------
# value grids
# ---------------------------------------------------------------------------

@dataclass
class ValueGrid:
    """Grid solution; arrays are ``(n_x,)`` (stationary) or ``(n_t, n_x)``."""

    x: np.ndarray
    values: np.ndarray
    phi: np.ndarray
    contact: np.ndarray
    residuals: np.ndarray
    t: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    @property
    def is_evolution(self) -> bool:
        return self.t is not None

    @property
    def h(self) -> float:
        return float(self.x[1] - self.x[0])

    def slice_values(self, k: Optional[int] = None) -> np.ndarray:
        return self.values if not self.is_evolution else self.values[k]

    def at(self, x, k: int = 0, extension: Optional[Callable] = None) -> np.ndarray:
        """Linear interpolation in x (time slice ``k`` for evolution grids).

        Points outside the grid use ``extension`` when given, else the edge values.
        """
        v = self.slice_values(k if self.is_evolution else None)
        x = np.asarray(x, dtype=float)
        out = np.interp(x, self.x, v)
        if extension is not None:
            outside = (x < self.x[0]) | (x > self.x[-1])
            if np.any(outside):
                out = np.where(outside, extension(x), out)
        return out

    def rows(self):
        if self.is_evolution:
            for k, t in enumerate(self.t):
                for j, x in enumerate(self.x):
                    yield (repr(float(t)), repr(float(x)), repr(float(self.values[k, j])),
                           repr(float(self.phi[k, j])), str(int(self.contact[k, j])),
                           repr(float(self.residuals[k, j])))
        else:
            for j, x in enumerate(self.x):
                yield ("", repr(float(x)), repr(float(self.values[j])), repr(float(self.phi[j])),
                       str(int(self.contact[j])), repr(float(self.residuals[j])))

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "x", "v", "phi", "contact", "residual"])
            w.writerows(self.rows())


def _grid(spec: ObstacleProblemSpec, grid) -> np.ndarray:
    if np.isscalar(grid):
        return np.linspace(spec.domain[0], spec.domain[1], int(grid))
    x = np.asarray(grid, dtype=float)
    d = np.diff(x)
    if len(x) < 3 or not np.allclose(d, d[0], rtol=1e-9, atol=0):
        raise ValueError("grid must be uniform with at least 3 points")
    return x


def _generator(op: OperatorSpec, x: np.ndarray) -> DiscreteGenerator:
    if op.state_dependent_F:
        raise DomainError("grid solvers need a state-independent jump map F(y)")
    return DiscreteGenerator(op, x[0], x[1] - x[0], len(x), interpolation="linear",
                             drift_scheme="upwind")


# ---------------------------------------------------------------------------
# complementarity solvers
# ---------------------------------------------------------------------------

def _howard_dense(M, q, phi, tol, max_iter, v0=None):
    """Policy iteration for ``min(M v - q, v - phi) = 0``; ties go to contact."""
    n = len(q)
    v = phi.copy() if v0 is None else v0.copy()
    policy = None
    for it in range(1, max_iter + 1):
        new = (v - phi) <= (M @ v - q)
        if policy is not None and np.array_equal(new, policy):
            return v, it - 1
        policy = new
        S = M.copy()
        rhs = q.copy()
        S[policy, :] = 0.0
        S[policy, policy] = 1.0
        rhs[policy] = phi[policy]
        v = linalg.solve(S, rhs, check_finite=False)
        v[policy] = phi[policy]     # exact on contact rows, not up to LU rounding
    raise NoConvergence(f"policy iteration did not settle in {max_iter} iterations",
                        iterations=max_iter, omega=None)


def _howard_banded(lo, dg, up, q, phi, max_iter, v0):
    """Policy iteration for a tridiagonal complementarity system."""
    n = len(q)
    v = v0.copy()
    policy = None

    def matvec(u):
        out = dg * u
        out[1:] += lo[1:] * u[:-1]
        out[:-1] += up[:-1] * u[1:]
        return out

    for it in range(1, max_iter + 1):
        new = (v - phi) <= (matvec(v) - q)
        if policy is not None and np.array_equal(new, policy):
            return v, it - 1
        policy = new
        ab = np.zeros((3, n))
        ab[0, 1:] = np.where(policy[:-1], 0.0, up[:-1])
        ab[1] = np.where(policy, 1.0, dg)
        ab[2, :-1] = np.where(policy[1:], 0.0, lo[1:])
        rhs = np.where(policy, phi, q)
        v = linalg.solve_banded((1, 1), ab, rhs, check_finite=False)
        v[policy] = phi[policy]
    raise NoConvergence(f"policy iteration did not settle in {max_iter} iterations",
                        iterations=max_iter, omega=None)


def _projected_jacobi(M, q, phi, tol, max_iter, omega, v0=None):
    d = np.diag(M)
    v = np.maximum(phi, 0.0 if v0 is None else v0)
    upd = math.inf
    for it in range(1, max_iter + 1):
        new = np.maximum(phi, v + omega * (q - M @ v) / d)
        upd = float(np.max(np.abs(new - v)))
        v = new
        if upd < tol:
            return v, it
    raise NoConvergence(f"projected Jacobi stalled after {max_iter} sweeps (last update {upd:.3g}); "
                        f"reduce omega (now {omega})", iterations=max_iter, omega=omega, update=upd)


def solve_stationary_grid(spec: ObstacleProblemSpec, op: OperatorSpec, grid=801, tol: float = 1e-10,
                          max_iter: Optional[int] = None, method: str = "policy",
                          omega: float = 0.8) -> ValueGrid:
    """Grid solution of the stationary obstacle problem.

    ``method="policy"`` (default) runs policy iteration on the dense
    complementarity system and terminates when the exercise set repeats;
    ``method="jacobi"`` runs damped projected Jacobi sweeps
    ``v <- max(phi, v + omega D^-1 (q - M v))`` until the sup-norm update is
    below ``tol``.
    """
    if not spec.stationary:
        raise ValueError("solve_stationary_grid needs a stationary problem")
    x = _grid(spec, grid)
    c0 = spec.check_stationary(x)
    gen = _generator(op, x)
    A, cvec = gen.matrix(spec.extension_at())
    M = -A + np.diag(spec.c(x))
    q = spec.f(x) + cvec
    phi = spec.phi(x)
    if method == "policy":
        v, iters = _howard_dense(M, q, phi, tol, max_iter or 200)
    elif method == "jacobi":
        v, iters = _projected_jacobi(M, q, phi, tol, max_iter or 200_000, omega)
    else:
        raise ValueError(f"unknown method {method!r}")
    res = np.minimum(M @ v - q, v - phi)
    contact = (v - phi) <= tol_contact(tol)
    meta = dict(method=method, iterations=int(iters), tol=tol, omega=omega if method == "jacobi" else None,
                scheme="linear-weights/upwind", h=float(x[1] - x[0]), c0=c0,
                jump_intensity=gen.jump_intensity, eps_inner=gen.quad.eps, tail_cutoff=gen.quad.R)
    return ValueGrid(x, v, phi, contact, res, None, meta)


def _t_mesh(spec, t_mesh) -> np.ndarray:
    if np.isscalar(t_mesh):
        return np.linspace(0.0, spec.horizon_T, int(t_mesh) + 1)
    t = np.asarray(t_mesh, dtype=float)
    if np.any(np.diff(t) <= 0) or not np.isclose(t[-1], spec.horizon_T):
        raise ValueError("time mesh must increase and end at the horizon")
    return t


def solve_evolution_grid(spec: ObstacleProblemSpec, op: OperatorSpec, t_mesh=100, x_grid=801,
                         tol: float = 1e-10, max_iter: Optional[int] = None) -> ValueGrid:
    """Backward IMEX time stepping for the evolution obstacle problem.

    Drift, inner second difference and discount are implicit, the jump
    integral explicit. Each step solves its tridiagonal complementarity
    system exactly (policy iteration), so the result is the projection of
    the implicit step onto ``v >= phi``. Requires ``dt * jump_intensity <= 1``.
    """
    if spec.stationary:
        raise ValueError("solve_evolution_grid needs an evolution problem")
    x = _grid(spec, x_grid)
    t = _t_mesh(spec, t_mesh)
    spec.check_compatibility(x)
    gen = _generator(op, x)
    dts = np.diff(t)
    lam = gen.jump_intensity
    if dts.max() * lam > 1.0 + 1e-12:
        raise StabilityError(f"dt * jump intensity = {dts.max() * lam:.3g} > 1 "
                             f"(intensity {lam:.4g}); use dt <= {1.0 / lam:.4g}")
    ext_T = spec.extension_at(spec.horizon_T)
    A_loc, _ = gen.matrix(ext_T, "local")
    A_jmp, _ = gen.matrix(ext_T, "jump")
    function_ext = ext_T.kind == "function"
    lo = np.concatenate([[0.0], np.diag(A_loc, -1)])
    dg = np.diag(A_loc).copy()
    up = np.concatenate([np.diag(A_loc, 1), [0.0]])
    n_t, n = len(t), len(x)
    V = np.empty((n_t, n))
    PHI = np.empty((n_t, n))
    RES = np.zeros((n_t, n))
    V[-1] = spec.g(x)
    PHI[-1] = spec.phi(x, t[-1])
    zero = np.zeros(n)
    total_iters = 0

    def offsets(tk):
        if not function_ext:
            return zero, zero
        e = spec.extension_at(tk)
        u0 = SampledFunction(x[0], x[1] - x[0], zero, e)
        return gen._part(u0, "local"), gen._part(u0, "jump")

    _, cj_next = offsets(t[-1])
    for k in range(n_t - 2, -1, -1):
        dt = dts[k]
        tk = t[k]
        cl_k, cj_k = offsets(tk)
        ck = spec.c(x, tk)
        phi_k = spec.phi(x, tk)
        rhs = V[k + 1] / dt + A_jmp @ V[k + 1] + cj_next + cl_k + spec.f(x, tk)
        diag = 1.0 / dt + ck - dg
        v, it = _howard_banded(-lo, diag, -up, rhs, phi_k, max_iter or 200, np.maximum(V[k + 1], phi_k))
        total_iters += it
        Mv = diag * v
        Mv[1:] -= lo[1:] * v[:-1]
        Mv[:-1] -= up[:-1] * v[1:]
        RES[k] = np.minimum(Mv - rhs, v - phi_k)
        V[k] = v
        PHI[k] = phi_k
        cj_next = cj_k
    contact = (V - PHI) <= tol_contact(tol)
    meta = dict(method="imex-policy", iterations=int(total_iters), tol=tol, h=float(x[1] - x[0]),
                dt_max=float(dts.max()), jump_intensity=lam, stability=float(dts.max() * lam),
                scheme="linear-weights/upwind", eps_inner=gen.quad.eps, tail_cutoff=gen.quad.R)
    return ValueGrid(x, V, PHI, contact, RES, t, meta)


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------

@dataclass
class MCEstimate:
    """Monte Carlo values at probe points with their error bookkeeping."""

    x: np.ndarray
    value: np.ndarray
    stderr: np.ndarray
    bermudan_bias: np.ndarray
    horizon_bias: float = 0.0
    extrapolated: Optional[np.ndarray] = None
    policy: Optional["StoppingPolicy"] = None
    meta: dict = field(default_factory=dict)

    def budget(self, k: int) -> float:
        return 3.0 * float(self.stderr[k]) + float(self.bermudan_bias[k]) + self.horizon_bias


@dataclass
class StoppingPolicy:
    """Exercise rule on simulated dates.

    ``kind="threshold"``: stop at the first date with ``x <= level`` (side
    ``"below"``) or ``x >= level`` (side ``"above"``), one level per probe.
    ``kind="regression"``: stop when the obstacle is at least the regressed
    continuation value; ``coefficients[k]`` holds the fit at date k.
    """

    kind: str
    basis_degree: int = 3
    levels: Optional[np.ndarray] = None
    sides: Optional[list] = None
    coefficients: Optional[list] = None

    def exercise_threshold(self, p: int, x) -> np.ndarray:
        lv = self.levels[p]
        return (x <= lv) if self.sides[p] == "below" else (x >= lv)


def _path_source(process: ProcessSpec, probes, T, mesh, eps, n_paths, seed, dt_max=1e-3):
    """Yield, block by block, a list with one state array per probe."""
    translate = process.constant_drift and not process.state_dependent_F
    if translate:
        for Y, _ in iter_path_blocks(process, 0.0, T, mesh, eps, n_paths, seed, dt_max):
            shared = {}
            yield [_Paths(x + Y, Y, float(x), shared) for x in probes]
    else:
        its = [iter_path_blocks(process, float(x), T, mesh, eps, n_paths, seed, dt_max) for x in probes]
        for parts in zip(*its):
            yield [_Paths(p[0]) for p in parts]


class _Paths:
    """A block of paths with cached running extremes.

    For translated Levy paths ``X = x + Y`` the extremes of ``Y`` are shared
    between probes (``shared`` is one dict per block), so they are computed
    once and shifted.
    """

    def __init__(self, X, base=None, shift=0.0, shared=None):
        self.X, self.base = X, base
        self.shift = shift if base is not None else 0.0
        self.shared = {} if shared is None else shared
        self.shape = X.shape

    def running_base(self, side):
        """Running extreme of the unshifted paths."""
        src = self.base if self.base is not None else self.X
        if side not in self.shared:
            op = np.minimum if side == "below" else np.maximum
            self.shared[side] = op.accumulate(src, axis=1)
        return self.shared[side]

    def subsample(self, idx):
        sub = self.shared.setdefault("sub", {})
        if self.base is not None:
            if "base" not in sub:
                sub["base"] = self.base[:, idx]
            return _Paths(self.shift + sub["base"], sub["base"], self.shift, sub)
        return _Paths(self.X[:, idx])


def _discount_tracks(spec, X, times):
    """Discount factors ``D_k`` and accumulated running payoff ``R_k`` per date."""
    dt = np.diff(times)
    if callable(spec.discount_c) or callable(spec.running_f):
        cs = np.stack([spec.c(X[:, k], times[k]) if not spec.stationary else spec.c(X[:, k])
                       for k in range(X.shape[1] - 1)], axis=1)
        fs = np.stack([spec.f(X[:, k], times[k]) if not spec.stationary else spec.f(X[:, k])
                       for k in range(X.shape[1] - 1)], axis=1)
    else:
        cs = np.full((1, len(dt)), float(spec.discount_c))
        fs = np.full((1, len(dt)), float(spec.running_f))
    step = np.exp(-cs * dt)
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = np.where(cs > 0, fs * (1 - step) / np.where(cs > 0, cs, 1.0), fs * dt)
    D = np.concatenate([np.ones((step.shape[0], 1)), np.cumprod(step, axis=1)], axis=1)
    R = np.concatenate([np.zeros((step.shape[0], 1)), np.cumsum(D[:, :-1] * gain, axis=1)], axis=1)
    return np.broadcast_to(D, X.shape), np.broadcast_to(R, X.shape)


def _first_hits(paths, levels, side):
    """First date index with ``X <= level`` (or ``>=``) per (path, level); m+1 if never.

    Running extremes are monotone along each path, so all rows are packed
    into one sorted array (row r offset by ``r * span``) and every
    (path, level) query is a single ``searchsorted``.
    """
    n, m1 = paths.shape
    key = "flat_" + side
    if key not in paths.shared:
        run = paths.running_base(side)
        k = -run if side == "below" else run
        lo, hi = float(k.min()), float(k.max())
        span = hi - lo + 2.0
        flat = (k - lo + span * np.arange(n)[:, None]).ravel()
        paths.shared[key] = (flat, lo, hi, span)
    flat, lo, hi, span = paths.shared[key]
    lv = np.asarray(levels, dtype=float) - paths.shift
    lv = -lv if side == "below" else lv
    lvc = np.clip(lv, lo - 0.5, hi + 0.5) - lo
    q = lvc[None, :] + span * np.arange(n)[:, None]
    idx = np.searchsorted(flat, q.ravel(), side="left").reshape(n, len(lv))
    return np.clip(idx - m1 * np.arange(n)[:, None], 0, m1)


def _threshold_cashflows(spec, paths, times, levels, side, payoff_exit=None, exit_idx=None):
    """Cash flows of threshold rules; forced stop at the last date."""
    X = paths.X
    n, m1 = X.shape
    D, R = _discount_tracks(spec, X, times)
    k = np.minimum(_first_hits(paths, levels, side), m1 - 1)
    rows = np.arange(n)[:, None]
    xs = X[rows, k]
    if spec.stationary:
        ph = spec.phi(xs)
    else:
        ph = spec.phi(xs, times[k])
    last = k == m1 - 1
    if payoff_exit is not None:
        # exit (or horizon) before or at the hit: collect the substituted value there
        use_exit = exit_idx[:, None] <= k
        ke = np.where(use_exit, exit_idx[:, None], k)
        xe = X[rows, ke]
        val = np.where(use_exit, payoff_exit(xe), ph)
        return D[rows, ke] * val + R[rows, ke]
    if not spec.stationary and spec.terminal_g is not None:
        ph = np.where(last, spec.g(xs), ph)
    return D[rows, k] * ph + R[rows, k]


def _records(paths, side):
    """Record points of the running extreme: (rows, dates, value, previous value).

    Keys are ``X`` (side ``"below"``) or ``-X`` (side ``"above"``) of the
    unshifted paths, so a level ``a`` is hit at the record whose key
    interval ``[value, previous)`` contains the level key.
    """
    name = "records_" + side
    if name not in paths.shared:
        src = paths.base if paths.base is not None else paths.X
        key = src if side == "below" else -src
        rm = np.minimum.accumulate(key, axis=1)
        rec = np.ones(rm.shape, dtype=bool)
        rec[:, 1:] = rm[:, 1:] < rm[:, :-1]
        rows, ks = np.nonzero(rec)
        lo = rm[rows, ks]
        hi = np.empty_like(lo)
        hi[0] = np.inf
        hi[1:] = np.where(rows[1:] != rows[:-1], np.inf, lo[:-1])
        start = np.searchsorted(rows, np.arange(rm.shape[0]))
        paths.shared[name] = (rows, ks, lo, hi, start)
    return paths.shared[name]


def _level_sums(spec, paths, times, levels, side, payoff_exit=None, exit_idx=None):
    """Sum over paths of threshold-rule cash flows, for every candidate level.

    A path's cash flow is piecewise constant in the level and changes only
    at its record lows (highs), so each record contributes one interval of
    levels; the intervals are accumulated with a difference array.
    """
    X = paths.X
    n, m1 = X.shape
    rows, ks, lo, hi, start = _records(paths, side)
    lv = np.asarray(levels, dtype=float) - paths.shift
    if side == "above":
        lv = -lv
    order = np.argsort(lv, kind="stable")
    L = lv[order]
    e = np.full(n, m1 - 1) if exit_idx is None else np.asarray(exit_idx)
    keep = ks < e[rows]
    r, k = rows[keep], ks[keep]
    D, R = _discount_tracks(spec, X, times)
    val = D[r, k] * spec.phi(X[r, k]) + R[r, k]
    count = np.bincount(r, minlength=n)
    last = start + count - 1
    final_hi = np.where(count > 0, lo[np.maximum(last, 0)], np.inf)
    xe = X[np.arange(n), e]
    pay = payoff_exit(xe) if payoff_exit is not None else spec.phi(xe)
    final_val = D[np.arange(n), e] * pay + R[np.arange(n), e]
    seg_lo = np.concatenate([lo[keep], np.full(n, -np.inf)])
    seg_hi = np.concatenate([hi[keep], final_hi])
    seg_v = np.concatenate([val, final_val])
    j0 = np.searchsorted(L, seg_lo, side="left")
    # an open upper end also covers the level +inf
    j1 = np.where(np.isposinf(seg_hi), len(L), np.searchsorted(L, seg_hi, side="left"))
    NL = len(L)
    acc = np.cumsum(np.bincount(j0, seg_v, NL + 1) - np.bincount(j1, seg_v, NL + 1))[:NL]
    out = np.empty(NL)
    out[order] = acc
    return out


def _candidate_levels(spec, n_candidates):
    lo, hi = spec.domain
    return np.concatenate([[-np.inf], np.linspace(lo, hi, n_candidates), [np.inf]])


def _fit_thresholds(spec, process, probes, T, mesh, eps, n_paths, seed, n_candidates,
                    payoff_exit=None, exit_fn=None):
    levels = _candidate_levels(spec, n_candidates)
    sums = {s: np.zeros((len(probes), len(levels))) for s in ("below", "above")}
    for states in _path_source(process, probes, T, mesh, eps, n_paths, seed):
        for p, X in enumerate(states):
            ex = exit_fn(X, p) if exit_fn is not None else None
            for s in sums:
                sums[s][p] += _level_sums(spec, X, mesh, levels, s, payoff_exit, ex)
    best_lv, best_side = np.empty(len(probes)), []
    for p in range(len(probes)):
        b = sums["below"][p].argmax()
        a = sums["above"][p].argmax()
        if sums["below"][p][b] >= sums["above"][p][a]:
            best_lv[p], side = levels[b], "below"
        else:
            best_lv[p], side = levels[a], "above"
        best_side.append(side)
    return StoppingPolicy("threshold", levels=best_lv, sides=best_side)


def _price_thresholds(spec, process, probes, T, mesh, eps, n_paths, seed, policy,
                      payoff_exit=None, exit_fn=None):
    """Pricing-set means with the fitted policy on the full and the even-date mesh."""
    P = len(probes)
    s1, s2, s1c = np.zeros(P), np.zeros(P), np.zeros(P)
    count = 0
    even = np.arange(0, len(mesh), 2)
    if even[-1] != len(mesh) - 1:
        even = np.append(even, len(mesh) - 1)
    for states in _path_source(process, probes, T, mesh, eps, n_paths, seed):
        count += states[0].shape[0]
        for p, X in enumerate(states):
            lv = np.array([policy.levels[p]])
            ex = exit_fn(X, p) if exit_fn is not None else None
            cf = _threshold_cashflows(spec, X, mesh, lv, policy.sides[p], payoff_exit, ex)[:, 0]
            Xe = X.subsample(even)
            ex2 = None
            if ex is not None:
                ex2 = np.searchsorted(even, ex, side="left")
            cf2 = _threshold_cashflows(spec, Xe, mesh[even], lv, policy.sides[p], payoff_exit, ex2)[:, 0]
            s1[p] += cf.sum()
            s1c[p] += (cf * cf).sum()
            s2[p] += cf2.sum()
    mean = s1 / count
    var = np.maximum(s1c / count - mean ** 2, 0.0) * count / max(count - 1, 1)
    return mean, np.sqrt(var / count), s2 / count


def horizon_for(spec: ObstacleProblemSpec, target_tol: float, x=None) -> float:
    """Proxy horizon with discounting bias ``e^{-c0 T} * osc <= 0.1 * target_tol``."""
    x = np.linspace(*spec.domain, 401) if x is None else x
    c0 = spec.check_stationary(x)
    osc = spec.oscillation(x)
    if osc <= 0:
        return 1.0
    return max(1.0, math.log(osc / (0.1 * target_tol)) / c0)


def solve_stationary_mc(spec: ObstacleProblemSpec, process: ProcessSpec, x_eval,
                        horizon_proxy: Optional[float] = None, n_paths: int = 50_000, seed: int = 0,
                        dt: float = 0.05, eps_trunc: float = 3e-3, target_tol: float = 1e-3,
                        n_candidates: int = 1601) -> MCEstimate:
    """Long-horizon Monte Carlo value of the stationary problem at ``x_eval``.

    The problem is time-homogeneous, so the stopping rule is searched among
    stationary one-sided exercise regions ``{x <= a}`` / ``{x >= a}`` (with
    "never" and "immediately" included). The level is fitted on one path set
    and priced on an independent one; stopping is forced at the proxy
    horizon, whose discounting bias is bounded by ``e^{-c0 T} osc``.
    """
    if not spec.stationary:
        raise ValueError("solve_stationary_mc needs a stationary problem")
    probes = np.atleast_1d(np.asarray(x_eval, dtype=float))
    xs = np.linspace(*spec.domain, 401)
    c0 = spec.check_stationary(xs)
    T = horizon_proxy if horizon_proxy is not None else horizon_for(spec, target_tol, xs)
    n_steps = max(2, int(math.ceil(T / dt)))
    mesh = np.linspace(0.0, T, n_steps + 1)
    bias = math.exp(-c0 * T) * spec.oscillation(xs)
    policy = _fit_thresholds(spec, process, probes, T, mesh, eps_trunc, n_paths,
                             derived_seed(seed, 1), n_candidates)
    mean, se, mean2 = _price_thresholds(spec, process, probes, T, mesh, eps_trunc, n_paths,
                                        derived_seed(seed, 2), policy)
    berm = np.abs(mean - mean2)
    meta = dict(horizon=T, n_steps=n_steps, dt=T / n_steps, eps_trunc=eps_trunc, n_paths=n_paths,
                seed=int(seed), sigma2_eps=truncation_variance(process, eps_trunc), c0=c0)
    return MCEstimate(probes, mean, se, berm, bias, mean + (mean - mean2), policy, meta)


def _basis(x, ph, degree):
    cols = [np.ones_like(x)]
    for d in range(1, degree + 1):
        cols.append(x ** d)
    for d in range(1, degree + 1):
        cols.append(ph ** d)
    return np.stack(cols, axis=1)


def _scaled(x, ph):
    sx = x.std() or 1.0
    sp = ph.std() or 1.0
    return (x - x.mean()) / sx, (ph - ph.mean()) / sp, (x.mean(), sx, ph.mean(), sp)


def _ls_fit(spec, X, times, degree):
    """Backward regression; returns per-date (scaling, coefficients) or None."""
    n, m1 = X.shape
    D, R = _discount_tracks(spec, X, times)
    Y = spec.g(X[:, -1])
    fits = [None] * m1
    for k in range(m1 - 2, 0, -1):
        step = D[:, k + 1] / D[:, k]
        gain = (R[:, k + 1] - R[:, k]) / D[:, k]
        cont = step * Y + gain
        ph = spec.phi(X[:, k], times[k])
        itm = ph > 0 if np.any(ph > 0) and np.all(ph >= 0) else np.ones(n, dtype=bool)
        if itm.sum() > 2 * (2 * degree + 1):
            xs, ps, sc = _scaled(X[itm, k], ph[itm])
            coef, *_ = np.linalg.lstsq(_basis(xs, ps, degree), cont[itm], rcond=None)
            fits[k] = (sc, coef, itm.any())
            est = np.full(n, -np.inf)
            est[itm] = _basis(xs, ps, degree) @ coef
            ex = itm & (ph >= est)
        else:
            ex = np.zeros(n, dtype=bool)
        Y = np.where(ex, ph, cont)
    cont0 = float(np.mean(D[:, 1] * Y + R[:, 1]))
    return fits, cont0


def _ls_price(spec, X, times, fits, cont0, dates=None):
    """Forward pricing with fitted rules; ``dates`` restricts exercise opportunities."""
    n, m1 = X.shape
    D, R = _discount_tracks(spec, X, times)
    alive = np.ones(n, dtype=bool)
    out = np.empty(n)
    ph0 = float(spec.phi(X[:1, 0], times[0])[0])
    if ph0 >= cont0:
        return np.full(n, ph0)
    allowed = set(range(1, m1 - 1)) if dates is None else set(dates)
    for k in range(1, m1 - 1):
        if k not in allowed or fits[k] is None:
            continue
        (mx, sx, mp, sp), coef, _ = fits[k]
        ph = spec.phi(X[:, k], times[k])
        itm = alive & ((ph > 0) if np.all(ph >= 0) and np.any(ph > 0) else True)
        est = _basis((X[:, k] - mx) / sx, (ph - mp) / sp, len(coef) // 2) @ coef
        ex = itm & (ph >= est)
        out[ex] = D[ex, k] * ph[ex] + R[ex, k]
        alive &= ~ex
    out[alive] = D[alive, -1] * spec.g(X[alive, -1]) + R[alive, -1]
    return out


def solve_evolution_mc(spec: ObstacleProblemSpec, process: ProcessSpec, t: float, x,
                       n_paths: int = 50_000, n_steps: int = 50, basis_degree: int = 3,
                       seed: int = 0, eps_trunc: float = 1e-3) -> MCEstimate:
    """Regression Monte Carlo for the evolution value ``v(t, x)``.

    Exercise dates are the ``n_steps`` mesh points of ``[t, T]`` (Bermudan
    lower bound). The Bermudan bias is estimated from the same pricing
    paths by exercising on every other date only; ``extrapolated`` is the
    halved-mesh Richardson value ``2 v_dt - v_2dt``.
    """
    if spec.stationary:
        raise ValueError("solve_evolution_mc needs an evolution problem")
    probes = np.atleast_1d(np.asarray(x, dtype=float))
    T = spec.horizon_T
    if not 0 <= t <= T:
        raise ValueError("t must lie in [0, T]")
    if np.isclose(t, T):
        g = spec.g(probes)
        z = np.zeros_like(g)
        return MCEstimate(probes, g, z, z, 0.0, g, None, dict(n_paths=0))
    tau = T - t
    mesh = np.linspace(0.0, tau, n_steps + 1)
    times = t + mesh
    shifted = _shift_time(spec, t)
    deg = basis_degree
    fits_all = []
    fit_src = _collect(process, probes, tau, mesh, eps_trunc, n_paths, derived_seed(seed, 1))
    price_src = _collect(process, probes, tau, mesh, eps_trunc, n_paths, derived_seed(seed, 2))
    val, se, val2 = [], [], []
    even = list(range(2, n_steps, 2))
    for p in range(len(probes)):
        fits, cont0 = _ls_fit(shifted, fit_src[p], mesh, deg)
        fits_all.append(fits)
        cf = _ls_price(shifted, price_src[p], mesh, fits, cont0)
        cf2 = _ls_price(shifted, price_src[p], mesh, fits, cont0, dates=even)
        val.append(cf.mean())
        se.append(cf.std(ddof=1) / math.sqrt(len(cf)))
        val2.append(cf2.mean())
    val, se, val2 = map(np.asarray, (val, se, val2))
    pol = StoppingPolicy("regression", basis_degree=deg, coefficients=fits_all)
    meta = dict(n_paths=n_paths, n_steps=n_steps, dt=tau / n_steps, eps_trunc=eps_trunc, seed=int(seed),
                sigma2_eps=truncation_variance(process, eps_trunc), t=t)
    return MCEstimate(probes, val, se, np.abs(val - val2), 0.0, 2 * val - val2, pol, meta)


def _collect(process, probes, T, mesh, eps, n_paths, seed):
    parts = [[] for _ in probes]
    for states in _path_source(process, probes, T, mesh, eps, n_paths, seed):
        for p, X in enumerate(states):
            parts[p].append(X.X)
    return [np.concatenate(ps, axis=0) for ps in parts]


def _shift_time(spec: ObstacleProblemSpec, t0: float) -> ObstacleProblemSpec:
    """The same problem with clock started at ``t0`` (data read at ``t0 + s``)."""
    wrap = lambda g: (lambda s, x: g(t0 + s, x)) if callable(g) else g
    return ObstacleProblemSpec("evolution", wrap(spec.obstacle), wrap(spec.running_f),
                               wrap(spec.discount_c), spec.terminal_g, spec.horizon_T - t0,
                               spec.domain, spec.extension, spec.lipschitz_b, spec.label)


# ---------------------------------------------------------------------------
# dynamic programming check
# ---------------------------------------------------------------------------

@dataclass
class DPPResult:
    x: float
    recomputed: float
    stderr: float
    grid_value: float
    discrepancy: float
    budget: float
    bermudan_bias: float
    grid_error: float

    @property
    def passed(self) -> bool:
        return self.discrepancy <= self.budget


def dpp_check(spec: ObstacleProblemSpec, process: ProcessSpec, x: float, r_ball: float,
              n_paths: int, seed: int, vhat: ValueGrid, grid_error: float = 0.0,
              horizon: float = 2.0, dt: float = 0.01, eps_trunc: float = 3e-3,
              n_candidates: int = 1601) -> DPPResult:
    """Recompute ``v(x)`` by stopping only before the exit from ``B_r(x)``.

    At the first simulated date outside the ball (or at the horizon) the
    grid value ``vhat`` is collected instead, as in the dynamic programming
    principle. The principle holds for any stopping time in place of the
    exit time, so discrete monitoring of the exit and capping it at
    ``horizon`` introduce no bias. Returns the discrepancy with the budget
    ``3 stderr + grid_error + Bermudan bias``.
    """
    if not spec.stationary:
        raise ValueError("dpp_check needs a stationary problem")
    xs = np.linspace(*spec.domain, 401)
    c0 = spec.check_stationary(xs)
    T = float(horizon)
    n_steps = max(2, int(math.ceil(T / dt)))
    mesh = np.linspace(0.0, T, n_steps + 1)
    ext = spec.extension_at()
    vfun = lambda z: vhat.at(z, extension=ext.func if ext.kind == "function" else None)
    probes = np.array([float(x)])

    def exit_fn(paths, p):
        out = np.abs(paths.X - probes[p]) > r_ball
        out[:, -1] = True
        return out.argmax(axis=1)

    pol = _fit_thresholds(spec, process, probes, T, mesh, eps_trunc, n_paths, derived_seed(seed, 1),
                          n_candidates, payoff_exit=vfun, exit_fn=exit_fn)
    mean, se, mean2 = _price_thresholds(spec, process, probes, T, mesh, eps_trunc, n_paths,
                                        derived_seed(seed, 2), pol, payoff_exit=vfun, exit_fn=exit_fn)
    v0 = float(vfun(probes)[0])
    berm = float(abs(mean[0] - mean2[0]))
    disc = abs(float(mean[0]) - v0)
    budget = 3 * float(se[0]) + grid_error + berm + 1e-12 * max(1.0, abs(v0))
    return DPPResult(float(x), float(mean[0]), float(se[0]), v0, disc, budget, berm, grid_error)


# ---------------------------------------------------------------------------
# free boundary and comparison
# ---------------------------------------------------------------------------

@dataclass
class FreeBoundary:
    t: np.ndarray                 # slice times (nan for stationary)
    points: list                  # per slice: array of boundary abscissae
    all_contact: list             # per slice: contact on the whole grid

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "x_star"])
            for t, pts in zip(self.t, self.points):
                ts = "" if np.isnan(t) else repr(float(t))
                for p in pts:
                    w.writerow([ts, repr(float(p))])

    def single(self, k: int = 0) -> float:
        pts = self.points[k]
        if len(pts) != 1:
            raise ValueError(f"slice {k} has {len(pts)} boundary points")
        return float(pts[0])


def _slice_boundary(x, v, phi, mask, tc):
    if not mask.any():
        return None
    if mask.all():
        return np.array([x[0], x[-1]]), True
    d = v - phi - tc
    pts = []
    for i in np.nonzero(mask[1:] != mask[:-1])[0]:
        if max(abs(phi[i]), abs(phi[i + 1])) <= tc:
            # the obstacle vanishes on both sides: v ~ 0 there is not an exercise decision
            continue
        a, b = d[i], d[i + 1]
        if b != a:
            s = min(max(-a / (b - a), 0.0), 1.0)
        else:
            s = 0.5
        pts.append(x[i] + s * (x[i + 1] - x[i]))
    return np.asarray(pts), False


def free_boundary(vg: ValueGrid, skip_terminal: bool = True) -> FreeBoundary:
    """Contact-set interfaces per time slice, refined by linear interpolation.

    Slices with an empty contact set are skipped; if every slice is empty
    ``EmptyContact`` is raised. The terminal slice of an evolution grid is
    skipped by default (there the contact set is wherever ``g = phi``).
    """
    tc = tol_contact(vg.meta.get("tol", 1e-10))
    if not vg.is_evolution:
        out = _slice_boundary(vg.x, vg.values, vg.phi, vg.contact, tc)
        if out is None:
            raise EmptyContact("contact set is empty")
        return FreeBoundary(np.array([np.nan]), [out[0]], [out[1]])
    ts, pts, full = [], [], []
    n = len(vg.t) - 1 if skip_terminal else len(vg.t)
    for k in range(n):
        out = _slice_boundary(vg.x, vg.values[k], vg.phi[k], vg.contact[k], tc)
        if out is None:
            continue
        ts.append(vg.t[k])
        pts.append(out[0])
        full.append(out[1])
    if not ts:
        raise EmptyContact("contact set is empty on every slice")
    return FreeBoundary(np.asarray(ts), pts, full)


@dataclass
class ComparisonRow:
    name: str
    max_violation: float
    passed: bool
    boundary_lo: Optional[float] = None
    boundary_hi: Optional[float] = None
    boundary_ordered: Optional[bool] = None


def monotonicity_suite(pairs: Sequence, op: OperatorSpec, tol: float = 1e-8,
                       boundaries: bool = False, **solver_kw) -> list:
    """Node-wise ordering checks for pairs ``(name, spec_lo, spec_hi)``.

    Each pair must differ in data that is ordered ``lo <= hi`` (obstacle,
    running payoff or terminal data); the solved values must satisfy
    ``v_lo <= v_hi + tol``. With ``boundaries`` the single stationary free
    boundaries are compared as well (``x*_lo <= x*_hi``).
    """
    rows = []
    for name, lo, hi in pairs:
        solve = solve_stationary_grid if lo.stationary else solve_evolution_grid
        a, b = solve(lo, op, **solver_kw), solve(hi, op, **solver_kw)
        viol = float(np.max(a.values - b.values))
        row = ComparisonRow(name, viol, viol <= tol)
        if boundaries:
            xa = free_boundary(a).points[0]
            xb = free_boundary(b).points[0]
            if len(xa) == 1 and len(xb) == 1:
                row.boundary_lo, row.boundary_hi = float(xa[0]), float(xb[0])
                row.boundary_ordered = row.boundary_lo <= row.boundary_hi + a.h
        rows.append(row)
    return rows
