"""Discrete nonlocal generator on a uniform 1-D lattice.

The operator

    Lu(x) = b(x) u'(x) + int (u(x + F(y)) - u(x) - F(y) u'(x)) nu(dy)

is split at ``|y| = eps_inner``. The inner part is replaced by the Taylor
term ``u''(x)/2 * int_{|y|<=eps} F^2 nu``; the outer part integrates a
piecewise-polynomial (cubic or linear Lagrange) interpolant of ``u``
against ``nu`` with Gauss-Legendre nodes on lattice-aligned cells, so that
on the grid it becomes a convolution with fixed weights. Interpolation is
linear in the data; constants and affine functions are reproduced exactly,
which makes the scheme annihilate them (row-sum compensation).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy import signal

from .errors import DomainError
from .levy_core import LevyMeasureSpec, LevyModel

_HEAVY_TAIL_CUTOFF = 1e3


@dataclass(frozen=True)
class Extension:
    """How a sampled function is continued outside its grid.

    kind is ``"affine"`` (last affine segment), ``"edge"`` (constant edge
    value) or ``"function"`` (a known function ``func``, e.g. the payoff).
    ``far`` optionally gives the values assumed for jumps landing beyond the
    quadrature cutoff on the (left, right); by default the extension itself
    is evaluated there.
    """

    kind: str = "affine"
    func: Optional[Callable] = None
    far: Optional[tuple] = None

    def __post_init__(self):
        if self.kind not in ("affine", "edge", "function"):
            raise ValueError(f"unknown extension kind {self.kind!r}")
        if self.kind == "function" and self.func is None:
            raise ValueError("function extension needs func")

    @property
    def homogeneous(self) -> "Extension":
        """The linear part of the extension map (zero outside for functions)."""
        if self.kind == "function":
            return Extension("function", lambda x: np.zeros_like(x), far=(0.0, 0.0))
        return self


@dataclass(frozen=True)
class SampledFunction:
    x_min: float
    h: float
    values: np.ndarray
    extension: Extension = Extension()

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        if v.ndim != 1 or len(v) < 3:
            raise ValueError("a sampled function needs at least 3 grid values")
        if not self.h > 0:
            raise ValueError("grid spacing must be positive")

    @classmethod
    def on_grid(cls, grid, values, extension=None) -> "SampledFunction":
        grid = np.asarray(grid, dtype=float)
        h = (grid[-1] - grid[0]) / (len(grid) - 1)
        return cls(float(grid[0]), float(h), values, extension or Extension())

    @classmethod
    def from_callable(cls, f, x_min, x_max, n, extension=None) -> "SampledFunction":
        grid = np.linspace(x_min, x_max, n)
        if extension is None:
            extension = Extension("function", f)
        return cls.on_grid(grid, f(grid), extension)

    @property
    def n(self) -> int:
        return len(self.values)

    @property
    def grid(self) -> np.ndarray:
        return self.x_min + self.h * np.arange(self.n)

    @property
    def x_max(self) -> float:
        return self.x_min + self.h * (self.n - 1)

    def lattice(self, idx) -> np.ndarray:
        """Values at integer lattice indices, using the extension off the grid."""
        idx = np.asarray(idx)
        out = np.empty(idx.shape, dtype=float)
        inside = (idx >= 0) & (idx < self.n)
        out[inside] = self.values[idx[inside]]
        if np.any(~inside):
            out[~inside] = self._extend(idx[~inside])
        return out

    def _extend(self, idx) -> np.ndarray:
        v, ext = self.values, self.extension
        if ext.kind == "function":
            return np.asarray(ext.func(self.x_min + self.h * idx), dtype=float)
        left = idx < 0
        out = np.empty(idx.shape, dtype=float)
        if ext.kind == "edge":
            out[left] = v[0]
            out[~left] = v[-1]
        else:
            k = idx.astype(float)
            out[left] = v[0] + k[left] * (v[1] - v[0])
            out[~left] = v[-1] + (k[~left] - (self.n - 1)) * (v[-1] - v[-2])
        return out

    def far_values(self, x_nodes, R) -> tuple:
        """Assumed values of the function for jumps beyond the cutoff ``R``."""
        ext = self.extension
        if ext.far is not None:
            return float(ext.far[0]), float(ext.far[1])
        if ext.kind == "edge":
            return self.values[0], self.values[-1]
        if ext.kind == "function":
            return (np.asarray(ext.func(x_nodes - R), dtype=float),
                    np.asarray(ext.func(x_nodes + R), dtype=float))
        kl = (x_nodes - R - self.x_min) / self.h
        kr = (x_nodes + R - self.x_min) / self.h
        v = self.values
        return v[0] + kl * (v[1] - v[0]), v[-1] + (kr - (self.n - 1)) * (v[-1] - v[-2])

    def __call__(self, x, order: str = "cubic") -> np.ndarray:
        """Lagrange interpolation (cubic or linear) with the extension."""
        x = np.asarray(x, dtype=float)
        s = (x - self.x_min) / self.h
        c = np.floor(s).astype(np.int64)
        frac = s - c
        offs, basis = _lagrange(frac, order)
        vals = self.lattice(c[..., None] + offs)
        return (vals * basis).sum(axis=-1)

    def with_values(self, values) -> "SampledFunction":
        return SampledFunction(self.x_min, self.h, values, self.extension)


def _lagrange(frac, order):
    """Stencil offsets and basis values for interpolation at ``c + frac``."""
    frac = np.asarray(frac, dtype=float)[..., None]
    if order == "linear":
        offs = np.array([0, 1])
        basis = np.concatenate([1 - frac, frac], axis=-1)
        return offs, basis
    if order != "cubic":
        raise ValueError(f"unknown interpolation order {order!r}")
    t = frac
    offs = np.array([-1, 0, 1, 2])
    basis = np.concatenate([
        -t * (t - 1) * (t - 2) / 6.0,
        (t + 1) * (t - 1) * (t - 2) / 2.0,
        -(t + 1) * t * (t - 2) / 2.0,
        (t + 1) * t * (t - 1) / 6.0,
    ], axis=-1)
    return offs, basis


@dataclass(frozen=True)
class OperatorSpec:
    """Drift, Levy measure and jump map of a generator, plus quadrature settings.

    ``jump_map_F`` is ``F(x, y)`` (vectorized) or ``None`` for ``F = y``.
    ``eps_inner`` defaults to the grid spacing; ``quad_nodes`` is the number
    of Gauss-Legendre nodes per lattice cell.
    """

    measure: LevyMeasureSpec
    drift_b: Union[float, Callable] = 0.0
    jump_map_F: Optional[Callable] = None
    eps_inner: Optional[float] = None
    quad_nodes: int = 8
    tail_cutoff: Optional[float] = None
    state_dependent_F: bool = False

    def __post_init__(self):
        if self.eps_inner is not None and not self.eps_inner > 0:
            raise ValueError("eps_inner must be positive")

    @classmethod
    def from_model(cls, model: LevyModel, **kw) -> "OperatorSpec":
        return cls(measure=model.measure, drift_b=float(model.drift), **kw)

    def b(self, x):
        if callable(self.drift_b):
            return np.asarray(self.drift_b(x), dtype=float)
        return np.full(np.shape(x), float(self.drift_b))

    def F(self, x, y):
        if self.jump_map_F is None:
            return np.asarray(y, dtype=float)
        return np.asarray(self.jump_map_F(x, y), dtype=float)

    def cutoff(self) -> float:
        if self.tail_cutoff is not None:
            return float(self.tail_cutoff)
        m = self.measure
        reach = max([abs(h) for h, _ in m.point_masses], default=0.0)
        if m.density is None:
            return reach
        if m.tail_rates is None or min(m.tail_rates) <= 0:
            return max(reach, _HEAVY_TAIL_CUTOFF)
        R = 1.0
        for s in (1, -1):
            x = 1.0
            while float(m.evaluate(np.array([s * x]))[0]) * x > 1e-17 and x < 1e4:
                x *= 1.1
            R = max(R, x)
        return max(R, reach)


@dataclass
class _Quadrature:
    """Signed nodes ``y`` and weights ``nu(dy)`` covering ``eps < |y| <= R``."""
    y: np.ndarray
    w: np.ndarray
    m2_inner: float            # int_{|y|<=eps} F^2 nu
    far_mass: tuple            # nu beyond R on (left, right)
    far_first: float           # int_{|y|>R} F nu (0 for symmetric heavy tails)
    eps: float
    R: float


def _far_mass(m: LevyMeasureSpec, R: float, s: int) -> float:
    """``nu`` beyond ``R`` on one side; power tails use ``f(R) R / p``."""
    k = 1 if s > 0 else 0
    if m.tail_rates is not None and m.tail_rates[k] == 0.0:
        p = m.tail_powers[k]
        if not p > 0:
            raise DomainError("non-integrable heavy tail")
        return float(m.evaluate(np.array([s * R]))[0]) * R / p
    return m.mass(R, side=s)


def _outer_quadrature(op: OperatorSpec, h: float) -> _Quadrature:
    m = op.measure
    eps = float(op.eps_inner) if op.eps_inner is not None else h
    R = max(op.cutoff(), eps)
    gx, gw = np.polynomial.legendre.leggauss(op.quad_nodes)
    ys, ws = [], []
    if m.density is not None and R > eps:
        k0 = int(math.floor(eps / h + 1e-9))
        k1 = int(math.ceil(R / h - 1e-9))
        edges = h * np.arange(k0, k1 + 1, dtype=float)
        edges[0] = max(edges[0], eps)
        edges = edges[(edges >= eps) & (edges < R)]
        if edges[0] > eps:
            edges = np.concatenate([[eps], edges])
        if edges[-1] < R:
            edges = np.concatenate([edges, [R]])
        a, b = edges[:-1], edges[1:]
        keep = b > a
        a, b = a[keep], b[keep]
        mid, half = 0.5 * (a + b), 0.5 * (b - a)
        u = (mid[:, None] + half[:, None] * gx[None, :]).ravel()
        wu = (half[:, None] * gw[None, :]).ravel()
        for s in (1, -1):
            ys.append(s * u)
            ws.append(wu * m.evaluate(s * u))
    for hj, lam in m.point_masses:
        if eps < abs(hj) <= R:
            ys.append(np.array([hj]))
            ws.append(np.array([lam]))
    y = np.concatenate(ys) if ys else np.zeros(0)
    w = np.concatenate(ws) if ws else np.zeros(0)

    if op.jump_map_F is None:
        m2 = m.moment(2, upper=eps) if m.density is not None else 0.0
        m2 += sum(lam * hj * hj for hj, lam in m.point_masses if abs(hj) <= eps)
    else:
        F0 = lambda yy: float(op.F(np.zeros(1), np.array([yy]))[0])
        m2 = float(np.real(m.integrate(lambda yy: F0(yy) ** 2, upper=eps, small_order=2)))
    far_mass = (0.0, 0.0)
    far_first = 0.0
    if m.density is not None:
        far_mass = tuple(_far_mass(m, R, s) for s in (-1, 1))
        if m.tail_rates is not None and min(m.tail_rates) > 0:
            far_first = float(np.real(m.integrate(lambda yy: yy, lower=R)))
        elif not m.symmetric:
            raise DomainError("asymmetric heavy-tailed measure: far-field first moment undefined")
    for hj, lam in m.point_masses:
        if abs(hj) > R:
            raise DomainError("point mass beyond the quadrature cutoff")
    return _Quadrature(y, w, float(m2), far_mass, far_first, eps, R)


class DiscreteGenerator:
    """The generator discretized on a uniform grid.

    ``interpolation`` is ``"cubic"`` (consistency checks) or ``"linear"``
    (nonnegative weights, monotone scheme for the solvers); ``drift_scheme``
    is ``"centered"`` or ``"upwind"``.
    """

    def __init__(self, op: OperatorSpec, x_min: float, h: float, n: int,
                 interpolation: str = "cubic", drift_scheme: str = "centered"):
        if op.state_dependent_F:
            raise ValueError("grid assembly needs a state-independent jump map; use apply_generator")
        self.op, self.x_min, self.h, self.n = op, float(x_min), float(h), int(n)
        self.interpolation, self.drift_scheme = interpolation, drift_scheme
        q = _outer_quadrature(op, h)
        self.quad = q
        z = op.F(np.zeros_like(q.y), q.y)
        s = z / h
        c = np.floor(s).astype(np.int64)
        offs, basis = _lagrange(s - c, interpolation)
        idx = (c[:, None] + offs[None, :]).ravel()
        vals = (basis * q.w[:, None]).ravel()
        P = int(max(abs(idx.min()), abs(idx.max()))) if len(idx) else 0
        P = max(P, 1)
        self.P = P
        weights = np.zeros(2 * P + 1)
        np.add.at(weights, idx + P, vals)
        self.weights = weights                   # offset m at index m + P
        self.mass_seen = float(q.w.sum())        # = weights.sum() up to rounding
        self.first_seen = float((q.w * z).sum())
        self.grid = self.x_min + self.h * np.arange(self.n)
        self.beta = op.b(self.grid) - self.first_seen - q.far_first

    @classmethod
    def for_function(cls, op, u: SampledFunction, **kw) -> "DiscreteGenerator":
        return cls(op, u.x_min, u.h, u.n, **kw)

    # -- application ------------------------------------------------------

    def _extended(self, u: SampledFunction) -> np.ndarray:
        P = self.P + 1
        return u.lattice(np.arange(-P, self.n + P))

    def apply(self, u: SampledFunction, parts: bool = False):
        """``Lu`` at every grid node."""
        if (u.n, u.x_min, u.h) != (self.n, self.x_min, self.h):
            if u.n != self.n or not np.isclose(u.h, self.h) or not np.isclose(u.x_min, self.x_min):
                raise ValueError("sampled function lives on a different grid")
        ext = self._extended(u)
        P1 = self.P + 1
        core = ext[P1:P1 + self.n]
        um, up = ext[P1 - 1:P1 - 1 + self.n], ext[P1 + 1:P1 + 1 + self.n]
        h = self.h
        d2 = (up - 2 * core + um) / (h * h)
        if self.drift_scheme == "upwind":
            d1 = np.where(self.beta > 0, (up - core) / h, (core - um) / h)
        else:
            d1 = (up - um) / (2 * h)
        window = ext[1:-1]                       # lattice indices -P .. n-1+P
        if self.P > 2000:
            conv = signal.fftconvolve(window, self.weights[::-1], mode="valid")
        else:
            conv = np.correlate(window, self.weights, mode="valid")
        jump = conv - self.mass_seen * core
        fl, fr = u.far_values(self.grid, self.quad.R)
        ml, mr = self.quad.far_mass
        far = ml * (fl - core) + mr * (fr - core)
        drift = self.beta * d1
        inner = 0.5 * self.quad.m2_inner * d2
        total = drift + inner + jump + far
        if parts:
            return total, dict(drift=drift, inner=inner, jump=jump, far=far)
        return total

    def _part(self, u: SampledFunction, part: str) -> np.ndarray:
        total, d = self.apply(u, parts=True)
        if part == "all":
            return total
        if part == "local":
            return d["drift"] + d["inner"]
        if part == "jump":
            return d["jump"] + d["far"]
        raise ValueError(f"unknown operator part {part!r}")

    def matrix(self, extension: Extension, part: str = "all"):
        """Dense ``A`` and vector ``c`` with ``Lu = A @ u + c`` on the grid.

        ``part`` selects the whole operator, its ``"local"`` part (drift and
        inner second difference) or its ``"jump"`` part (outer quadrature and
        far field).
        """
        from scipy.linalg import toeplitz
        n, P, h = self.n, self.P, self.h
        A = np.zeros((n, n))
        diag = np.zeros(n)
        if part in ("all", "jump"):
            w = self.weights
            col = np.zeros(n)
            row = np.zeros(n)
            k = min(n, P + 1)
            col[:k] = w[P - np.arange(k)]
            row[:k] = w[P + np.arange(k)]
            A = toeplitz(col, row)
            diag = diag - self.mass_seen - sum(self.quad.far_mass)
        if part in ("all", "local"):
            lo, dg, up = self.local_bands()
            diag = diag + dg
            idx = np.arange(n)
            A[idx[:-1], idx[:-1] + 1] += up[:-1]
            A[idx[1:], idx[1:] - 1] += lo[1:]
        A[np.arange(n), np.arange(n)] += diag
        hom = extension.homogeneous
        if hom.kind != "function":
            for j in sorted({0, 1, n - 2, n - 1}):
                e = np.zeros(n)
                e[j] = 1.0
                A[:, j] = self._part(SampledFunction(self.x_min, h, e, hom), part)
            c = np.zeros(n)
        else:
            c = self._part(SampledFunction(self.x_min, h, np.zeros(n), extension), part)
        return A, c

    def local_bands(self):
        """Sub-, main and super-diagonal of the local part (interior rows)."""
        h, n = self.h, self.n
        k2 = 0.5 * self.quad.m2_inner / (h * h)
        lower = np.full(n, k2)
        upper = np.full(n, k2)
        diag = np.full(n, -2 * k2)
        beta = self.beta
        if self.drift_scheme == "upwind":
            pos = beta > 0
            diag = diag + np.where(pos, -beta / h, beta / h)
            upper = upper + np.where(pos, beta / h, 0.0)
            lower = lower + np.where(pos, 0.0, -beta / h)
        else:
            upper = upper + beta / (2 * h)
            lower = lower - beta / (2 * h)
        return lower, diag, upper

    @property
    def jump_intensity(self) -> float:
        """Jump mass the quadrature sees; bounds the explicit time step."""
        return self.mass_seen + sum(self.quad.far_mass)


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def apply_generator(op: OperatorSpec, u: SampledFunction, x: float,
                    interpolation: str = "cubic") -> float:
    """``Lu(x)`` at a single point, with centered second-order derivative stencils.

    Works for state-dependent jump maps: the jump ``F(x, y)`` is evaluated at
    the given ``x`` and ``u(x + F)`` is interpolated.
    """
    h = u.h
    x = float(x)
    q = _outer_quadrature(OperatorSpec(op.measure, op.drift_b, None, op.eps_inner,
                                       op.quad_nodes, op.tail_cutoff), h)
    if op.jump_map_F is not None:
        z = op.F(np.full_like(q.y, x), q.y)
        F0 = lambda yy: float(op.F(np.array([x]), np.array([yy]))[0])
        m2 = float(np.real(op.measure.integrate(lambda yy: F0(yy) ** 2, upper=q.eps, small_order=2)))
        if op.measure.tail_rates is not None and op.measure.density is not None \
                and min(op.measure.tail_rates) > 0:
            far_first = float(np.real(op.measure.integrate(F0, lower=q.R)))
        else:
            far_first = 0.0
    else:
        z, m2, far_first = q.y, q.m2_inner, q.far_first
    ux, up, um = u(np.array([x, x + h, x - h]), interpolation)
    d1 = (up - um) / (2 * h)
    d2 = (up - 2 * ux + um) / (h * h)
    if len(z):
        target = x + z
        rates = op.measure.tail_rates
        heavy = op.measure.density is not None and (rates is None or min(rates) <= 0)
        if u.extension.kind == "affine" and heavy:
            raise DomainError("heavy-tailed jumps read the function far away; give a function extension")
        jump = float((q.w * (u(target, interpolation) - ux - z * d1)).sum())
    else:
        jump = 0.0
    fl, fr = u.far_values(np.array([x]), q.R)
    ml, mr = q.far_mass
    far = float(np.asarray(ml * (fl - ux) + mr * (fr - ux)).ravel()[0]) - far_first * d1
    b = float(op.b(np.array([x]))[0])
    return float(b * d1 + 0.5 * m2 * d2 + jump + far)


def _far_wave(m: LevyMeasureSpec, R: float, xi: float) -> complex:
    """``int_{|y|>R} exp(i xi y) nu(dy)`` by Fourier-weighted quadrature."""
    if m.density is None or xi == 0.0:
        return 0.0
    from scipy.integrate import quad
    total = 0.0 + 0.0j
    for s in (1, -1):
        f = lambda y, s=s: float(m.evaluate(np.array([s * y]))[0])
        re = quad(f, R, np.inf, weight="cos", wvar=xi, limlst=200)[0]
        im = quad(f, R, np.inf, weight="sin", wvar=xi, limlst=200)[0]
        total += re + 1j * s * im
    return total


@dataclass
class SymbolCheck:
    xi: np.ndarray
    rel_errors: np.ndarray
    h: float

    @property
    def max_error(self) -> float:
        return float(self.rel_errors.max()) if len(self.rel_errors) else 0.0


def symbol_check(op: OperatorSpec, psi: Callable, xi_list: Sequence[float],
                 x_min: float = -10.0, x_max: float = 10.0, n: int = 2048,
                 interior: int = 2, interpolation: str = "cubic") -> SymbolCheck:
    """Worst relative error of ``L e^{i xi x} / e^{i xi x}`` against ``psi(xi)``.

    The generator is applied to the real and imaginary parts of the plane
    wave, sampled on the grid and continued exactly outside it.
    """
    if op.state_dependent_F or callable(op.drift_b):
        raise ValueError("symbol check needs a state-independent operator with constant drift")
    grid = np.linspace(x_min, x_max, n)
    h = grid[1] - grid[0]
    gen = DiscreteGenerator(op, x_min, h, n, interpolation=interpolation, drift_scheme="centered")
    sl = slice(interior, n - interior)
    errs = []
    for xi in xi_list:
        xi = float(xi)
        c = SampledFunction.on_grid(grid, np.cos(xi * grid),
                                    Extension("function", lambda x, xi=xi: np.cos(xi * x), far=(0.0, 0.0)))
        s = SampledFunction.on_grid(grid, np.sin(xi * grid),
                                    Extension("function", lambda x, xi=xi: np.sin(xi * x), far=(0.0, 0.0)))
        Lu = gen.apply(c) + 1j * gen.apply(s)
        u = np.exp(1j * xi * grid)
        # the wave beyond the cutoff was replaced by its zero mean; add it back exactly
        ratio = (Lu * np.conj(u))[sl] + _far_wave(op.measure, gen.quad.R, xi)
        target = complex(psi(xi))
        if target == 0:
            err = float(np.max(np.abs(ratio)))
        else:
            err = float(np.max(np.abs(ratio - target)) / abs(target))
        errs.append(err)
    return SymbolCheck(np.asarray(xi_list, dtype=float), np.asarray(errs), float(h))


def complementarity_residual(op: OperatorSpec, v: SampledFunction, phi, f, c,
                             interpolation: str = "cubic", drift_scheme: str = "centered",
                             generator: Optional[DiscreteGenerator] = None) -> np.ndarray:
    """Pointwise ``min(-Lv + c v - f, v - phi)`` on the grid of ``v``.

    ``phi``, ``f`` and ``c`` may be arrays on the grid or callables of x.
    """
    gen = generator or DiscreteGenerator.for_function(op, v, interpolation=interpolation,
                                                      drift_scheme=drift_scheme)
    x = v.grid
    as_arr = lambda g: np.asarray(g(x), dtype=float) if callable(g) else np.broadcast_to(np.asarray(g, dtype=float), x.shape)
    Lv = gen.apply(v)
    return np.minimum(-Lv + as_arr(c) * v.values - as_arr(f), v.values - as_arr(phi))


def dump_csv(path, x, Lu):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("x,Lu\n")
        for a, b in zip(x, Lu):
            fh.write(f"{float(a)!r},{float(b)!r}\n")
