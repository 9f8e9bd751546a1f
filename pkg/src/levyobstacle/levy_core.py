"""Levy measures, characteristic exponents and drift calibration.

All exponents use the fully compensated convention

    psi(xi) = i*b*xi + int (exp(i*xi*y) - 1 - i*xi*y) nu(dy),

so that ``E[exp(i*xi*X(t))] = exp(t*psi(xi))`` for the process
``dX = b dt + int y Ntilde(dt, dy)`` and ``Re psi <= 0`` on the real line.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import integrate, special

from .errors import BranchError, DivergentIntegral, MomentError

# Quadrature floor: below this |y| the integrand is replaced by its leading
# Taylor term integrated against the local power-law density.
_Y_FLOOR = 1e-12
_QUAD_KW = dict(epsabs=1e-15, epsrel=1e-11, limit=400)


class Family(str, Enum):
    VG = "VG"
    CGMY = "CGMY"
    POINT_MASSES = "PointMasses"
    CUSTOM = "Custom"


@dataclass(frozen=True)
class LevyMeasureSpec:
    """A one-dimensional Levy measure.

    ``density`` takes an array of nonzero jump sizes and returns the density
    per unit jump size. ``tail_rates`` are the exponential decay rates
    ``(negative side, positive side)`` of the density at infinity and
    ``tail_powers`` the extra algebraic decay ``|x|**(-1 - p)`` there; both
    are ``None`` when unknown, in which case moment tests run numerically.
    """

    family: Family
    density: Optional[Callable[[np.ndarray], np.ndarray]] = None
    point_masses: Tuple[Tuple[float, float], ...] = ()
    singularity_order: float = 0.0
    tail_rates: Optional[Tuple[float, float]] = None
    tail_powers: Tuple[float, float] = (0.0, 0.0)
    symmetric: bool = False
    label: str = ""

    def __post_init__(self):
        masses = tuple((float(h), float(lam)) for h, lam in self.point_masses)
        object.__setattr__(self, "point_masses", masses)
        for h, lam in masses:
            if h == 0.0:
                raise ValueError("point mass located at 0")
            if not lam > 0.0:
                raise ValueError(f"point mass intensity must be positive, got {lam}")
        if self.family is Family.POINT_MASSES and self.density is not None:
            raise ValueError("PointMasses measure cannot carry a density")
        if self.family is not Family.POINT_MASSES and self.density is None and not masses:
            raise ValueError(f"{self.family.value} measure needs a density")

    @property
    def is_zero(self) -> bool:
        return self.density is None and not self.point_masses

    def evaluate(self, x) -> np.ndarray:
        """Density at ``x`` (never evaluated at 0; zero when there is no density)."""
        x = np.asarray(x, dtype=float)
        if self.density is None:
            return np.zeros_like(x)
        if np.any(x == 0.0):
            raise ValueError("Levy density evaluated at 0")
        return np.asarray(self.density(x), dtype=float)

    def integrate(self, g, lower=0.0, upper=math.inf, side=0, small_order=2,
                  small_coeff=None):
        """Integral of ``g(y) nu(dy)`` over ``lower < |y| < upper``.

        ``side`` selects y>0 (+1), y<0 (-1) or both (0). ``small_order`` and
        ``small_coeff`` describe ``g(y) ~ small_coeff(sign) * |y|**small_order``
        near 0 and are used for the sub-floor remainder; with
        ``small_coeff=None`` the remainder is dropped.
        """
        total = 0.0
        sides = (1, -1) if side == 0 else (side,)
        for s in sides:
            for h, lam in self.point_masses:
                if np.sign(h) == s and lower < abs(h) < upper:
                    total = total + lam * g(h)
            if self.density is not None:
                total = total + _density_side_integral(
                    self, g, s, lower, upper, small_order, small_coeff)
        return total

    def mass(self, lower, upper=math.inf, side=0) -> float:
        return float(np.real(self.integrate(lambda y: 1.0, lower, upper, side, small_order=0)))

    def moment(self, k: int, lower=0.0, upper=math.inf, side=0) -> float:
        """``int |y|**k`` (k even) or ``y**k`` (k odd) over ``lower < |y| < upper``."""
        coeff = (lambda s: s ** k)
        return float(np.real(self.integrate(lambda y: y ** k, lower, upper, side,
                                            small_order=k, small_coeff=coeff)))

    def exp_moment_finite(self, k: float) -> bool:
        """Whether ``int_{|x|>=1} exp(k*x) nu(dx)`` is finite."""
        if self.density is None:
            return True
        if self.tail_rates is not None:
            s = 1 if k > 0 else -1
            rate = self.tail_rates[1] if s > 0 else self.tail_rates[0]
            power = self.tail_powers[1] if s > 0 else self.tail_powers[0]
            if abs(k) < rate:
                return True
            return abs(k) == rate and power > 0.0
        return _numeric_tail_finite(self, lambda y: np.exp(k * y))


def _density_side_integral(m: LevyMeasureSpec, g, s, lower, upper, small_order, small_coeff):
    """One-sided ``int g(s*u) f(s*u) du`` over ``lower < u < upper``."""
    dens = m.density
    out = 0.0
    lo = max(lower, 0.0)
    # inner piece on log scale
    hi_in = min(upper, 1.0)
    if lo < hi_in:
        a = max(lo, _Y_FLOOR)
        if a < hi_in:
            def f_log(t):
                u = math.exp(t)
                return g(s * u) * float(dens(np.array([s * u]))[0]) * u
            out = out + _quad(f_log, math.log(a), math.log(hi_in))
        if lo < _Y_FLOOR and small_coeff is not None:
            p = m.singularity_order
            if small_order <= p:
                raise DivergentIntegral(
                    f"integrand of order {small_order} not integrable against density of order {p}")
            a = _Y_FLOOR
            f_a = float(dens(np.array([s * a]))[0])
            out = out + small_coeff(s) * f_a * a ** (small_order + 1) / (small_order - p)
    # outer piece
    lo_out = max(lo, 1.0)
    if lo_out < upper:
        hi = upper if math.isfinite(upper) else _tail_cutoff(m, g, s, lo_out)
        if lo_out < hi:
            def f_lin(u):
                return g(s * u) * float(dens(np.array([s * u]))[0])
            edges = _panel_edges(lo_out, hi)
            for a, b in zip(edges[:-1], edges[1:]):
                out = out + _quad(f_lin, a, b)
    return out


def _quad(f, a, b):
    val = integrate.quad(f, a, b, complex_func=True, **_QUAD_KW)[0]
    return complex(val)


def _panel_edges(a, b):
    if b <= 2 * a:
        return [a, b]
    edges = list(np.geomspace(a, b, max(2, int(math.log2(b / a)) + 2)))
    edges[0], edges[-1] = a, b
    return edges


def _tail_cutoff(m, g, s, start):
    """Smallest doubling point beyond which the integrand is negligible."""
    x = max(2.0 * start, 2.0)
    ref = None
    while x < 1e7:
        val = abs(g(s * x)) * float(m.evaluate(np.array([s * x]))[0]) * x
        if ref is None:
            ref = max(val, 1e-300)
        if val < 1e-18 * max(ref, 1.0) and x > 4 * start:
            return x
        x *= 2.0
    raise DivergentIntegral("tail integrand does not decay; heavy tails need a finite upper limit")


def _numeric_tail_finite(m, weight) -> bool:
    """Decade test: tail contributions of a convergent integral must shrink."""
    parts = []
    for k in range(1, 5):
        a, b = 10.0 ** k, 10.0 ** (k + 1)
        val = 0.0
        for s in (1, -1):
            f = lambda u, s=s: float(abs(weight(s * u)) * m.evaluate(np.array([s * u]))[0])
            val += integrate.quad(f, a, b, limit=200)[0]
        parts.append(val)
    if parts[-1] == 0.0:
        return True
    return parts[-1] < 0.999 * parts[-2] and parts[-2] <= parts[0] * (1 + 1e-9) + 1e-300


def _numeric_small_finite(m, power) -> bool:
    """Decade test near 0 for ``int_{|y|<1} |y|**power nu(dy)``."""
    parts = []
    for k in range(6, 10):
        a, b = 10.0 ** (-k - 1), 10.0 ** (-k)
        val = 0.0
        for s in (1, -1):
            f = lambda t, s=s: float(math.exp(t * (power + 1)) * m.evaluate(np.array([s * math.exp(t)]))[0])
            val += integrate.quad(f, math.log(a), math.log(b), limit=200)[0]
        parts.append(val)
    if parts[0] == 0.0:
        return True
    return parts[-1] < 0.999 * parts[-2]


# ---------------------------------------------------------------------------
# model parametrizations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VGParams:
    nu_vg: float
    sigma: float
    theta: float = 0.0
    b: float = 0.0

    def __post_init__(self):
        if not (self.nu_vg > 0 and self.sigma > 0):
            raise ValueError("VG requires nu_vg > 0 and sigma > 0")

    @property
    def roots(self):
        return vg_roots(self)

    @property
    def has_exp_moment(self) -> bool:
        return self.roots[0] < 1.0


@dataclass(frozen=True)
class CGMYParams:
    C: float
    G: float
    M: float
    Y: float
    b: float = 0.0

    def __post_init__(self):
        if not self.C > 0:
            raise ValueError("CGMY requires C > 0")
        if self.G < 0 or self.M < 0:
            raise ValueError("CGMY requires G, M >= 0")
        if not self.Y < 2:
            raise ValueError("CGMY requires Y < 2")
        if (self.G == 0 or self.M == 0) and self.Y <= 0:
            raise ValueError("CGMY with a zero decay rate needs Y > 0 to be a Levy measure")

    @property
    def admissible(self) -> bool:
        """Parameter region covered by the regularity results."""
        G, M, Y = self.G, self.M, self.Y
        return (G > 1 and M > 1 and Y < 2) or (G >= 1 and M >= 1 and 0 < Y < 2)


@dataclass(frozen=True)
class StableParams:
    """Symmetric 2s-stable law with ``psi(xi) = -|xi|**(2s)``."""
    s: float

    def __post_init__(self):
        if not 0 < self.s < 1:
            raise ValueError("stable index s must lie in (0, 1)")

    @property
    def gamma(self) -> float:
        s = self.s
        return s * 4.0 ** s * special.gamma(0.5 + s) / (math.sqrt(math.pi) * special.gamma(1 - s))


def vg_roots(p: VGParams) -> Tuple[float, float]:
    """Roots ``eta_p > 0 > eta_n`` of ``x**2 - theta*nu*x - sigma**2*nu/2``."""
    half = 0.5 * p.theta * p.nu_vg
    disc = math.sqrt(half * half + 0.5 * p.sigma ** 2 * p.nu_vg)
    eta_p = half + disc
    # product of roots is -sigma^2 nu / 2; avoids cancellation in half - disc
    eta_n = -0.5 * p.sigma ** 2 * p.nu_vg / eta_p
    return eta_p, eta_n


def vg_measure(p: VGParams) -> LevyMeasureSpec:
    eta_p, eta_n = vg_roots(p)
    a_p, a_n = 1.0 / eta_p, 1.0 / abs(eta_n)
    nu = p.nu_vg

    def density(x):
        ax = np.abs(x)
        return np.where(x > 0, np.exp(-a_p * ax), np.exp(-a_n * ax)) / (nu * ax)

    return LevyMeasureSpec(Family.VG, density, singularity_order=0.0,
                           tail_rates=(a_n, a_p), tail_powers=(0.0, 0.0),
                           label=f"VG(nu_vg={nu:g}, sigma={p.sigma:g}, theta={p.theta:g})")


def cgmy_measure(p: CGMYParams) -> LevyMeasureSpec:
    C, G, M, Y = p.C, p.G, p.M, p.Y

    def density(x):
        ax = np.abs(x)
        return C * np.where(x > 0, np.exp(-M * ax), np.exp(-G * ax)) / ax ** (1.0 + Y)

    return LevyMeasureSpec(Family.CGMY, density, singularity_order=max(Y, 0.0),
                           tail_rates=(G, M), tail_powers=(Y, Y), symmetric=(G == M),
                           label=f"CGMY(C={C:g}, G={G:g}, M={M:g}, Y={Y:g})")


def stable_measure(p: StableParams) -> LevyMeasureSpec:
    g, two_s = p.gamma, 2.0 * p.s

    def density(x):
        return g / np.abs(x) ** (1.0 + two_s)

    return LevyMeasureSpec(Family.CUSTOM, density, singularity_order=two_s,
                           tail_rates=(0.0, 0.0), tail_powers=(two_s, two_s), symmetric=True,
                           label=f"stable(2s={two_s:g})")


def point_mass_measure(masses: Sequence[Tuple[float, float]]) -> LevyMeasureSpec:
    return LevyMeasureSpec(Family.POINT_MASSES, None, point_masses=tuple(masses),
                           label="point masses")


def zero_measure() -> LevyMeasureSpec:
    return LevyMeasureSpec(Family.POINT_MASSES, None, label="zero")


# ---------------------------------------------------------------------------
# exponents
# ---------------------------------------------------------------------------

def _expm1_minus_linear(z):
    """``exp(z) - 1 - z`` without cancellation for small ``|z|``."""
    z = complex(z)
    if abs(z) < 1e-3:
        return z * z * (0.5 + z * (1.0 / 6 + z * (1.0 / 24 + z / 120)))
    return np.expm1(z) - z


def _vg_strip_check(p: VGParams, xi: complex):
    eta_p, eta_n = vg_roots(p)
    im = xi.imag
    if not (-1.0 / eta_p < im < 1.0 / abs(eta_n)):
        raise BranchError(
            f"xi={xi} outside the VG analyticity strip Im xi in ({-1/eta_p:.6g}, {1/abs(eta_n):.6g})")


def psi_vg(p: VGParams, xi) -> complex:
    """VG characteristic exponent (compensated, drift ``p.b``).

    The logarithm of ``1 - i*theta*nu*xi + sigma**2*nu*xi**2/2`` is taken on
    the principal branch through its factorization
    ``(1 - i*eta_p*xi)(1 + i*|eta_n|*xi)``, which keeps it continuous on the
    whole analyticity strip.
    """
    xi = complex(xi)
    _vg_strip_check(p, xi)
    eta_p, eta_n = vg_roots(p)
    log_arg = np.log(1 - 1j * eta_p * xi) + np.log(1 + 1j * abs(eta_n) * xi)
    return complex(-log_arg / p.nu_vg - 1j * p.theta * xi + 1j * p.b * xi)


def psi_cgmy(p: CGMYParams, xi) -> complex:
    """Closed-form CGMY exponent, compensated, for ``Y`` not in ``{0, 1}``."""
    xi = complex(xi)
    C, G, M, Y = p.C, p.G, p.M, p.Y
    if not (-M < xi.imag < G or (Y > 0 and -M <= xi.imag <= G)):
        raise BranchError(f"xi={xi} outside the CGMY strip Im xi in [{-M}, {G}]")
    if Y == 0:
        jump = -C * (np.log(1 - 1j * xi / M) + np.log(1 + 1j * xi / G)) - 1j * xi * C * (1 / M - 1 / G)
    elif Y == 1:
        return psi_quadrature(cgmy_measure(p), p.b, xi)
    else:
        if Y < 1 and (G == 0 or M == 0):
            raise DivergentIntegral("CGMY first moment infinite (zero decay rate with Y < 1)")
        mean = C * special.gamma(1 - Y) * (_pow(M, Y - 1) - _pow(G, Y - 1))
        jump = C * special.gamma(-Y) * (_cpow(M - 1j * xi, Y) - _pow(M, Y)
                                        + _cpow(G + 1j * xi, Y) - _pow(G, Y)) - 1j * xi * mean
    return complex(jump + 1j * p.b * xi)


def _pow(a, y):
    return 0.0 if a == 0 else a ** y


def _cpow(z, y):
    return 0.0 if z == 0 else complex(z) ** y


def psi_stable(p: StableParams, xi) -> complex:
    xi = complex(xi)
    if xi.imag != 0:
        raise BranchError("stable exponent has no exponential moments; xi must be real")
    return complex(-abs(xi.real) ** (2 * p.s))


def psi_quadrature(m: LevyMeasureSpec, drift_b: float, xi, return_error=False):
    """Characteristic exponent by direct quadrature of the compensated integrand.

    The real line is split at ``|y| = 1``; the inner region is integrated on a
    logarithmic scale with the Taylor-stable integrand ``exp(z) - 1 - z`` and
    the region below 1e-12 is replaced by its leading Taylor term.
    Symmetric measures at real ``xi`` are integrated in the principal-value
    sense (``cos(xi*y) - 1`` over ``y > 0``, doubled), which also covers
    heavy tails.
    """
    xi = complex(xi)
    if xi == 0:
        return (0j, 0.0) if return_error else 0j
    if m.density is not None:
        _check_tail_for(m, xi)
    quad_err = 0.0
    if m.density is not None and m.symmetric and xi.imag == 0:
        val = 2 * _symmetric_heavy(m, xi.real)
        masses = sum(lam * _expm1_minus_linear(1j * xi * h) for h, lam in m.point_masses)
        val = val + masses
    else:
        g = lambda y: _expm1_minus_linear(1j * xi * y)
        coeff = lambda s: -0.5 * xi * xi
        val = m.integrate(g, small_order=2, small_coeff=coeff)
    out = complex(val) + 1j * drift_b * xi
    if return_error:
        quad_err = 1e-11 * abs(out) + 1e-15
        return out, quad_err
    return out


def _has_first_moment(m: LevyMeasureSpec) -> bool:
    if m.density is None:
        return True
    if m.tail_rates is not None:
        return all(r > 0 or p > 1 for r, p in zip(m.tail_rates, m.tail_powers))
    return _numeric_tail_finite(m, lambda y: y)


def _check_tail_for(m: LevyMeasureSpec, xi: complex):
    if m.symmetric and xi.imag == 0 and not _has_first_moment(m):
        return
    if not _has_first_moment(m):
        raise DivergentIntegral("compensated exponent needs a finite first moment of the tails")
    # |exp(i xi y)| = exp(-Im(xi) y)
    if xi.imag != 0 and not m.exp_moment_finite(-xi.imag):
        raise DivergentIntegral(f"exponential moment of order {-xi.imag} is infinite")


def _symmetric_heavy(m: LevyMeasureSpec, xi: float) -> float:
    dens1 = lambda u: float(m.evaluate(np.array([u]))[0])
    # cos(t) - 1 = -2 sin(t/2)^2, free of cancellation for small t
    inner = m.integrate(lambda y: -2.0 * math.sin(0.5 * xi * y) ** 2, upper=1.0, side=1,
                        small_order=2, small_coeff=lambda s: -0.5 * xi * xi)
    cos_tail = integrate.quad(dens1, 1.0, np.inf, weight="cos", wvar=abs(xi), limlst=200)[0]
    mass_tail = integrate.quad(dens1, 1.0, np.inf, limit=400)[0]
    return float(np.real(inner)) + cos_tail - mass_tail


def check_finite_variation(m: LevyMeasureSpec, params=None) -> bool:
    """Whether ``int min(1, |y|) nu(dy) < infinity``."""
    if isinstance(params, VGParams) or m.family is Family.VG:
        return True
    if isinstance(params, CGMYParams):
        return params.Y < 1
    if m.family is Family.CGMY:
        return m.singularity_order < 1 if m.singularity_order > 0 else True
    if m.density is None:
        return True
    return _numeric_small_finite(m, 1.0)


def check_levy_measure(m: LevyMeasureSpec) -> bool:
    """Numerical check of ``int min(1, y**2) nu(dy) < infinity``."""
    if m.density is None:
        return True
    if m.family in (Family.VG, Family.CGMY):
        return True
    small = _numeric_small_finite(m, 2.0)
    big = _numeric_tail_finite(m, lambda y: 1.0)
    return small and big


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------

ModelParams = Union[VGParams, CGMYParams, StableParams, None]


@dataclass(frozen=True)
class CharacteristicExponent:
    evaluator: Callable[[complex], complex]
    drift_b: float
    model_tag: str

    def __call__(self, xi) -> complex:
        return self.evaluator(xi)


@dataclass(frozen=True)
class LevyModel:
    """A pure-jump Levy model: measure, constant drift and optional closed form."""

    name: str
    measure: LevyMeasureSpec
    drift: float = 0.0
    params: ModelParams = None
    rate: Optional[float] = None

    def jump_exponent(self, xi) -> complex:
        """Exponent of the compensated jump part alone (zero drift)."""
        p = self.params
        if isinstance(p, VGParams):
            return psi_vg(replace(p, b=0.0), xi)
        if isinstance(p, CGMYParams):
            return psi_cgmy(replace(p, b=0.0), xi)
        if isinstance(p, StableParams):
            return psi_stable(p, xi)
        if self.measure.density is None:
            xi = complex(xi)
            return complex(sum(lam * _expm1_minus_linear(1j * xi * h)
                               for h, lam in self.measure.point_masses))
        return psi_quadrature(self.measure, 0.0, xi)

    def psi(self, xi) -> complex:
        xi = complex(xi)
        return self.jump_exponent(xi) + 1j * self.drift * xi

    def exponent(self) -> CharacteristicExponent:
        return CharacteristicExponent(self.psi, self.drift, self.name)

    @property
    def finite_variation(self) -> bool:
        return check_finite_variation(self.measure, self.params)

    def with_drift(self, b: float, rate: Optional[float] = None) -> "LevyModel":
        p = self.params
        if isinstance(p, (VGParams, CGMYParams)):
            p = replace(p, b=b)
        return replace(self, drift=float(b), params=p, rate=rate if rate is not None else self.rate)

    def calibrated(self, r: float) -> "LevyModel":
        return self.with_drift(calibrate_drift(self, r), rate=r)


def vg_model(nu_vg, sigma, theta=0.0, b=0.0) -> LevyModel:
    p = VGParams(nu_vg, sigma, theta, b)
    return LevyModel("VG", vg_measure(p), float(b), p)


def cgmy_model(C, G, M, Y, b=0.0) -> LevyModel:
    p = CGMYParams(C, G, M, Y, b)
    return LevyModel("CGMY", cgmy_measure(p), float(b), p)


def stable_model(s) -> LevyModel:
    p = StableParams(s)
    return LevyModel("stable", stable_measure(p), 0.0, p)


def point_mass_model(masses, b=0.0) -> LevyModel:
    return LevyModel("PointMasses", point_mass_measure(masses), float(b))


def exp_moment_ok(model: LevyModel) -> bool:
    """``int_{|x|>=1} e^x nu(dx) < infinity``, by parameter region where known."""
    p = model.params
    if isinstance(p, VGParams):
        return vg_roots(p)[0] < 1.0
    if isinstance(p, CGMYParams):
        return p.M > 1 or (p.M == 1 and p.Y > 0)
    if isinstance(p, StableParams):
        return False
    return model.measure.exp_moment_finite(1.0)


def calibrate_drift(model: LevyModel, r: float) -> float:
    """Drift ``b*`` making ``exp(-r t + X(t))`` a martingale, i.e. ``psi(-i) = r``.

    ``psi(-i) = b + J`` with ``J`` the (real) jump part, so ``b* = r - J``.
    """
    if r < 0:
        raise ValueError("rate must be nonnegative")
    if not exp_moment_ok(model):
        raise MomentError(f"{model.measure.label or model.name}: int_(|x|>=1) e^x nu(dx) is infinite")
    jump = model.jump_exponent(-1j)
    if abs(jump.imag) > 1e-9 * max(1.0, abs(jump.real)):
        raise RuntimeError(f"psi(-i) should be real, got {jump}")
    b_star = r - jump.real
    residual = abs((jump.real + b_star) - r)
    assert residual <= 1e-10, residual
    return b_star


def rlpe_order_check(m: LevyMeasureSpec, nu_order: float, nu_prime: float, c: float,
                     C_bound: float, n_samples: int = 400, x_min: float = 1e-6) -> bool:
    """Check ``|f(x) - c|x|**(-nu-1)| <= C|x|**(-nu'-1)`` on ``x_min <= |x| <= 1``."""
    if not nu_prime < nu_order:
        raise ValueError("need nu_prime < nu_order")
    if not (c > 0 and C_bound > 0):
        raise ValueError("need c > 0 and C_bound > 0")
    if m.density is None:
        return False
    u = np.geomspace(x_min, 1.0, n_samples)
    x = np.concatenate([u, -u])
    ax = np.abs(x)
    defect = np.abs(m.evaluate(x) - c * ax ** (-nu_order - 1))
    bound = C_bound * ax ** (-nu_prime - 1)
    return bool(np.all(defect <= bound * (1 + 1e-12)))
