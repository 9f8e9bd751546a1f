"""Empirical regularity of computed value functions.

The modulus of continuity ``omega(h) = max |v(p1) - v(p2)|`` over lattice
pairs at distance ``h`` is fitted in log-log coordinates; the slope is the
Hoelder exponent. Reports record bands and fit quality, never pass/fail.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from .errors import DegenerateFit

ZERO_MODULUS = 1e-14


@dataclass
class RegularityReport:
    """Fitted regularity of a value grid.

    ``alpha_x`` is clamped to 1.05 (a grid function cannot be more than
    Lipschitz at the mesh scale); the raw slope is kept in ``alpha_x_raw``.
    ``condition_flags["c0_ge_lip_b"]`` records whether ``c0 >= [b]`` held.
    A constant value function gives ``constant=True`` and no slopes.
    """

    alpha_x: Optional[float]
    alpha_x_ci: Optional[Tuple[float, float]]
    lip_x: float
    alpha_t: Optional[float]
    fit_range: Optional[Tuple[float, float]]
    r2: Optional[float]
    condition_flags: dict
    alpha_x_raw: Optional[float] = None
    r2_t: Optional[float] = None
    fit_range_t: Optional[Tuple[float, float]] = None
    mesh_h: float = float("nan")
    constant: bool = False
    moduli_x: List[Tuple[float, float]] = field(default_factory=list)
    moduli_t: List[Tuple[float, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("alpha_x_ci", "fit_range", "fit_range_t"):
            if d[k] is not None:
                d[k] = [float(a) for a in d[k]]
        d["moduli_x"] = [[float(h), float(w)] for h, w in self.moduli_x]
        d["moduli_t"] = [[float(h), float(w)] for h, w in self.moduli_t]
        return d

    def to_json(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=2, allow_nan=True)
            fh.write("\n")

    def moduli_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["direction", "h", "omega"])
            for name, rows in (("x", self.moduli_x), ("t", self.moduli_t)):
                for h, om in rows:
                    w.writerow([name, repr(float(h)), repr(float(om))])


def _lags(n: int, max_lag: int, n_lags: int) -> np.ndarray:
    top = max(1, min(max_lag, n - 1))
    return np.unique(np.round(np.geomspace(1, top, n_lags)).astype(int))


def estimate_modulus(values, direction: str = "x", spacing: float = 1.0, trim: float = 0.1,
                     n_lags: int = 48, max_lag: Optional[int] = None) -> List[Tuple[float, float]]:
    """Modulus of continuity on a uniform lattice.

    Parameters
    ----------
    values : array_like
        1-D samples, or a 2-D ``(n_t, n_x)`` array; for 2-D input the pairs
        run along ``direction`` and the maximum is also taken over the other axis.
    direction : {"x", "t"}
    spacing : float
        Lattice step in the chosen direction.
    trim : float or (float, float)
        Fraction of nodes dropped at the (lower, upper) end before forming
        pairs, to keep truncation effects out.
    n_lags : int
        Number of geometrically spaced lattice distances.
    max_lag : int, optional
        Largest lattice distance; default half the interior length.

    Returns
    -------
    list of (h, omega)
    """
    v = np.asarray(values, dtype=float)
    if direction not in ("x", "t"):
        raise ValueError("direction must be 'x' or 't'")
    if v.ndim == 1:
        v = v[None, :] if direction == "x" else v[:, None]
    axis = 1 if direction == "x" else 0
    v = np.moveaxis(v, axis, -1)
    n = v.shape[-1]
    if n < 64:
        raise ValueError(f"need at least 64 nodes in direction {direction!r}, got {n}")
    lo, hi = (trim, trim) if np.isscalar(trim) else trim
    i0, i1 = int(np.floor(lo * n)), n - int(np.floor(hi * n))
    w = v[..., i0:i1]
    m = w.shape[-1]
    lags = _lags(m, m // 2 if max_lag is None else max_lag, n_lags)
    out = []
    for k in lags:
        d = np.abs(w[..., k:] - w[..., :-k])
        out.append((float(k * spacing), float(d.max())))
    return out


def fit_exponent(moduli: Sequence[Tuple[float, float]]) -> Tuple[float, float, float]:
    """Least-squares fit ``log omega = log C + alpha log h``.

    Returns
    -------
    alpha, constant, r2

    Raises
    ------
    DegenerateFit
        If every modulus is below 1e-14 (a constant function).
    """
    a = np.asarray(moduli, dtype=float).reshape(-1, 2)
    if len(a) and np.all(a[:, 1] < ZERO_MODULUS):
        raise DegenerateFit("all moduli vanish: the sampled function is constant")
    a = a[a[:, 1] >= ZERO_MODULUS]
    if len(a) < 6:
        raise ValueError(f"need at least 6 positive (h, omega) pairs, got {len(a)}")
    fit = stats.linregress(np.log(a[:, 0]), np.log(a[:, 1]))
    return float(fit.slope), float(np.exp(fit.intercept)), float(fit.rvalue ** 2)


def _fit_window(moduli, spacing, skip_small: int = 2, drop_decades: float = 1.0):
    """Moduli inside the fit range: lattice distance > ``skip_small`` and
    below the largest decade."""
    a = np.asarray(moduli, dtype=float)
    k = a[:, 0] / spacing
    top = a[:, 0].max() / 10.0 ** drop_decades
    keep = (k > skip_small + 0.5) & (a[:, 0] <= top * (1 + 1e-12))
    return a[keep]


def _fit_ci(sel):
    fit = stats.linregress(np.log(sel[:, 0]), np.log(sel[:, 1]))
    q = stats.t.ppf(0.975, len(sel) - 2)
    return float(fit.slope), (float(fit.slope - q * fit.stderr), float(fit.slope + q * fit.stderr))


def _lipschitz(v2d, spacing, k, trim):
    n = v2d.shape[-1]
    i0, i1 = int(np.floor(trim * n)), n - int(np.floor(trim * n))
    w = v2d[..., i0:i1]
    q = np.abs(w[..., k:] - w[..., :-k]) / (k * spacing)
    return float(np.percentile(q, 99))


def regularity_report(vg, spec=None, trim: float = 0.1, skip_small: int = 2,
                      drop_decades: float = 1.0, drop_decades_t: float = 0.5,
                      x_fixed: Optional[float] = None) -> RegularityReport:
    """Regularity report for a solved :class:`ValueGrid`.

    The spatial exponent is fitted over all (interior) time slices; the time
    exponent, for evolution grids, at one fixed x (default: the node with the
    largest total variation in t), excluding the terminal slice. Time meshes
    are short and carry no truncation layer, so only the top half decade of
    time lags is dropped by default.
    ``spec`` supplies ``c0`` and ``lipschitz_b`` for the condition flag.
    """
    h = vg.h
    V = vg.values if vg.is_evolution else vg.values[None, :]
    if vg.is_evolution:
        V = V[:-1]
    flags = {}
    if spec is not None:
        c0 = spec.c0(vg.x)
        flags = {"c0": c0, "lip_b": float(spec.lipschitz_b),
                 "c0_ge_lip_b": bool(c0 >= spec.lipschitz_b)}
    mx = estimate_modulus(V, "x", h, trim)
    sel = _fit_window(mx, h, skip_small, drop_decades)
    try:
        alpha, _, r2 = fit_exponent(sel)
    except DegenerateFit:
        return RegularityReport(None, None, 0.0, None, None, None, flags, mesh_h=h, constant=True,
                                moduli_x=mx)
    raw = alpha
    _, ci = _fit_ci(sel)
    lip = _lipschitz(V, h, skip_small + 1, trim)
    rep = RegularityReport(min(alpha, 1.05), ci, lip, None, (float(sel[0, 0]), float(sel[-1, 0])), r2,
                           flags, alpha_x_raw=raw, mesh_h=h, moduli_x=mx)
    if vg.is_evolution:
        dt = float(vg.t[1] - vg.t[0])
        if x_fixed is None:
            j = int(np.argmax(np.abs(np.diff(V, axis=0)).sum(axis=0)))
        else:
            j = int(np.argmin(np.abs(vg.x - x_fixed)))
        mt = estimate_modulus(V[:, j], "t", dt, trim=(0.0, 0.0))
        selt = _fit_window(mt, dt, skip_small, drop_decades_t)
        try:
            at, _, r2t = fit_exponent(selt)
            rep.alpha_t, rep.r2_t = at, r2t
            rep.fit_range_t = (float(selt[0, 0]), float(selt[-1, 0]))
        except DegenerateFit:
            rep.alpha_t = None
        rep.moduli_t = mt
    return rep
