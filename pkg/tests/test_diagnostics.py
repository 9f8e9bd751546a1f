import csv
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from levyobstacle import errors
from levyobstacle import obstacle_solver as S
from levyobstacle.diagnostics import estimate_modulus, fit_exponent, regularity_report

X = np.linspace(-1, 1, 401)
H = X[1] - X[0]


@given(st.floats(-5, 5).filter(lambda m: abs(m) > 1e-3), st.floats(-2, 2))
def test_affine_modulus_exact(m, c):
    om = estimate_modulus(m * X + c, "x", H)
    for h, w in om:
        assert abs(w - abs(m) * h) <= 1e-12 * max(1.0, abs(m))
    alpha, C, r2 = fit_exponent(om)
    assert abs(alpha - 1) < 1e-9 and abs(C - abs(m)) < 1e-8 * abs(m)


def test_constant_function_is_degenerate():
    om = estimate_modulus(np.full(200, 3.0), "x")
    assert all(w == 0 for _, w in om)
    with pytest.raises(errors.DegenerateFit):
        fit_exponent(om)


@given(st.floats(0.2, 1.0), st.floats(0.5, 5.0))
def test_pure_power_recovered(alpha, C):
    h = np.geomspace(1e-3, 1e-1, 20)
    a, c, r2 = fit_exponent(list(zip(h, C * h ** alpha)))
    assert abs(a - alpha) < 1e-10 and abs(c - C) < 1e-9 * C and r2 > 0.999


def test_square_root_kink():
    om = estimate_modulus(np.sqrt(np.abs(X)), "x", H)
    alpha, _, r2 = fit_exponent(om)
    assert abs(alpha - 0.5) < 0.05 and r2 > 0.99


@given(st.lists(st.floats(-10, 10), min_size=80, max_size=200))
def test_modulus_subadditive(vals):
    om = dict(estimate_modulus(np.array(vals), "x", n_lags=200, trim=0.0))
    for h, w in om.items():
        if 2 * h in om:
            assert om[2 * h] <= 2 * w + 1e-12


def test_modulus_needs_64_nodes():
    with pytest.raises(ValueError):
        estimate_modulus(np.arange(50.0), "x")
    with pytest.raises(ValueError):
        estimate_modulus(np.arange(100.0), "y")


def test_fit_needs_six_pairs():
    with pytest.raises(ValueError):
        fit_exponent([(0.1, 1.0), (0.2, 2.0)])


def test_time_direction_on_2d():
    t = np.linspace(0, 1, 101)[:, None]
    v = np.sqrt(1 - t) * np.ones((1, 70))
    om = estimate_modulus(v, "t", 0.01, trim=0.0)
    assert om[0][1] == pytest.approx(np.sqrt(0.01), rel=1e-12)


def test_report_put(vg_op, tmp_path):
    spec = S.perpetual_put(1.0, 0.05, (-4, 4))
    rep = regularity_report(S.solve_stationary_grid(spec, vg_op, 401), spec)
    assert rep.condition_flags["c0_ge_lip_b"]
    assert 0.85 <= rep.alpha_x <= 1.05 and rep.r2 >= 0.98
    assert rep.alpha_x_ci[0] <= rep.alpha_x_raw <= rep.alpha_x_ci[1]
    assert 0.5 < rep.lip_x < 1.0
    assert rep.alpha_t is None
    p = tmp_path / "regularity.json"
    rep.to_json(p)
    d = json.loads(p.read_text())
    assert d["alpha_x"] == rep.alpha_x and d["mesh_h"] == rep.mesh_h
    rep.moduli_csv(tmp_path / "moduli.csv")
    rows = list(csv.reader(open(tmp_path / "moduli.csv")))
    assert rows[0] == ["direction", "h", "omega"] and len(rows) == 1 + len(rep.moduli_x)


def test_report_constant_solution(vg_op):
    spec = S.ObstacleProblemSpec("stationary", 1.0, 0.0, 0.05, domain=(-2, 2), extension="edge")
    rep = regularity_report(S.solve_stationary_grid(spec, vg_op, 201), spec)
    assert rep.constant and rep.alpha_x is None and rep.lip_x == 0.0


def test_report_evolution_time_exponent(vg_op):
    spec = S.american_put(1.0, 0.05, 0.5, (-4, 4))
    rep = regularity_report(S.solve_evolution_grid(spec, vg_op, 100, 401), spec)
    assert 0.45 <= rep.alpha_t <= 1.05 and rep.r2_t > 0.9
    assert len(rep.moduli_t) > 6
