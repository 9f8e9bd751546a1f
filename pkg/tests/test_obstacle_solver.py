import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from levyobstacle import errors
from levyobstacle import obstacle_solver as S
from levyobstacle.generator import OperatorSpec
from levyobstacle.levy_core import point_mass_model, vg_model
from levyobstacle.process_sim import ProcessSpec

DOM = (-4.0, 4.0)


@pytest.fixture(scope="module")
def put():
    return S.perpetual_put(1.0, 0.05, DOM)


@pytest.fixture(scope="module")
def put_grid(put, vg_op):
    return S.solve_stationary_grid(put, vg_op, 401)


def test_tol_contact_and_seeds():
    assert S.tol_contact(1e-12) == 1e-8
    assert S.tol_contact(1e-6) == pytest.approx(1e-5)
    assert S.derived_seed(3, 1) == S.derived_seed(3, 1)
    assert S.derived_seed(3, 1) != S.derived_seed(3, 2)


def test_spec_validation():
    with pytest.raises(ValueError):
        S.ObstacleProblemSpec("stationary", 1.0, domain=(1.0, 0.0))
    with pytest.raises(ValueError):
        S.ObstacleProblemSpec("evolution", 1.0)
    with pytest.raises(ValueError):
        S.ObstacleProblemSpec("backward", 1.0)


def test_stationary_needs_positive_discount(vg_op):
    spec = S.ObstacleProblemSpec("stationary", 1.0, 0.0, 0.0, domain=DOM)
    with pytest.raises(errors.DomainError):
        S.solve_stationary_grid(spec, vg_op, 101)


def test_compatibility_error(vg_op):
    spec = S.ObstacleProblemSpec("evolution", lambda t, x: np.maximum(1 - np.exp(x), 0), 0.0, 0.05,
                                 terminal_g=0.0, horizon_T=0.5, domain=DOM)
    with pytest.raises(errors.CompatibilityError):
        S.solve_evolution_grid(spec, vg_op, 10, 101)


def test_stability_error():
    # a large, frequent jump: explicit jump step needs dt * intensity <= 1
    m = point_mass_model([(0.5, 400.0)]).calibrated(0.0)
    op = OperatorSpec.from_model(m)
    spec = S.american_put(1.0, 0.05, 0.5, DOM)
    with pytest.raises(errors.StabilityError):
        S.solve_evolution_grid(spec, op, 10, 201)


def test_jacobi_stall_reports_omega(put, vg_op):
    with pytest.raises(errors.NoConvergence) as ei:
        S.solve_stationary_grid(put, vg_op, 201, method="jacobi", max_iter=3)
    assert ei.value.omega == 0.8 and ei.value.iterations == 3


def test_policy_and_jacobi_agree(put, vg_op):
    a = S.solve_stationary_grid(put, vg_op, 201)
    b = S.solve_stationary_grid(put, vg_op, 201, method="jacobi", tol=1e-12)
    assert np.abs(a.values - b.values).max() < 1e-8


def test_value_dominates_obstacle_and_complements(put_grid):
    v = put_grid
    assert np.all(v.values >= v.phi - 1e-12)
    assert np.abs(v.residuals).max() < 1e-9
    assert v.contact[0] and not v.contact[-1]


def test_free_boundary_single_point(put_grid):
    fb = S.free_boundary(put_grid)
    x = fb.single()
    assert -0.6 < x < 0.0
    i = np.searchsorted(put_grid.x, x)
    assert put_grid.contact[i - 1] and not put_grid.contact[i + 1]


def test_free_boundary_rises_with_rate():
    # a higher rate makes waiting costlier: exercise earlier, boundary closer to the strike
    xs = []
    for r in (0.01, 0.05, 0.1):
        m = vg_model(0.3, 0.2, -0.1).calibrated(r)
        v = S.solve_stationary_grid(S.perpetual_put(1.0, r, DOM), OperatorSpec.from_model(m), 401)
        xs.append(S.free_boundary(v).single())
    assert xs[0] < xs[1] < xs[2]


def test_empty_contact(vg_op):
    spec = S.ObstacleProblemSpec("stationary", -1.0, 0.0, 0.05, domain=DOM, extension="edge")
    v = S.solve_stationary_grid(spec, vg_op, 101)
    assert np.abs(v.values).max() < 1e-12
    with pytest.raises(errors.EmptyContact):
        S.free_boundary(v)


def test_value_grid_csv(tmp_path, put_grid):
    p = tmp_path / "value.csv"
    put_grid.to_csv(p)
    raw = p.read_bytes()
    assert b"\r" not in raw
    lines = raw.decode().splitlines()
    assert lines[0] == "t,x,v,phi,contact,residual"
    assert len(lines) == 1 + len(put_grid.x)
    assert lines[1].startswith(",")
    fb = tmp_path / "boundary.csv"
    S.free_boundary(put_grid).to_csv(fb)
    assert fb.read_text().splitlines()[0] == "t,x_star"


def test_evolution_grid_structure(vg_op):
    spec = S.american_put(1.0, 0.05, 0.5, DOM)
    v = S.solve_evolution_grid(spec, vg_op, 40, 201)
    assert v.values.shape == (41, 201)
    assert np.array_equal(v.values[-1], spec.g(v.x))
    assert np.all(v.values >= v.phi - 1e-12)
    # more time to expiry is worth more
    assert np.all(np.diff(v.values, axis=0) <= 1e-12)
    fb = S.free_boundary(v)
    assert len(fb.t) == 40


def test_evolution_converges_to_perpetual(vg_op, put):
    # long horizon American put approaches the perpetual value
    long = S.solve_evolution_grid(S.american_put(1.0, 0.05, 60.0, DOM), vg_op, 1200, 201)
    perp = S.solve_stationary_grid(put, vg_op, 201)
    assert np.abs(long.values[0] - perp.values).max() < 5e-3


def test_monotonicity_suite(vg_op):
    lo = S.perpetual_put(1.0, 0.05, DOM)
    hi = S.perpetual_put(1.1, 0.05, DOM)
    rows = S.monotonicity_suite([("strike", lo, hi)], vg_op, boundaries=True, grid=201)
    assert rows[0].passed and rows[0].boundary_ordered


@given(st.floats(-0.5, 0.5), st.sampled_from(["below", "above"]))
def test_level_sums_match_direct_cashflows(shift, side):
    m = vg_model(0.3, 0.2, -0.1).calibrated(0.05)
    spec = S.perpetual_put(1.0, 0.05, (-1, 1))
    mesh = np.linspace(0, 2, 101)
    # levels off the probe lattice, so no exact ties
    levels = np.r_[-np.inf, np.linspace(-1.0123, 0.9877, 21), np.inf]
    for states in S._path_source(ProcessSpec.from_model(m), np.array([shift]), 2.0, mesh, 1e-2, 200, 1):
        X = states[0]
        a = S._level_sums(spec, X, mesh, levels, side)
        b = S._threshold_cashflows(spec, X, mesh, levels, side).sum(axis=0)
        assert np.allclose(a, b, rtol=1e-12, atol=1e-10)
        break


def test_first_hits_brute_force(vg_proc):
    mesh = np.linspace(0, 1, 51)
    levels = np.array([-0.2123, -0.0511, 0.0377, 0.1919])
    for states in S._path_source(vg_proc, np.array([0.1]), 1.0, mesh, 1e-2, 300, 2):
        X = states[0]
        for side in ("below", "above"):
            hit = X.X[:, :, None] <= levels if side == "below" else X.X[:, :, None] >= levels
            ref = np.where(hit.any(axis=1), hit.argmax(axis=1), X.shape[1])
            assert np.array_equal(S._first_hits(X, levels, side), ref)
        break


def test_stationary_mc_is_reproducible_and_low_biased(put, vg_proc, put_grid):
    kw = dict(n_paths=2000, seed=3, dt=0.1, target_tol=1e-2, n_candidates=161)
    a = S.solve_stationary_mc(put, vg_proc, [0.0, -0.6], **kw)
    b = S.solve_stationary_mc(put, vg_proc, [0.0, -0.6], **kw)
    assert np.array_equal(a.value, b.value)
    # deep in the exercise region the policy stops at once
    assert a.value[1] == pytest.approx(1 - math.exp(-0.6), abs=1e-12)
    ref = put_grid.at([0.0])[0]
    assert a.value[0] <= ref + 3 * a.stderr[0] + 5e-3
    assert a.budget(0) >= 3 * a.stderr[0]


def test_evolution_mc_terminal_and_shape(vg_proc):
    spec = S.american_put(1.0, 0.05, 0.5, DOM)
    e = S.solve_evolution_mc(spec, vg_proc, 0.5, [0.0, -0.2])
    assert np.array_equal(e.value, spec.g(np.array([0.0, -0.2])))
    e = S.solve_evolution_mc(spec, vg_proc, 0.0, [0.0], n_paths=4000, n_steps=20, seed=1)
    assert 0.03 < e.value[0] < 0.06
    with pytest.raises(ValueError):
        S.solve_evolution_mc(spec, vg_proc, 0.7, [0.0])


def test_dpp_in_contact_is_exact(put, vg_proc, put_grid):
    x = float(put_grid.x[np.searchsorted(put_grid.x, -1.0)])
    r = S.dpp_check(put, vg_proc, x, 0.2, 1000, 5, put_grid, horizon=0.5, n_candidates=161)
    assert r.passed and r.discrepancy < 1e-12


def test_mc_rejects_wrong_kind(put, vg_proc):
    with pytest.raises(ValueError):
        S.solve_evolution_mc(put, vg_proc, 0.0, [0.0])
    with pytest.raises(ValueError):
        S.solve_stationary_mc(S.american_put(1, 0.05, 0.5), vg_proc, [0.0])
