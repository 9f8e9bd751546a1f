import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from levyobstacle import errors
from levyobstacle.levy_core import (CGMYParams, VGParams, calibrate_drift, cgmy_model,
                                    check_finite_variation, check_levy_measure, exp_moment_ok,
                                    point_mass_model, psi_quadrature, stable_model, vg_model,
                                    vg_roots)

XI = np.linspace(-10, 10, 41)

vg_params = st.tuples(st.floats(0.05, 1.0), st.floats(0.05, 0.5), st.floats(-0.3, 0.3))
cgmy_params = st.tuples(st.floats(0.1, 2.0), st.floats(1.5, 10.0), st.floats(1.5, 10.0),
                        st.sampled_from([-0.5, 0.3, 0.8, 1.2, 1.5]))


def test_vg_roots_solve_quadratic():
    p = VGParams(0.3, 0.2, -0.1)
    ep, en = vg_roots(p)
    for e in (ep, en):
        assert abs(e * e - p.theta * p.nu_vg * e - p.sigma ** 2 * p.nu_vg / 2) < 1e-15
    assert ep > 0 > en


@pytest.mark.parametrize("xi", [0.3, -1.7, 4.0, 0.5 - 0.4j])
def test_vg_closed_form_matches_quadrature(xi):
    m = vg_model(0.3, 0.2, -0.1, b=0.02)
    ref = psi_quadrature(m.measure, 0.02, xi)
    assert abs(m.psi(xi) - ref) <= 1e-8 * max(1.0, abs(ref))


@pytest.mark.parametrize("Y", [-0.5, 0.3, 0.8, 1.5])
def test_cgmy_closed_form_matches_quadrature(Y):
    m = cgmy_model(1.0, 5.0, 4.0, Y)
    for xi in (0.5, 3.0, -2.0):
        ref = psi_quadrature(m.measure, 0.0, xi)
        assert abs(m.psi(xi) - ref) <= 1e-7 * max(1.0, abs(ref))


def test_cgmy_zero_exponent_is_bilateral_gamma():
    # Y = 0: log form, independent of the gamma-function branch
    m = cgmy_model(0.7, 3.0, 4.0, 0.0)
    for xi in (0.5, 2.0):
        ref = psi_quadrature(m.measure, 0.0, xi)
        assert abs(m.psi(xi) - ref) < 1e-8


def test_stable_exponent_power_law():
    for s in (0.25, 0.5, 0.75):
        m = stable_model(s)
        for xi in (0.5, 1.0, 3.0):
            assert abs(m.psi(xi) + abs(xi) ** (2 * s)) < 1e-12
            assert abs(psi_quadrature(m.measure, 0.0, xi) + abs(xi) ** (2 * s)) < 1e-7


@given(vg_params, st.floats(-20, 20))
def test_vg_exponent_properties(p, xi):
    m = vg_model(*p)
    z = m.psi(xi)
    assert z.real <= 1e-12
    assert abs(m.psi(-xi) - z.conjugate()) <= 1e-10 * max(1.0, abs(z))


@given(cgmy_params, st.floats(-20, 20))
def test_cgmy_exponent_properties(p, xi):
    m = cgmy_model(*p)
    z = m.psi(xi)
    assert z.real <= 1e-10 * max(1.0, abs(z))
    assert abs(m.psi(-xi) - z.conjugate()) <= 1e-10 * max(1.0, abs(z))


@given(st.lists(st.tuples(st.floats(0.01, 1.0), st.floats(0.1, 5.0), st.booleans()),
                min_size=1, max_size=4),
       st.floats(-10, 10))
def test_point_mass_exponent_closed_form(masses, xi):
    ms = [((h if pos else -h), lam) for h, lam, pos in masses]
    m = point_mass_model(ms)
    ref = sum(lam * (np.exp(1j * xi * h) - 1 - 1j * xi * h) for h, lam in ms)
    assert abs(m.psi(xi) - ref) < 1e-10
    assert m.psi(0.0) == 0


@given(vg_params, st.floats(0.0, 0.2))
def test_calibration_round_trip_vg(p, r):
    m = vg_model(*p)
    if not exp_moment_ok(m):
        with pytest.raises(errors.MomentError):
            m.calibrated(r)
        return
    c = m.calibrated(r)
    assert abs(c.psi(-1j) - r) < 1e-10


def test_calibration_uses_independent_quadrature():
    m = cgmy_model(1.0, 5.0, 5.0, 0.8).calibrated(0.03)
    assert abs(psi_quadrature(m.measure, m.drift, -1j) - 0.03) < 1e-9


def test_calibration_rejects_missing_exponential_moment():
    with pytest.raises(errors.MomentError):
        cgmy_model(1.0, 5.0, 0.5, 0.8).calibrated(0.05)
    with pytest.raises(errors.MomentError):
        stable_model(0.5).calibrated(0.05)
    with pytest.raises(ValueError):
        calibrate_drift(vg_model(0.3, 0.2), -0.01)


def test_vg_branch_error_outside_strip():
    m = vg_model(0.3, 0.2, -0.1)
    ep, en = vg_roots(m.params)
    with pytest.raises(errors.BranchError):
        m.psi(-1j * (1.0 / ep + 0.5))


@pytest.mark.parametrize("Y,expected", [(-0.5, True), (0.3, True), (0.999, True), (1.0, False),
                                        (1.5, False)])
def test_finite_variation_cgmy(Y, expected):
    m = cgmy_model(1.0, 5.0, 5.0, Y)
    assert m.finite_variation is expected
    assert check_finite_variation(m.measure, CGMYParams(1.0, 5.0, 5.0, Y)) is expected


def test_finite_variation_numeric_fallback():
    assert check_finite_variation(stable_model(0.25).measure) is True
    assert check_finite_variation(stable_model(0.75).measure) is False
    assert vg_model(0.3, 0.2).finite_variation


def test_levy_measure_check():
    assert check_levy_measure(vg_model(0.3, 0.2).measure)
    assert check_levy_measure(cgmy_model(1.0, 5.0, 5.0, 1.5).measure)


def test_invalid_parameters():
    with pytest.raises(ValueError):
        VGParams(-0.3, 0.2)
    with pytest.raises(ValueError):
        CGMYParams(1.0, 5.0, 5.0, 2.0)
    with pytest.raises(ValueError):
        point_mass_model([(0.0, 1.0)])


def test_vg_measure_mass_matches_density_integral():
    m = vg_model(0.3, 0.2, -0.1)
    ep, en = vg_roots(m.params)
    # int_q^inf e^{-y/ep}/(nu y) dy = E1(q/ep)/nu
    from scipy.special import exp1
    q = 0.05
    assert math.isclose(m.measure.mass(q, side=1), exp1(q / ep) / 0.3, rel_tol=1e-9)
    assert math.isclose(m.measure.mass(q, side=-1), exp1(q / abs(en)) / 0.3, rel_tol=1e-9)
