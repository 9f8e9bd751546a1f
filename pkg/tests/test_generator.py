import numpy as np
import pytest
from hypothesis import given, strategies as st

from levyobstacle import errors
from levyobstacle.generator import (DiscreteGenerator, Extension, OperatorSpec, SampledFunction,
                                    apply_generator, complementarity_residual, dump_csv,
                                    symbol_check)
from levyobstacle.levy_core import cgmy_model, point_mass_model, stable_model, vg_model

GRID = np.linspace(-3, 3, 301)
XIS = [0.5, 1.0, 2.0, 4.0]


def _gen(op, interp="cubic", drift="centered", grid=GRID):
    return DiscreteGenerator(op, grid[0], grid[1] - grid[0], len(grid), interp, drift)


@given(st.floats(-3, 3), st.floats(-3, 3))
def test_cubic_interpolation_exact_on_cubics(a, x):
    f = lambda z: a * z ** 3 - z ** 2 + 2
    u = SampledFunction.from_callable(f, -4, 4, 81)
    assert abs(u(np.array([x]))[0] - f(x)) < 1e-9 * max(1, abs(a) * 27)


def test_extensions():
    u = SampledFunction.on_grid(np.linspace(0, 1, 11), np.linspace(0, 1, 11) * 2 + 1)
    assert np.allclose(u(np.array([-1.0, 2.0])), [-1.0, 5.0])
    e = u.with_values(u.values)
    e = SampledFunction(u.x_min, u.h, u.values, Extension("edge"))
    assert np.allclose(e(np.array([-1.0, 2.0])), [1.0, 3.0])
    with pytest.raises(ValueError):
        Extension("function")
    with pytest.raises(ValueError):
        Extension("mirror")


@pytest.mark.parametrize("model", [vg_model(0.3, 0.2, -0.1, 0.05), cgmy_model(1, 5, 5, 1.5, 0.01)])
def test_generator_annihilates_constants_and_sees_affine_drift(model):
    op = OperatorSpec.from_model(model)
    gen = _gen(op)
    one = SampledFunction.on_grid(GRID, np.ones_like(GRID))
    assert np.abs(gen.apply(one)).max() < 1e-12
    aff = SampledFunction.on_grid(GRID, 2 + 3 * GRID)
    # compensated generator: L(a + b x) = drift * b
    assert np.abs(gen.apply(aff) - 3 * model.drift).max() < 1e-10


def test_matrix_matches_apply(vg):
    op = OperatorSpec.from_model(vg)
    for interp, ds in [("cubic", "centered"), ("linear", "upwind")]:
        gen = _gen(op, interp, ds)
        for ext in [Extension(), Extension("edge"),
                    Extension("function", lambda x: np.maximum(1 - np.exp(x), 0))]:
            u = SampledFunction.on_grid(GRID, np.sin(GRID) + GRID ** 2 / 5, ext)
            A, c = gen.matrix(ext)
            assert np.abs(A @ u.values + c - gen.apply(u)).max() < 1e-10


def test_local_plus_jump_split(vg):
    gen = _gen(OperatorSpec.from_model(vg), "linear", "upwind")
    ext = Extension("edge")
    A, _ = gen.matrix(ext)
    Al, _ = gen.matrix(ext, "local")
    Aj, _ = gen.matrix(ext, "jump")
    assert np.abs(A - Al - Aj).max() < 1e-12


def test_linear_upwind_is_monotone(vg):
    gen = _gen(OperatorSpec.from_model(vg), "linear", "upwind")
    A, _ = gen.matrix(Extension("edge"))
    off = A - np.diag(np.diag(A))
    assert off.min() >= 0.0
    assert A.sum(axis=1).max() <= 1e-10
    assert gen.jump_intensity > 0


def test_pointwise_matches_grid(vg):
    op = OperatorSpec.from_model(vg)
    gen = _gen(op)
    f = lambda x: np.cos(x) * np.exp(-x ** 2 / 4)
    u = SampledFunction.on_grid(GRID, f(GRID), Extension("function", f))
    Lg = gen.apply(u)
    Lp = np.array([apply_generator(op, u, x) for x in GRID[100:110]])
    assert np.abs(Lp - Lg[100:110]).max() < 1e-10


@pytest.mark.parametrize("s", [0.25, 0.5, 0.75])
def test_pointwise_fractional_cosine(s):
    # L cos(x) = -cos(x) for psi(xi) = -|xi|^{2s}
    op = OperatorSpec.from_model(stable_model(s))
    g = np.linspace(-10, 10, 2048)
    u = SampledFunction.on_grid(g, np.cos(g), Extension("function", np.cos, far=(0.0, 0.0)))
    for x in (0.0, 0.3, 2.0):
        val = apply_generator(op, u, x)
        assert abs(val + np.cos(x)) < 2e-3


def test_symbol_check_vg_and_cgmy():
    for m in (vg_model(0.3, 0.2, -0.1, 0.02), cgmy_model(1, 5, 5, 0.8, 0.01), cgmy_model(1, 5, 5, 1.5, 0.01)):
        r = symbol_check(OperatorSpec.from_model(m), m.psi, XIS)
        assert r.max_error < 1e-3


def test_symbol_check_point_masses_exact():
    # zero net drift: b equals the compensator sum(lam * h)
    masses = [(0.1, 2.0), (-0.25, 1.0)]
    b = sum(lam * h for h, lam in masses)
    m = point_mass_model(masses, b=b)
    r = symbol_check(OperatorSpec.from_model(m), m.psi, XIS, n=2001)
    assert r.max_error < 1e-10


def test_heavy_tail_needs_function_extension():
    op = OperatorSpec.from_model(stable_model(0.5))
    u = SampledFunction.on_grid(GRID, np.cos(GRID))
    with pytest.raises(errors.DomainError):
        apply_generator(op, u, 0.0)


def test_state_dependent_map_only_pointwise(vg):
    op = OperatorSpec(vg.measure, vg.drift, jump_map_F=lambda x, y: y * (1 + 0.1 * np.tanh(x)),
                      state_dependent_F=True)
    with pytest.raises(ValueError):
        _gen(op)
    f = lambda x: np.exp(-x ** 2)
    u = SampledFunction.on_grid(GRID, f(GRID), Extension("function", f))
    assert np.isfinite(apply_generator(op, u, 0.1))


def test_complementarity_residual_of_obstacle_itself(vg):
    op = OperatorSpec.from_model(vg)
    phi = lambda x: np.maximum(1 - np.exp(x), 0)
    v = SampledFunction.on_grid(GRID, phi(GRID), Extension("function", phi))
    res = complementarity_residual(op, v, phi, 0.0, 0.05)
    assert np.all(res <= 1e-12)


def test_dump_csv(tmp_path):
    p = tmp_path / "Lu.csv"
    dump_csv(p, np.array([0.0, 0.5]), np.array([1.0, -2.0]))
    assert p.read_text() == "x,Lu\n0.0,1.0\n0.5,-2.0\n"


def test_eps_inner_validation(vg):
    with pytest.raises(ValueError):
        OperatorSpec(vg.measure, eps_inner=0.0)
