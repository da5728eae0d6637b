import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from carleman_lab.discretization import Field, make_grid
from carleman_lab.errors import GridMismatch, MissingCoefficients
from carleman_lab.geometry import LogRadius, to_cartesian
from carleman_lab.operators import (OperatorSpec, apply_operator, conjugation_residual,
                                    flattening_defect)


def _bump_field(grid, freq=(1.0, 2.0, -1.0)):
    r, t1, t2 = grid.mesh()
    c1, c2 = (np.mean(grid.theta_axes[0]), np.mean(grid.theta_axes[1]))
    env = (np.exp(-((r - 1.5) / 0.15) ** 2) * np.exp(-((t1 - c1) / 0.12) ** 2)
           * np.exp(-((t2 - c2) / 0.12) ** 2))
    return Field(env * np.exp(1j * (freq[0] * r + freq[1] * t1 + freq[2] * t2)), grid)


def test_convexified_conjugation_of_linear_radial_function():
    h, eps = 0.1, 0.25
    r = sp.symbols("r", positive=True)
    weight = sp.log(r) + h * sp.log(r) ** 2 / (2 * eps)
    v = sp.exp(-weight / h) * r
    radial_laplacian = sp.diff(v, r, 2) + 2 * sp.diff(v, r) / r
    oracle = sp.lambdify(r, sp.simplify(h ** 2 * sp.exp(weight / h) * radial_laplacian))
    grid = make_grid(h, n_r=41, n_theta=16)
    spec = OperatorSpec("L_phi_eps", grid, eps=eps)
    rr = grid.r_nodes[:, None, None] * np.ones(grid.shape)
    out = apply_operator(spec, Field(rr, grid)).samples
    assert np.max(np.abs(out - oracle(rr))) < 1e-8


def test_flat_model_reduces_to_shifted_laplacian():
    h, eps = 0.1, 0.25
    grid = make_grid(h, n_r=41, n_theta=24)
    spec = OperatorSpec("L_tilde_sigma", grid, eps=eps, model=True, K=0.0)
    u = _bump_field(grid).samples
    rho = grid.r_nodes[:, None, None]
    alpha = 1 + (h / eps) * np.log(rho)
    dr = grid.dr
    urr = np.zeros_like(u)
    ur = np.zeros_like(u)
    urr[1:-1] = (u[2:] - 2 * u[1:-1] + u[:-2]) / dr ** 2
    ur[1:-1] = (u[2:] - u[:-2]) / (2 * dr)
    lap_theta = sum((np.roll(u, -1, ax) - 2 * u + np.roll(u, 1, ax)) / d ** 2
                    for ax, d in zip((1, 2), grid.dtheta))
    expected = h ** 2 * urr - 2 * alpha / rho * h * ur + (alpha ** 2 * u + h ** 2 * lap_theta) / rho ** 2
    out = apply_operator(spec, Field(u, grid)).samples
    assert np.max(np.abs(out - expected)[1:-1]) < 1e-10 * np.max(np.abs(expected))


def test_free_operator_on_harmonic_and_quadratic_functions():
    h = 0.2
    grid = make_grid(h, n_r=81, n_theta=64)
    r, t1, t2 = grid.mesh()
    theta = np.stack(np.broadcast_arrays(t1, t2), -1)
    x = to_cartesian(np.broadcast_to(r, grid.shape), np.broadcast_to(theta, grid.shape + (2,)))
    spec = OperatorSpec("L_Wq", grid)
    interior = (slice(2, -2), slice(8, -8), slice(8, -8))
    linear = apply_operator(spec, Field(x[..., 0] + 2 * x[..., 2], grid)).samples
    assert np.max(np.abs(linear[interior])) < 1e-3
    quad = apply_operator(spec, Field(np.sum(x ** 2, -1), grid)).samples
    assert np.max(np.abs(quad[interior] + 6 * h ** 2)) < 1e-3


def test_magnetic_terms_follow_expansion():
    # constant W = (0, 0, w) and q = c: (D+W)^2 + q on exp(i k x3) gives (k + w)^2 + c
    h, w, c, k = 0.2, 0.7, 0.3, 1.3
    grid = make_grid(h, n_r=161, n_theta=96)
    r, t1, t2 = grid.mesh()
    theta = np.stack(np.broadcast_arrays(t1, t2), -1)
    x = to_cartesian(np.broadcast_to(r, grid.shape), np.broadcast_to(theta, grid.shape + (2,)))
    W = lambda p: np.broadcast_to(np.array([0.0, 0.0, w]), p.shape)
    q = lambda p: np.full(p.shape[:-1], c)
    spec = OperatorSpec("L_Wq", grid, W=W, q=q)
    u = np.exp(1j * k * x[..., 2])
    out = apply_operator(spec, Field(u, grid)).samples / u
    interior = (slice(4, -4), slice(12, -12), slice(12, -12))
    assert np.max(np.abs(out[interior] - h ** 2 * ((k + w) ** 2 + c))) < 5e-3 * h ** 2


def test_zero_field_conjugation_residual():
    grid = make_grid(0.1, n_r=17, n_theta=8)
    plain = OperatorSpec("L_phi", grid)
    convex = OperatorSpec("L_phi_eps", grid, eps=0.25)
    assert conjugation_residual(plain, convex, Field(np.zeros(grid.shape), grid)) == 0.0


def test_conjugation_residual_is_second_order():
    values = []
    for n in (32, 64):
        grid = make_grid(0.2, n_r=n + 1, n_theta=n)
        plain = OperatorSpec("L_phi", grid)
        convex = OperatorSpec("L_phi_eps", grid, eps=0.25)
        values.append(conjugation_residual(plain, convex, _bump_field(grid)))
    assert 3.0 <= values[0] / values[1] <= 5.0


def test_large_eps_removes_the_conjugation():
    grid = make_grid(0.2, n_r=33, n_theta=32)
    plain = OperatorSpec("L_phi", grid)
    convex = OperatorSpec("L_phi_eps", grid, eps=1e9)
    assert conjugation_residual(plain, convex, _bump_field(grid)) < 1e-7


@settings(max_examples=15, deadline=None)
@given(st.complex_numbers(max_magnitude=5, allow_nan=False, allow_infinity=False),
       st.complex_numbers(max_magnitude=5, allow_nan=False, allow_infinity=False),
       st.sampled_from(["L_Wq", "L_phi", "L_phi_eps", "L_tilde_phi_eps", "L_tilde_sigma"]))
def test_linearity(a, b, kind):
    grid = make_grid(0.1, n_r=17, n_theta=8)
    spec = OperatorSpec(kind, grid, eps=0.25, log_f=LogRadius("exp_linear", K=0.2))
    rng = np.random.default_rng(3)
    u = rng.standard_normal(grid.shape) + 1j * rng.standard_normal(grid.shape)
    v = rng.standard_normal(grid.shape)
    lhs = apply_operator(spec, Field(a * u + b * v, grid)).samples
    rhs = a * apply_operator(spec, Field(u, grid)).samples + b * apply_operator(spec, Field(v, grid)).samples
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * max(1.0, np.max(np.abs(lhs)))


def test_flattening_defect_stays_bounded():
    lf = LogRadius("exp_linear", K=0.3)
    box = ((np.pi / 2 - 0.3, np.pi / 2 + 0.3),) * 2
    values = []
    for h in (0.2, 0.1, 0.05):
        grid = make_grid(h, n_r=97, n_theta=64, theta_box=box)
        phys = OperatorSpec("L_phi_eps", grid, eps=0.25, log_f=lf)
        flat = OperatorSpec("L_tilde_phi_eps", grid, eps=0.25, log_f=lf)
        values.append(flattening_defect(phys, flat, _bump_field(grid, (0.0, 0.0, 0.0))))
    assert max(values) / min(values) < 2.0


def test_model_budgets_recorded():
    lf = LogRadius("exp_linear", K=0.3)
    grid = make_grid(0.1, n_r=9, n_theta=8, theta_box=((1.5, 1.64), (1.5, 1.64)))
    spec = OperatorSpec("L_tilde_sigma", grid, eps=0.25, log_f=lf, model=True, K=0.3)
    assert set(spec.budgets) == {"a", "beta", "gamma"}
    assert max(spec.budgets.values()) < 0.1


def test_errors():
    grid = make_grid(0.1, n_r=9, n_theta=8)
    with pytest.raises(MissingCoefficients):
        OperatorSpec("L_phi_eps", grid)
    with pytest.raises(MissingCoefficients):
        OperatorSpec("L_tilde_sigma", grid, model=True)
    other = make_grid(0.2, n_r=9, n_theta=8)
    with pytest.raises(GridMismatch):
        apply_operator(OperatorSpec("L_Wq", grid), Field(np.zeros(other.shape), other))
