import numpy as np
import pytest
import sympy as sp

from carleman_lab.cgo import (EPatch, build_b, build_ell, cgo_grid, cgo_solution,
                              eikonal_pair, transport_amplitude)
from carleman_lab.errors import OmegaInsideProjection, PivotTooSmall
from carleman_lab.fvm import polar_to_points
from carleman_lab.potentials import ZeroVector


def _rotation_field(x):
    return np.stack([0.3 * x[..., 1], -0.2 * x[..., 0], 0.1 + 0 * x[..., 0]], -1)


@pytest.fixture(scope="module")
def pair(sector):
    return eikonal_pair(sector)


@pytest.fixture(scope="module")
def coarse(sector):
    return cgo_grid(sector, 0.2, "free")


@pytest.fixture(scope="module")
def amplitude(coarse, pair):
    return transport_amplitude(coarse.grid, None, pair, "plus")


@pytest.fixture(scope="module")
def patch(sector):
    return EPatch(1.0, sector.theta_box[0], sector.theta_box[1])


def test_phase_at_orthogonal_point(pair):
    x = np.array([[0.0, 1.3, 0.4]])
    assert pair.psi(x)[0] == pytest.approx(np.pi / 2)
    assert pair.phi(x)[0] == pytest.approx(np.log(np.linalg.norm(x)))


@pytest.mark.parametrize("weight_sign", [1, -1])
def test_eikonal_relations(sector, weight_sign):
    pair = eikonal_pair(sector, weight_sign=weight_sign)
    rng = np.random.default_rng(0)
    polar = np.column_stack([rng.uniform(1, 1.5, 50), rng.uniform(1.4, 1.7, 50), rng.uniform(1.4, 1.7, 50)])
    x = polar_to_points(*polar.T)
    dot, diff = pair.eikonal_residuals(x)
    assert dot < 1e-12 and diff < 1e-12
    r = np.linalg.norm(x, axis=-1)
    np.testing.assert_allclose(np.linalg.norm(pair.grad_psi(x), axis=-1), 1 / r, rtol=1e-12)
    coarse_fd = max(pair.eikonal_residuals(x, step=1e-2))
    fine_fd = max(pair.eikonal_residuals(x, step=5e-3))
    assert 3.0 < coarse_fd / fine_fd < 5.0


def test_omega_inside_projection_rejected(sector):
    direction = polar_to_points(np.array([1.0]), np.array([np.pi / 2]), np.array([np.pi / 2]))[0]
    with pytest.raises(OmegaInsideProjection):
        eikonal_pair(sector, direction)


def test_transport_residual_small(amplitude, coarse):
    assert amplitude.transport_residual(coarse.omega_mask) < 1e-6
    assert np.all(np.abs(amplitude.a) > 0)


def test_holomorphic_gauge_leaves_transport_residual(amplitude, coarse):
    before = amplitude.transport_residual(coarse.omega_mask)
    after = amplitude.times_holomorphic(lambda z: 0.3 * z ** 2 + 0.1j * z).transport_residual(coarse.omega_mask)
    assert abs(after - before) < 1e-10


def test_combined_relation_for_conjugate_pair(amplitude, pair, coarse):
    # Phi_1 for -log r is the conjugate transform, so conj(Phi_1) + Phi_2 = 2 * core.
    # Check (grad f).grad(2 core) + Laplacian f = 0 by central differences in R^3.
    polar = coarse.grid.cell_polar[coarse.omega_mask][::97]
    x = polar_to_points(*polar.T)
    core = amplitude.transform.pompeiu

    def total(points):
        r = np.linalg.norm(points, axis=-1)
        angle = np.arccos(np.clip(points[:, 0] / r, -1, 1))
        return 2 * core(r * np.exp(1j * angle))

    step = 1e-4
    grad = np.stack([(total(x + step * e) - total(x - step * e)) / (2 * step) for e in np.eye(3)], -1)
    residual = np.einsum("ij,ij->i", pair.grad(x), grad) + pair.laplacian(x)
    assert np.max(np.abs(residual)) < 1e-5


def test_minus_mode_requires_matching_weight(coarse, pair):
    with pytest.raises(ValueError):
        transport_amplitude(coarse.grid, None, pair, "minus")


def test_ell_series_matches_symbolic_solution(patch, pair):
    # on a sphere E of radius r0 the exact solution is log(r0^2 / r) + i psi
    order = 5
    ell = build_ell(patch, pair, order)
    s, r0 = sp.symbols("s r0", positive=True)
    series = sp.series(sp.log(r0 ** 2 / (r0 + s)), s, 0, order + 1).removeO()
    for j in range(1, order + 1):
        expected = float(series.coeff(s, j).subs(r0, 1.0))
        assert np.max(np.abs(ell.coefficients()[j] - expected)) < 1e-9
    assert ell.compatibility_defect() < 1e-10
    assert np.all(np.diff(ell.scales) >= 0) and ell.scales[0] >= 1


def test_real_part_of_ell_departs_linearly(patch, pair):
    ell = build_ell(patch, pair, 4)
    T1, T2 = patch.mesh
    t1 = np.full(3, T1[4, 4])
    t2 = np.full(3, T2[4, 4])
    gaps = []
    for s_val in (0.02, 0.01):
        s = np.full(3, s_val)
        x = polar_to_points(1.0 + s, t1, t2)
        # k = 2 s d_r phi to first order, since Re l falls off as -s while phi rises as +s
        c = 2.0
        gaps.append(np.max(np.abs(ell.evaluate(s, t1, t2).real - (pair.phi(x) - c * s))))
    assert 3.0 < gaps[0] / gaps[1] < 5.0


def test_pivot_guard(patch, pair):
    with pytest.raises(PivotTooSmall):
        build_ell(patch, pair, 3, eps0=10.0)


def test_b_series_constant_data(patch, pair):
    ell = build_ell(patch, pair, 4)
    T1, T2 = patch.mesh
    b = build_b(ell, ZeroVector(), np.ones(T1.shape))
    t1, t2 = np.full(2, T1[5, 5]), np.full(2, T2[5, 5])
    values = b.evaluate(np.array([0.0, ell.collar]), t1, t2)
    assert values[0] == pytest.approx(1.0)
    assert values[1] == 0.0
    # truncation at order 4 leaves an O(s^4) residual
    assert np.max(b.transport_residual(np.full(2, 0.01), t1, t2)) < 1e-6
    assert np.max(b.transport_residual(np.full(2, 0.005), t1, t2)) < 1e-7


def test_b_residual_order_under_collar_halving(patch, pair):
    order = 4
    ell = build_ell(patch, pair, order)
    T1, T2 = patch.mesh
    b = build_b(ell, _rotation_field, np.exp(0.2j * T1 + 0.1 * T2), order)
    t1 = np.full(5, T1[5, 5])
    t2 = np.linspace(T2[0, 3], T2[0, -3], 5)
    wide = np.max(b.transport_residual(np.full(5, 0.05), t1, t2))
    narrow = np.max(b.transport_residual(np.full(5, 0.025), t1, t2))
    assert wide / narrow >= 2 ** (order - 1)


def test_vanishing_mode_kills_trace_on_E(sector):
    sol = cgo_solution(sector, h=0.2, mode="vanish")
    assert sol.norms["uE_norm"] <= 1e-8
    assert sol.ell is not None and sol.b is not None


def test_free_mode_records_norms(sector):
    sol = cgo_solution(sector, h=0.2, mode="free")
    for key in ("interior_residual", "r_H1", "r_L2", "r_bdry", "transport_residual", "u_L2"):
        assert np.isfinite(sol.norms[key])
    assert np.isnan(sol.norms["uE_norm"])
    assert sol.u().shape == (sol.grid.size + len(sol.grid.boundary.face),)


def test_interior_residual_second_order(sector):
    values = [cgo_solution(sector, h=h, mode="free").norms["interior_residual"] for h in (0.2, 0.1)]
    assert 1.7 <= np.log2(values[0] / values[1]) <= 2.3


def test_bad_modes(sector):
    with pytest.raises(ValueError):
        cgo_solution(sector, h=0.2, mode="other")
    with pytest.raises(ValueError):
        cgo_solution(sector, h=0.2, mode="vanish", weight_sign=-1)
