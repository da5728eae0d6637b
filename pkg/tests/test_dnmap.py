import numpy as np
import pytest
from scipy.special import spherical_in

from carleman_lab.dnmap import (DNMapEstimator, PotentialPair, classify_nodes, dn_map, forward_grid,
                                gauge_transform, real_harmonics, restrict_partial, solve_dirichlet)
from carleman_lab.errors import EmptyMask, NonvanishingBoundaryPsi
from carleman_lab.geometry import BallDomain
from carleman_lab.potentials import Bump, ConstantScalar, SwirlField

BALL = BallDomain(np.zeros(3), 1.0)
COARSE = 8


@pytest.fixture(scope="module")
def swirl():
    return SwirlField((0, 0, 1.5), 1.0, 0.4)


@pytest.fixture(scope="module")
def bump():
    return Bump((0, 0, 1.5), 0.3, 1.0)


def test_harmonics_are_orthonormal():
    t = np.linspace(0, np.pi, 121)
    p = np.linspace(0, 2 * np.pi, 240, endpoint=False)
    T, P = np.meshgrid(t, p, indexing="ij")
    Y, labels = real_harmonics(3, T.ravel(), P.ravel())
    w = (np.sin(T) * (t[1] - t[0]) * (p[1] - p[0])).ravel()
    gram = (Y * w) @ Y.T
    assert len(labels) == 16
    np.testing.assert_allclose(gram, np.eye(16), atol=2e-3)


def test_ball_eigenvalues_are_degrees():
    dn = dn_map(BALL, l_max=4, resolution=24)
    degrees = np.array([l for l, _ in dn.labels])
    assert np.max(np.abs(dn.eigen_estimates() - degrees) / np.maximum(degrees, 1)) < 0.02


def test_ball_with_constant_potential_matches_bessel_ratio():
    k = 2.0
    dn = dn_map(BALL, q=ConstantScalar(k ** 2), l_max=4, resolution=24)
    degrees = [l for l, _ in dn.labels]
    expected = np.array([k * spherical_in(l, k, derivative=True) / spherical_in(l, k) for l in degrees])
    assert np.max(np.abs(dn.eigen_estimates() - expected) / expected) < 0.02


def test_dirichlet_solve_reproduces_harmonic_polynomial():
    sol = solve_dirichlet(BALL, None, None, lambda x: x[:, 0] * x[:, 1], resolution=16)
    assert sol.interior_residual < 1e-10
    from carleman_lab.fvm import polar_to_points
    x = polar_to_points(*sol.grid.cell_polar.T)
    assert np.max(np.abs(sol.cells - x[:, 0] * x[:, 1])) < 2e-2


def test_variational_dn_map_is_symmetric_without_field(shell):
    dn = dn_map(shell, None, ConstantScalar(1.0), resolution=COARSE, flux="variational")
    assert dn.symmetry_defect() < 1e-12


def test_variational_dn_map_is_hermitian_with_real_field(shell, swirl):
    dn = dn_map(shell, swirl, ConstantScalar(1.0), resolution=COARSE, flux="variational")
    A = dn.areas[:, None] * dn.matrix
    assert np.max(np.abs(A - A.conj().T)) < 1e-12 * np.max(np.abs(A))


def test_gauge_invariance(shell, swirl, bump):
    q = ConstantScalar(1.0)
    d1 = dn_map(shell, swirl, q, resolution=COARSE)
    d2 = dn_map(shell, gauge_transform(swirl, bump, shell), q, resolution=COARSE)
    d3 = dn_map(shell, None, q, resolution=COARSE)
    scale = np.max(np.abs(d1.matrix))
    assert np.max(np.abs(d1.matrix - d2.matrix)) < 1e-12 * scale
    assert np.max(np.abs(d1.matrix - d3.matrix)) > 1e-4 * scale


def test_gauge_requires_vanishing_psi(shell, swirl):
    with pytest.raises(NonvanishingBoundaryPsi):
        gauge_transform(swirl, Bump((0, 0, 1.0), 0.5, 1.0), shell)


def test_gauge_pair_has_equal_curls(swirl, bump):
    pts = np.random.default_rng(0).uniform(-0.2, 0.2, (20, 3)) + np.array([0, 0, 1.5])
    gauge = PotentialPair(swirl, gauge_transform(swirl, bump), None, None)
    # curls come from central differences with step 1e-5
    assert gauge.curl_difference(pts) < 1e-4
    distinct = PotentialPair(swirl, SwirlField((0, 0, 1.5), 2.0, 0.4), None, None)
    assert distinct.curl_difference(pts) > 1e-2


def test_partial_data(shell, swirl, bump):
    grid = forward_grid(shell, COARSE)
    masks = classify_nodes(shell, grid)
    assert masks.U.any() and masks.E.any()
    assert np.all(masks.front[masks.E])
    q = ConstantScalar(1.0)
    d1 = dn_map(shell, swirl, q, resolution=COARSE)
    d2 = dn_map(shell, gauge_transform(swirl, bump, shell), q, resolution=COARSE)
    d3 = dn_map(shell, None, q, resolution=COARSE)
    p1, p2, p3 = (restrict_partial(d, masks.U, masks.E) for d in (d1, d2, d3))
    assert p1.distance(p1) == 0.0
    assert p1.relative_distance(p2) < 1e-12
    assert p1.relative_distance(p3) > 1e-5
    with pytest.raises(EmptyMask):
        restrict_partial(d1, np.zeros_like(masks.U), masks.E)


def test_partial_needs_nodal_basis():
    dn = dn_map(BALL, l_max=1, resolution=8)
    with pytest.raises(ValueError):
        restrict_partial(dn, np.ones(4, bool), np.zeros(4, bool))


def test_estimator_fit_predict(shell):
    est = DNMapEstimator(shell, resolution=COARSE)
    assert est.get_params()["resolution"] == COARSE
    est.fit((None, ConstantScalar(1.0)))
    direct = dn_map(shell, None, ConstantScalar(1.0), resolution=COARSE)
    np.testing.assert_allclose(est.matrix_, direct.matrix, atol=1e-13)
    g = np.random.default_rng(1).standard_normal((3, est.matrix_.shape[0]))
    np.testing.assert_allclose(est.predict(g), g @ direct.matrix.T, atol=1e-12)
    with pytest.raises(ValueError):
        est.set_params(bogus=1)
