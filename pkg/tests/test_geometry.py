import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from carleman_lab.errors import EmptyE, HullContainsOrigin, NonPositiveF, OutOfChart
from carleman_lab.geometry import (BoundaryMargins, LogRadius, classify_boundary, flatten_map,
                                   from_cartesian, invert_domain, invert_radius, make_star_domain,
                                   parse_log_radius, separating_hyperplane, to_cartesian)


def test_constant_profile_gives_shell(shell):
    theta = shell.dense_theta(5)
    assert np.allclose(shell.inner_radius(theta), 1.0)
    assert np.allclose(shell.outer_radius(theta), 2.0)
    assert shell.contains_polar(np.full(len(theta), 1.5), theta).all()
    assert not shell.contains_polar(np.full(len(theta), 0.9), theta).any()


def test_exp_linear_profile_has_constant_log_gradient():
    half = 0.2
    box = ((np.pi / 2 - half, np.pi / 2 + half),) * 2
    dom = make_star_domain("exp_linear:0.3", 3.0, theta_box=box)
    grad = dom.log_f.gradient(dom.dense_theta(7))
    assert np.allclose(grad, [0.0, 0.3])


def test_nonpositive_constant_rejected():
    with pytest.raises(NonPositiveF):
        make_star_domain("const:-1", 2.0)


def test_hull_containing_origin_rejected():
    # the chart box wraps most of the sphere, so the shell surrounds the origin
    box = ((0.2, np.pi - 0.2), (0.0, 2 * np.pi - 0.1))
    with pytest.raises(HullContainsOrigin):
        make_star_domain("const:1", 2.0, theta_box=box)


def test_certificate_separates_samples(shell):
    from carleman_lab.geometry import boundary_samples
    pts = boundary_samples(shell, 12).points
    assert np.all(pts @ shell.hull_normal > 0)


def test_separating_hyperplane_oracle():
    pts = np.array([[1.0, 0.1, 0.0], [1.2, -0.3, 0.2], [0.9, 0.0, -0.4]])
    normal, margin = separating_hyperplane(pts)
    assert margin > 0 and np.all(pts @ normal >= margin - 1e-12)
    both_sides = np.vstack([pts, -pts])
    assert separating_hyperplane(both_sides)[1] <= 1e-12


def test_cartesian_round_trip(rng):
    r = rng.uniform(0.5, 3.0, 50)
    theta = np.stack([rng.uniform(0.1, 3.0, 50), rng.uniform(-3.0, 3.0, 50)], -1)
    r2, theta2 = from_cartesian(to_cartesian(r, theta))
    assert np.allclose(r2, r) and np.allclose(theta2, theta)


def test_inner_sphere_is_front_and_cap_is_back(shell):
    cls = classify_boundary(shell)
    piece = cls.samples.piece
    assert cls.front_mask[piece == "graph"].all()
    assert cls.back_mask[piece == "cap"].all()
    assert not cls.front_mask[piece == "cap"].any()
    # side faces contain the radial direction
    assert cls.tangential_mask[piece == "side"].all()
    assert np.all(cls.front_mask | cls.back_mask)


def test_E_is_compact_in_front(shell):
    cls = classify_boundary(shell)
    assert cls.E_mask.any()
    assert np.all(cls.front_mask[cls.E_mask])
    assert np.min(-cls.x_dot_nu[cls.E_mask]) >= cls.eps_Z
    assert np.all(cls.U_mask[cls.front_mask])


def test_huge_margin_empties_E(shell):
    with pytest.raises(EmptyE):
        classify_boundary(shell, BoundaryMargins(eps_Z=10.0))


def test_reversed_weight_turns_inner_sphere_into_back(shell):
    # E must sit on the graph, which is back boundary for -log r
    with pytest.raises(EmptyE):
        classify_boundary(shell, weight_sign=-1)


def test_flatten_examples():
    theta = np.array([[1.5, 1.6]])
    r, t = flatten_map((np.array([3.0]), theta), "const:2")
    assert r[0] == pytest.approx(1.5) and np.array_equal(t, theta)
    r, _ = flatten_map((np.array([1.7]), theta), "const:1")
    assert r[0] == 1.7


def test_flatten_outside_chart(shell):
    with pytest.raises(OutOfChart):
        flatten_map((np.array([1.5]), np.array([[0.1, 0.1]])), shell)


def test_flatten_maps_graph_to_unit_radius():
    lf = LogRadius("exp_linear", K=0.3)
    theta = np.array([[1.5, 1.4], [1.6, 1.7]])
    r, _ = flatten_map((np.exp(lf(theta)), theta), lf)
    assert np.allclose(r, 1.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.1, 10.0), st.floats(1.2, 1.9), st.floats(1.2, 1.9), st.floats(-0.5, 0.5))
def test_flatten_round_trip(r, t1, t2, K):
    theta = np.array([[t1, t2]])
    f = LogRadius("exp_linear", K=K)
    fwd = flatten_map((np.array([r]), theta), f)
    back, _ = flatten_map(fwd, f, "inverse")
    assert abs(back[0] - r) <= 1e-12 * r


@given(st.floats(1e-3, 1e3))
def test_invert_radius_is_involution(r):
    theta = np.array([0.3, 0.4])
    once = invert_radius((r, theta))
    twice = invert_radius(once)
    assert twice[0] == pytest.approx(r, rel=1e-14)
    assert invert_radius((2.0, theta))[0] == 0.5


def test_inverted_shell(shell):
    inv = invert_domain(shell)
    theta = inv.dense_theta(3)
    assert np.allclose(inv.inner_radius(theta), 0.5)
    assert np.allclose(inv.outer_radius(theta), 1.0)
    cls = classify_boundary(inv, weight_sign=-1, margins=BoundaryMargins(eps_Z=0.02))
    # the graph r = 1/f is now the outer sphere; it is the front for -log r
    assert cls.front_mask[cls.samples.piece == "graph"].all()


def test_parse_log_radius_forms(tmp_path):
    path = tmp_path / "f.txt"
    path.write_text("0.1\n1 2 0.05 0.0\n")
    lf = parse_log_radius(f"coeffs:{path}")
    theta = np.array([[1.0, 0.5]])
    assert lf(theta)[0] == pytest.approx(0.1 + 0.05 * np.cos(1.0))
    assert parse_log_radius(2.0)(theta)[0] == pytest.approx(np.log(2.0))
    with pytest.raises(ValueError):
        parse_log_radius("spline:3")
