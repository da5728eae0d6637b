import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from carleman_lab.discretization import make_grid, norm, theta_fourier
from carleman_lab.errors import DeltaInfeasible, InconsistentThresholds, QuadratureDivergence
from carleman_lab.joperators import (CutoffParams, apply_J, equivalence_ratio, eval_F,
                                     factorization_residual, g_correction, jinv_closed_form,
                                     joperator_checks, loglog_slope, make_cutoff,
                                     make_large_cutoff, quadratic_residual, random_compact_field,
                                     smooth_F, split_frequencies, tau_K)


@pytest.fixture(scope="module")
def panel_grid():
    return make_grid(0.1, n_theta=16, r_scheme="panels", panels=64, degree=16)


# at a branch point the root turns rounding in |xi|^2 into an O(sqrt(eps)) error
@pytest.mark.parametrize("xi, K, expected, tol", [
    ((0.0, 0.0), 0.0, 1.0, 1e-14),
    ((np.sqrt(0.5), 0.0), 1.0, 0.5, 1e-7),
    ((1.0, 0.0), 0.0, 2.0, 1e-14),
    ((0.0, 1.0), 0.0, 2.0, 1e-14),
])
def test_symbol_examples(xi, K, expected, tol):
    assert eval_F(np.array(xi), K) == pytest.approx(expected, abs=tol)


def test_symbol_values_off_the_examples():
    # K = 0 keeps F real: 1 + |xi|
    assert eval_F(np.array([0.6, 0.0]), 0.0) == pytest.approx(1.6, abs=1e-14)
    # K = 1 at xi = 0: the root is i, so F = (1 - i)/2
    assert eval_F(np.array([0.0, 0.0]), 1.0) == pytest.approx(0.5 - 0.5j, abs=1e-14)


@settings(max_examples=60, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0, 2), st.sampled_from(["imag", "real"]))
def test_both_branches_solve_the_quadratic(x1, x2, K, branch):
    xi = np.array([x1, x2])
    assert abs(quadratic_residual(xi, K, eval_F(xi, K, branch))) < 1e-11 * (1 + x1 ** 2 + x2 ** 2)


@settings(max_examples=40, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.1, 2))
def test_imaginary_branch_has_nonpositive_imaginary_part(x1, x2, K):
    # the selected root has Im >= 0, and F conjugates it
    xi = np.array([x1, x2])
    root = np.sqrt(complex(tau_K(xi, K)))
    assert np.conj(eval_F(xi, K)).imag * (1 + K ** 2) >= K * x2 - 1e-12 or root.imag == 0


def test_branch_jump_across_cut():
    K = 0.7
    sq = np.linspace(K ** 2 / (1 + K ** 2) + 0.05, 3.0, 9)
    up = eval_F(np.stack([np.sqrt(sq), np.full_like(sq, 1e-300)], -1), K)
    down = eval_F(np.stack([np.sqrt(sq), np.full_like(sq, -1e-300)], -1), K)
    expected = 2 * np.sqrt((1 + K ** 2) * sq - K ** 2) / (1 + K ** 2)
    np.testing.assert_allclose(np.abs(up - down), expected, atol=1e-12)


def test_cutoff_examples():
    params = CutoffParams(K=0.0)
    rho = make_cutoff(params)
    assert rho(np.array([0.0, 0.0])) == 1.0
    inside = np.sqrt(params.r1) * 0.99
    assert rho(np.array([inside, 0.0])) == pytest.approx(1.0)
    assert rho(np.array([1.0, 0.0])) == 0.0
    assert rho(np.array([0.0, params.d2 * 1.01])) == 0.0
    zeta = make_large_cutoff(params)
    assert zeta(np.array([0.0, 0.0])) == 0.0
    assert zeta(np.array([1.0, 0.0])) == 1.0


def test_cutoff_thresholds_validated():
    with pytest.raises(InconsistentThresholds):
        CutoffParams(K=0.5, r1=0.1, r2=0.05)
    with pytest.raises(InconsistentThresholds):
        CutoffParams(K=0.0, d1=0.2, d2=0.1)
    with pytest.raises(InconsistentThresholds):
        smooth_F("imag", 0.3, CutoffParams(K=0.5))
    with pytest.raises(InconsistentThresholds):
        CutoffParams(K=0.5, delta=-1.0)
    with pytest.raises(DeltaInfeasible):
        smooth_F("imag", 0.5, CutoffParams(K=0.5), delta=-1.0)


def test_smoothed_symbols():
    K = 0.5
    params = CutoffParams(K=K, delta=0.05)
    F_s, F_l = smooth_F("imag", K, params), smooth_F("real", K, params)
    assert F_s.meta["max_error"] <= 0.05
    axis = np.linspace(-3, 3, 121)
    xi = np.stack(np.meshgrid(axis, axis, indexing="ij"), -1)
    level = 0.5 / (1 + K ** 2)
    assert np.min(F_s(xi).real) >= level and np.min(F_l(xi).real) >= level
    off = make_cutoff(params)(xi) < 1
    assert np.array_equal(F_l(xi)[off], eval_F(xi[off], K, "real"))
    far = np.sum(xi ** 2, -1) > 2.0
    np.testing.assert_allclose(F_s(xi)[far], eval_F(xi[far], K, "real"), atol=1e-14)


def test_split_reassembles(panel_grid):
    u = random_compact_field(panel_grid, np.random.default_rng(2))
    small, large = split_frequencies(u, CutoffParams(K=0.3))
    np.testing.assert_allclose(small.samples + large.samples, u.samples, atol=1e-14)


def test_J_on_powers(panel_grid):
    # J[r^a] = (F + h a) r^(a-1) for a theta-constant profile and constant symbol
    grid = panel_grid
    r = grid.r_nodes
    from carleman_lab.discretization import Field
    u = Field(np.broadcast_to((r ** 2.5)[:, None, None], grid.shape).astype(complex), grid)
    out = apply_J("J", 1.3, u).samples
    expected = (1.3 + grid.h * 2.5) * r ** 1.5
    np.testing.assert_allclose(out, np.broadcast_to(expected[:, None, None], grid.shape), rtol=1e-10)


def test_jinv_matches_closed_form(panel_grid):
    grid = panel_grid
    from carleman_lab.discretization import Field
    r = grid.r_nodes
    for power, F in ((1.5, 1.0), (-0.5, 0.8 + 0.3j)):
        u = Field(np.broadcast_to((r ** power)[:, None, None], grid.shape).astype(complex), grid)
        numeric = apply_J("Jinv", F, u).samples
        closed = jinv_closed_form(r, power, F, grid.h)
        assert np.max(np.abs(numeric - closed[:, None, None])) < 1e-10


def test_J_inverse_identities(panel_grid):
    F_s = smooth_F("imag", 0.5, CutoffParams(K=0.5))
    rng = np.random.default_rng(11)
    for _ in range(3):
        u = random_compact_field(panel_grid, rng)
        for outer, inner in (("J", "Jinv"), ("Jstar", "JstarInv"), ("JstarInv", "Jstar")):
            out = apply_J(outer, F_s, apply_J(inner, F_s, u))
            assert norm(u.like(out.samples - u.samples)) < 1e-8 * norm(u)


def test_inverse_rejects_nonpositive_symbol(panel_grid):
    u = random_compact_field(panel_grid, np.random.default_rng(0))
    with pytest.raises(QuadratureDivergence):
        apply_J("Jinv", -1.0, u)
    with pytest.raises(QuadratureDivergence):
        g_correction(u, 0.5 * panel_grid.h)
    with pytest.raises(ValueError):
        apply_J("K", 1.0, u)


def test_g_correction_properties(panel_grid):
    F_s = smooth_F("imag", 0.0)
    rng = np.random.default_rng(5)
    for _ in range(3):
        u = random_compact_field(panel_grid, rng)
        g = g_correction(u, F_s)
        assert norm(g) <= norm(u) + 1e-12
        assert norm(apply_J("J", F_s, g)) <= 1e-8 * max(norm(g), 1e-300)
    g_hat = theta_fourier(g).samples
    assert np.all(np.isfinite(g_hat))


def test_equivalence_ratio_stays_bounded():
    F_s = smooth_F("imag", 0.0)
    ratios = []
    for h in (0.2, 0.1, 0.05):
        grid = make_grid(h, n_theta=16, r_scheme="panels", panels=64, degree=16)
        u = random_compact_field(grid, np.random.default_rng(9))
        ratios.append(equivalence_ratio(u, F_s))
    assert max(ratios) / min(ratios) < 4.0
    assert min(ratios) > 0.05


def test_factorization_slope_two_points():
    hs = (0.1, 0.05)
    values = [factorization_residual(0.5, h) for h in hs]
    assert loglog_slope(hs, values) >= 0.8


def test_check_rows_pass():
    rows = joperator_checks(K=0.0, h=0.1, fields=2)
    assert rows and all(len(row) == 5 for row in rows)
    failing = [row for row in rows if not row[4]]
    assert not failing
