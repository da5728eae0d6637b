import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from carleman_lab.discretization import (Field, dual_norm, energy_norm, make_grid, norm, read_clfield,
                                         theta_fourier, write_clfield, write_clfield_array)
from carleman_lab.errors import GridMismatch, PaddingViolation, UnknownSpace


@pytest.fixture(scope="module")
def grid():
    return make_grid(0.1, n_r=33, n_theta=32)


def _random_field(grid, rng):
    return Field(rng.standard_normal(grid.shape) + 1j * rng.standard_normal(grid.shape), grid)


def _plane_wave(grid, k):
    """``exp(i theta . xi / h)`` with ``xi`` on the dual lattice."""
    xi = [2 * np.pi * grid.h * kk / L for kk, L in zip(k, grid.theta_lengths)]
    _, t1, t2 = grid.mesh()
    return Field(np.ones(grid.shape) * np.exp(1j * (t1 * xi[0] + t2 * xi[1]) / grid.h), grid), np.array(xi)


def test_plane_wave_is_a_delta(grid):
    u, xi = _plane_wave(grid, (3, -2))
    spec = np.abs(theta_fourier(u).samples[0])
    peak = np.unravel_index(np.argmax(spec), spec.shape)
    assert np.allclose([grid.xi_axes[0][peak[0]], grid.xi_axes[1][peak[1]]], xi)
    spec[peak] = 0.0
    assert spec.max() < 1e-10


def test_plancherel_and_round_trip(grid, rng):
    u = _random_field(grid, rng)
    u_hat = theta_fourier(u)
    lhs = np.sum(np.abs(u.samples) ** 2) * grid.theta_cell
    rhs = np.sum(np.abs(u_hat.samples) ** 2) * grid.dxi
    assert abs(lhs - rhs) <= 1e-10 * lhs
    back = theta_fourier(u_hat, "inverse")
    assert np.max(np.abs(back.samples - u.samples)) < 1e-10


def test_gaussian_transform_width():
    g = make_grid(0.05, n_r=3, n_theta=64)
    sigma = 0.06
    _, t1, _ = g.mesh()
    c = 0.5 * (g.theta_axes[0][0] + g.theta_axes[0][-1])
    u = Field(np.exp(-(t1 - c) ** 2 / (2 * sigma ** 2)) * np.ones(g.shape), g)
    row = np.abs(theta_fourier(u).samples[1, :, 0])
    xi = g.xi_axes[0]
    expected = row[0] * np.exp(-xi ** 2 * sigma ** 2 / (2 * g.h ** 2))
    assert np.max(np.abs(row - expected)) < 1e-10 * row[0]


def test_unit_function_norm(grid):
    u = Field(np.ones(grid.shape), grid)
    measure = (grid.r_range[1] - grid.r_range[0]) * np.prod(grid.theta_lengths)
    assert norm(u) == pytest.approx(np.sqrt(measure), rel=1e-12)


def test_plane_wave_H1(grid):
    u, xi = _plane_wave(grid, (2, 0))
    assert norm(u, "H1") == pytest.approx(np.sqrt(1 + xi @ xi) * norm(u), rel=1e-10)


def test_unknown_space(grid):
    with pytest.raises(UnknownSpace):
        norm(Field(np.zeros(grid.shape), grid), "H3")
    with pytest.raises(UnknownSpace):
        dual_norm(Field(np.ones(grid.shape), grid), "Hm2")


def test_h1_and_h1r_comparable(grid, rng):
    # on 1 <= r <= 2 the weights 1/r lie in [1/2, 1]
    for _ in range(5):
        u = _random_field(grid, rng)
        ratio = norm(u, "H1r") / norm(u, "H1")
        assert 0.5 - 1e-12 <= ratio <= 1.0 + 1e-12


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(2, 30))
def test_norms_monotone_and_ordered(seed, cut):
    g = make_grid(0.2, n_r=17, n_theta=8)
    rng = np.random.default_rng(seed)
    u = _random_field(g, rng)
    small = np.zeros(g.shape, bool)
    small[: cut % 17] = True
    for space in ("L2", "H1", "H1r"):
        assert norm(u, space, small) <= norm(u, space) + 1e-12
    assert norm(u, "H1") >= norm(u)
    assert norm(u, "H2") >= norm(u, "H1")


def test_dual_norm_of_zero(grid):
    assert dual_norm(Field(np.zeros(grid.shape), grid)) == 0.0


@pytest.mark.parametrize("k, mode", [(1, (0, 0)), (4, (0, 0)), (2, (3, 1))])
def test_dual_norm_of_discrete_eigenfunction(grid, k, mode):
    r = grid.r_nodes
    n = len(r) - 1
    dr = grid.dr
    radial = np.sin(k * np.pi * np.arange(n + 1) / n)
    wave, xi = _plane_wave(grid, mode)
    u = Field(radial[:, None, None] * wave.samples, grid)
    lam = (2 - 2 * np.cos(k * np.pi / n)) / dr ** 2
    expected = norm(u) / np.sqrt(1 + xi @ xi + grid.h ** 2 * lam)
    assert dual_norm(u) == pytest.approx(expected, rel=1e-10)


def _pairing(u, v, grid):
    # the discrete L2 pairing used by the Riesz problem (lumped mass, interior nodes)
    w = grid.r_weights[1:-1, None, None] * grid.theta_cell
    return np.sum(w * np.conj(v[1:-1]) * u[1:-1])


def test_dual_norm_dominates_random_pairings(grid, rng):
    u = _random_field(grid, rng)
    d = dual_norm(u)
    for _ in range(100):
        v = rng.standard_normal(grid.shape) + 1j * rng.standard_normal(grid.shape)
        v[0] = v[-1] = 0.0
        assert abs(_pairing(u.samples, v, grid)) / energy_norm(v, grid) <= d * (1 + 1e-10)


def test_masked_dual_norm_agrees_on_full_mask():
    g = make_grid(0.2, n_r=9, n_theta=8)
    # smooth angular profile so the three-point and spectral Laplacians agree closely
    u = Field(np.sin(np.pi * (g.r_nodes - 1))[:, None, None] * np.ones(g.shape), g)
    full = dual_norm(u)
    masked = dual_norm(u, domain_mask=np.ones(g.shape, bool))
    assert masked == pytest.approx(full, rel=1e-10)
    part = np.zeros(g.shape, bool)
    part[:5] = True
    assert dual_norm(u, domain_mask=part) <= full * (1 + 1e-12)


def test_padding_rule(grid):
    with pytest.raises(PaddingViolation):
        Field(np.ones(grid.shape), grid, "compact")
    with pytest.raises(GridMismatch):
        Field(np.ones((3, 3, 3)), grid)


def test_clfield_round_trip(tmp_path, grid, rng):
    u = _random_field(grid, rng)
    path = tmp_path / "u.clfield"
    write_clfield(path, u)
    header = path.read_bytes().split(b"\n", 1)[0].decode()
    assert header.startswith("CLFIELD v1 33 32 32 ")
    shape, h, big_r, length, samples = read_clfield(path)
    assert shape == grid.shape and h == grid.h and big_r == 2.0
    assert length == pytest.approx(grid.theta_lengths[0])
    assert np.array_equal(samples, u.samples)
    raw = np.arange(6, dtype=complex).reshape(2, 3) * (1 + 2j)
    write_clfield_array(tmp_path / "a.clfield", raw, 0.5, 3.0, (1.0, 2.0))
    assert np.array_equal(read_clfield(tmp_path / "a.clfield")[4], raw)
    payload = (tmp_path / "a.clfield").read_bytes().split(b"\n", 1)[1]
    assert np.frombuffer(payload, "<f8")[:4].tolist() == [0.0, 0.0, 1.0, 2.0]
