"""Tensor grids in flattened coordinates, the semiclassical Fourier transform in
the angular variables, and the norm engines used by the estimate harness.

Coordinates are ``(r, theta_1, ..., theta_n)`` with the flat measure
``dr dtheta``.  Angular axes are periodic boxes of length ``L`` whose outer
10% on each side is padding; the radial axis is either a uniform grid or a
composite Gauss-Lobatto-Legendre panel grid with spectral accuracy.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.fft as sfft
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from numpy.polynomial import legendre as leg

from .errors import GridMismatch, PaddingViolation, SingularRiesz, UnknownSpace

PADDING = 0.1


# --------------------------------------------------------------------------
# Gauss-Lobatto-Legendre panels
# --------------------------------------------------------------------------

@lru_cache(maxsize=None)
def gll_rule(degree: int):
    """Nodes, weights, differentiation and running-integral matrices on [-1, 1]."""
    interior = leg.Legendre.basis(degree).deriv().roots()
    nodes = np.concatenate([[-1.0], np.sort(interior.real), [1.0]])
    p_n = leg.legval(nodes, np.eye(degree + 1)[degree])
    weights = 2.0 / (degree * (degree + 1) * p_n ** 2)
    vander = leg.legvander(nodes, degree)
    inv_vander = np.linalg.inv(vander)
    diff = leg.legval(nodes, leg.legder(inv_vander)).T
    running = leg.legval(nodes, leg.legint(inv_vander, lbnd=-1.0)).T
    for arr in (nodes, weights, diff, running):
        arr.setflags(write=False)
    return nodes, weights, diff, running


def panel_nodes(a: float, b: float, panels: int, degree: int) -> np.ndarray:
    ref = gll_rule(degree)[0]
    edges = np.linspace(a, b, panels + 1)
    pts = [edges[p] + (ref[:-1] + 1.0) * 0.5 * (edges[p + 1] - edges[p]) for p in range(panels)]
    return np.concatenate(pts + [[b]])


def _panel_view(values, degree: int):
    """Stack overlapping panel windows along a new leading axis."""
    m = (values.shape[0] - 1) // degree
    idx = np.arange(m)[:, None] * degree + np.arange(degree + 1)[None, :]
    return values[idx]


# --------------------------------------------------------------------------
# grid and fields
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Grid:
    r_nodes: np.ndarray
    theta_axes: tuple
    theta_lengths: tuple
    h: float
    r_scheme: str = "uniform"
    panel_degree: int = 0
    chart_box: tuple = ()

    @property
    def dim_n(self) -> int:
        return len(self.theta_axes)

    @property
    def shape(self) -> tuple:
        return (len(self.r_nodes),) + tuple(len(t) for t in self.theta_axes)

    @property
    def dtheta(self) -> tuple:
        return tuple(length / len(t) for t, length in zip(self.theta_axes, self.theta_lengths))

    @property
    def theta_cell(self) -> float:
        return float(np.prod(self.dtheta))

    @property
    def dr(self) -> float:
        return float(self.r_nodes[1] - self.r_nodes[0])

    @property
    def r_range(self) -> tuple:
        return float(self.r_nodes[0]), float(self.r_nodes[-1])

    @property
    def r_weights(self) -> np.ndarray:
        """Quadrature weights in r (trapezoid or composite GLL)."""
        return _r_weights(self)

    def mesh(self):
        """Broadcast-ready coordinate arrays ``(r, theta_1, ..., theta_n)``."""
        return np.meshgrid(self.r_nodes, *self.theta_axes, indexing="ij", sparse=True)

    def theta_stack(self):
        """Angles as an array of shape (n_theta_1, ..., n_theta_n, n)."""
        mesh = np.meshgrid(*self.theta_axes, indexing="ij")
        return np.stack(mesh, axis=-1)

    @property
    def xi_axes(self) -> tuple:
        """Semiclassical dual lattice ``xi_k = 2 pi h k / L`` per axis (FFT order)."""
        return tuple(2 * np.pi * self.h * sfft.fftfreq(len(t), d=length / len(t))
                     for t, length in zip(self.theta_axes, self.theta_lengths))

    @property
    def dxi(self) -> float:
        return float(np.prod([2 * np.pi * self.h / length for length in self.theta_lengths]))

    def xi_mesh(self):
        return np.meshgrid(*self.xi_axes, indexing="ij", sparse=True)

    def xi_squared(self) -> np.ndarray:
        return sum(x ** 2 for x in self.xi_mesh())

    def padding_mask(self) -> np.ndarray:
        """True on angular nodes lying in the padding band of any axis."""
        masks = []
        for t, length in zip(self.theta_axes, self.theta_lengths):
            offset = (t - t[0]) / length
            masks.append((offset < PADDING - 1e-12) | (offset > 1 - PADDING + 1e-12))
        mesh = np.meshgrid(*masks, indexing="ij")
        return np.logical_or.reduce(mesh)

    def with_h(self, h: float) -> "Grid":
        return Grid(self.r_nodes, self.theta_axes, self.theta_lengths, float(h),
                    self.r_scheme, self.panel_degree, self.chart_box)

    def compatible(self, other: "Grid") -> bool:
        return (self is other) or (
            self.shape == other.shape and self.h == other.h
            and np.array_equal(self.r_nodes, other.r_nodes)
            and all(np.array_equal(a, b) for a, b in zip(self.theta_axes, other.theta_axes)))


def _r_weights(grid: Grid) -> np.ndarray:
    r = grid.r_nodes
    if grid.r_scheme == "panels":
        _, w_ref, _, _ = gll_rule(grid.panel_degree)
        weights = np.zeros_like(r)
        d = grid.panel_degree
        for p in range((len(r) - 1) // d):
            half = 0.5 * (r[(p + 1) * d] - r[p * d])
            weights[p * d:(p + 1) * d + 1] += half * w_ref
        return weights
    weights = np.empty_like(r)
    weights[1:-1] = 0.5 * (r[2:] - r[:-2])
    weights[0] = 0.5 * (r[1] - r[0])
    weights[-1] = 0.5 * (r[-1] - r[-2])
    return weights


def make_grid(h: float, n_r: int = 48, n_theta: int = 48, r_range=(1.0, 2.0),
              theta_box=None, dim_n: int = 2, r_scheme: str = "uniform",
              panels: int = 128, degree: int = 16) -> Grid:
    """Tensor grid whose angular boxes pad the chart box by 10% per side.

    ``theta_box`` is a sequence of ``(a, b)`` chart intervals (or a domain
    exposing ``theta_box``).  ``r_scheme='panels'`` uses ``panels`` GLL
    panels of the given degree, i.e. ``panels * degree + 1`` nodes.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    box = getattr(theta_box, "theta_box", theta_box)
    if box is None:
        box = tuple((np.pi / 2 - 0.4, np.pi / 2 + 0.4) for _ in range(dim_n))
    box = tuple(tuple(map(float, pair)) for pair in box)
    r0, r1 = map(float, r_range)
    if not r1 > r0 > 0:
        raise ValueError("r_range must satisfy 0 < r0 < r1")
    if r_scheme == "uniform":
        r_nodes = np.linspace(r0, r1, n_r)
    elif r_scheme == "panels":
        r_nodes = panel_nodes(r0, r1, panels, degree)
    else:
        raise ValueError(f"unknown r_scheme {r_scheme!r}")
    counts = (n_theta,) * len(box) if np.isscalar(n_theta) else tuple(n_theta)
    axes, lengths = [], []
    for (a, b), count in zip(box, counts):
        length = (b - a) / (1 - 2 * PADDING)
        start = 0.5 * (a + b) - 0.5 * length
        axes.append(start + length * np.arange(count) / count)
        lengths.append(length)
    return Grid(r_nodes, tuple(axes), tuple(lengths), float(h), r_scheme,
                degree if r_scheme == "panels" else 0, box)


@dataclass(frozen=True, eq=False)
class Field:
    samples: np.ndarray
    grid: Grid
    support_tag: str = "general"

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=complex)
        object.__setattr__(self, "samples", samples)
        if samples.shape != self.grid.shape:
            raise GridMismatch(f"samples {samples.shape} vs grid {self.grid.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("field samples must be finite")
        if self.support_tag == "compact":
            pad = self.grid.padding_mask()
            scale = max(float(np.max(np.abs(samples))), 1.0)
            if np.max(np.abs(samples[:, pad]), initial=0.0) > 1e-12 * scale:
                raise PaddingViolation("compact field does not vanish on the angular padding")
        elif self.support_tag != "general":
            raise ValueError("support_tag must be 'compact' or 'general'")

    def like(self, samples, support_tag: str | None = None) -> "Field":
        return Field(samples, self.grid, support_tag or "general")


@dataclass(frozen=True, eq=False)
class SpectralField:
    samples: np.ndarray
    grid: Grid

    @property
    def xi_axes(self):
        return self.grid.xi_axes


def _theta_axes(grid: Grid) -> tuple:
    return tuple(range(1, 1 + grid.dim_n))


def _phase(grid: Grid):
    """``exp(-i theta_0 . xi / h)`` accounting for the box offset."""
    phase = 1.0
    for t0, xi in zip((t[0] for t in grid.theta_axes), grid.xi_mesh()):
        phase = phase * np.exp(-1j * t0 * xi / grid.h)
    return phase


def theta_fourier(field, direction: str = "forward"):
    """Unitary semiclassical Fourier transform in the angular variables.

    Forward: ``u_hat(r, xi) = (2 pi h)^(-n/2) sum_theta exp(-i theta.xi/h) u dtheta``,
    so that ``sum |u|^2 dtheta = sum |u_hat|^2 dxi``.
    """
    grid = field.grid
    n = grid.dim_n
    scale = (2 * np.pi * grid.h) ** (-n / 2) * grid.theta_cell
    axes = _theta_axes(grid)
    if direction == "forward":
        data = sfft.fftn(field.samples, axes=axes) * (scale * _phase(grid))
        return SpectralField(data, grid)
    if direction == "inverse":
        data = sfft.ifftn(field.samples / (scale * _phase(grid)), axes=axes)
        return Field(data, grid)
    raise ValueError(f"direction must be forward or inverse, got {direction!r}")


def apply_multiplier(samples: np.ndarray, grid: Grid, symbol_values) -> np.ndarray:
    """Fourier multiplier in theta applied to raw samples (no normalization needed)."""
    axes = _theta_axes(grid)
    return sfft.ifftn(sfft.fftn(samples, axes=axes) * symbol_values, axes=axes)


# --------------------------------------------------------------------------
# derivatives
# --------------------------------------------------------------------------

def d_theta(samples: np.ndarray, grid: Grid, axis: int, order: int = 1) -> np.ndarray:
    """Spectral derivative along angular axis ``axis`` (0-based)."""
    t, length = grid.theta_axes[axis], grid.theta_lengths[axis]
    k = 2 * np.pi * sfft.fftfreq(len(t), d=length / len(t))
    if order % 2 == 1 and len(t) % 2 == 0:
        k[len(t) // 2] = 0.0
    shape = [1] * samples.ndim
    shape[axis + 1] = len(t)
    mult = ((1j * k) ** order).reshape(shape)
    out = sfft.ifft(sfft.fft(samples, axis=axis + 1) * mult, axis=axis + 1)
    return out if np.iscomplexobj(samples) else out.real


def d_r(samples: np.ndarray, grid: Grid, order: int = 1) -> np.ndarray:
    """Radial derivative: second-order differences or spectral panels."""
    if grid.r_scheme == "panels":
        out = samples
        for _ in range(order):
            out = panel_derivative(out, grid.r_nodes, grid.panel_degree)
        return out
    dr = grid.dr
    if order == 1:
        return np.gradient(samples, dr, axis=0, edge_order=2)
    if order == 2:
        out = np.empty_like(samples)
        out[1:-1] = (samples[2:] - 2 * samples[1:-1] + samples[:-2]) / dr ** 2
        out[0] = (2 * samples[0] - 5 * samples[1] + 4 * samples[2] - samples[3]) / dr ** 2
        out[-1] = (2 * samples[-1] - 5 * samples[-2] + 4 * samples[-3] - samples[-4]) / dr ** 2
        return out
    raise ValueError("order must be 1 or 2")


def panel_derivative(values: np.ndarray, r_nodes: np.ndarray, degree: int) -> np.ndarray:
    """Spectral derivative on a composite GLL grid; shared nodes are averaged."""
    _, _, diff, _ = gll_rule(degree)
    windows = _panel_view(values, degree)
    m = windows.shape[0]
    half = 0.5 * (r_nodes[degree::degree] - r_nodes[:-1:degree])
    deriv = np.einsum("ij,pj...->pi...", diff, windows)
    deriv = deriv / half.reshape((m,) + (1,) * (deriv.ndim - 1))
    out = np.zeros_like(values, dtype=deriv.dtype)
    count = np.zeros(values.shape[0])
    for p in range(m):
        sl = slice(p * degree, (p + 1) * degree + 1)
        out[sl] += deriv[p]
        count[sl] += 1
    return out / count.reshape((-1,) + (1,) * (values.ndim - 1))


def panel_running_integral(values: np.ndarray, r_nodes: np.ndarray, degree: int) -> np.ndarray:
    """``int_{r_0}^{r_i} values dr`` at every node of a composite GLL grid."""
    _, _, _, running = gll_rule(degree)
    windows = _panel_view(values, degree)
    m = windows.shape[0]
    half = 0.5 * (r_nodes[degree::degree] - r_nodes[:-1:degree])
    local = np.einsum("ij,pj...->pi...", running, windows)
    local = local * half.reshape((m,) + (1,) * (local.ndim - 1))
    out = np.zeros(values.shape, dtype=local.dtype)
    offset = np.zeros(values.shape[1:], dtype=local.dtype)
    for p in range(m):
        out[p * degree:(p + 1) * degree + 1] = offset + local[p]
        offset = offset + local[p, -1]
    return out


# --------------------------------------------------------------------------
# norms
# --------------------------------------------------------------------------

SPACES = ("L2", "H1", "H2", "H1r", "L2_boundary")


def _measure(grid: Grid) -> np.ndarray:
    shape = (-1,) + (1,) * grid.dim_n
    return grid.r_weights.reshape(shape) * grid.theta_cell


def _integrate(density, grid: Grid, mask) -> float:
    weights = _measure(grid) * np.ones(grid.shape)
    if mask is not None:
        weights = weights * mask
    return float(np.sum(weights * density))


def _radial_energy(samples, grid: Grid, mask, weight=None) -> float:
    """``int |d_r u|^2 (weight) dr dtheta`` with an edge-based rule on uniform grids."""
    if grid.r_scheme == "panels":
        deriv = d_r(samples, grid)
        density = np.abs(deriv) ** 2 * (1.0 if weight is None else weight)
        return _integrate(density, grid, mask)
    diff = np.diff(samples, axis=0)
    density = np.abs(diff) ** 2 / grid.dr
    if weight is not None:
        weight = np.broadcast_to(weight, grid.shape)
        density = density * 0.5 * (weight[1:] + weight[:-1])
    if mask is not None:
        mask = np.broadcast_to(mask, grid.shape)
        density = density * (mask[1:] & mask[:-1])
    return float(np.sum(density) * grid.theta_cell)


def norm(field: Field, space: str = "L2", region_mask=None) -> float:
    """Semiclassical norms on the flat measure ``dr dtheta``.

    ``H1`` is ``(|u|^2 + |h grad u|^2)^(1/2)``, ``H2`` adds all second
    derivatives scaled by ``h^2``, and ``H1r`` is
    ``(|u/r|^2 + |h d_r u|^2 + |(h/r) grad_theta u|^2)^(1/2)``.
    ``L2_boundary`` integrates over the two radial end faces.
    """
    if space not in SPACES:
        raise UnknownSpace(f"unknown space {space!r}; expected one of {SPACES}")
    grid, u, h = field.grid, field.samples, field.grid.h
    mask = None if region_mask is None else np.broadcast_to(np.asarray(region_mask, bool), grid.shape)
    r = grid.r_nodes.reshape((-1,) + (1,) * grid.dim_n)
    if space == "L2":
        return float(np.sqrt(_integrate(np.abs(u) ** 2, grid, mask)))
    if space == "L2_boundary":
        ends = np.zeros(grid.shape, dtype=bool)
        ends[0] = ends[-1] = True
        if mask is not None:
            ends &= mask
        return float(np.sqrt(np.sum(np.abs(u[ends]) ** 2) * grid.theta_cell))
    angular = [d_theta(u, grid, j) for j in range(grid.dim_n)]
    if space == "H1r":
        total = _integrate(np.abs(u / r) ** 2, grid, mask)
        total += h ** 2 * _radial_energy(u, grid, mask)
        total += h ** 2 * sum(_integrate(np.abs(a / r) ** 2, grid, mask) for a in angular)
        return float(np.sqrt(total))
    total = _integrate(np.abs(u) ** 2, grid, mask)
    total += h ** 2 * _radial_energy(u, grid, mask)
    total += h ** 2 * sum(_integrate(np.abs(a) ** 2, grid, mask) for a in angular)
    if space == "H2":
        second = [d_r(u, grid, 2)] + [d_r(a, grid) for a in angular] * 2
        second += [d_theta(a, grid, k) for a in angular for k in range(grid.dim_n)]
        total += h ** 4 * sum(_integrate(np.abs(s) ** 2, grid, mask) for s in second)
    return float(np.sqrt(total))


# --------------------------------------------------------------------------
# dual norms
# --------------------------------------------------------------------------

def solve_tridiagonal(lower, diag, upper, rhs):
    """Thomas algorithm batched over trailing axes.

    ``diag`` and ``rhs`` have shape (N, ...); ``lower``/``upper`` have shape
    (N-1, ...).  scipy's banded solver handles one matrix at a time, while
    here each angular frequency carries its own diagonal.
    """
    n = diag.shape[0]
    c = np.empty(np.broadcast_shapes(upper.shape, diag[:-1].shape), dtype=complex)
    d = np.empty(np.broadcast_shapes(rhs.shape, diag.shape), dtype=complex)
    denom = diag[0]
    c[0] = upper[0] / denom
    d[0] = rhs[0] / denom
    for i in range(1, n):
        denom = diag[i] - lower[i - 1] * c[i - 1]
        if np.any(denom == 0):
            raise SingularRiesz("zero pivot in tridiagonal solve")
        if i < n - 1:
            c[i] = upper[i] / denom
        d[i] = (rhs[i] - lower[i - 1] * d[i - 1]) / denom
    for i in range(n - 2, -1, -1):
        d[i] = d[i] - c[i] * d[i + 1]
    return d


def fem_radial_matrices(r_nodes: np.ndarray):
    """Lumped mass and 3-point stiffness on interior nodes (Dirichlet ends)."""
    spacing = np.diff(r_nodes)
    mass = 0.5 * (spacing[:-1] + spacing[1:])
    stiff_diag = 1.0 / spacing[:-1] + 1.0 / spacing[1:]
    stiff_off = -1.0 / spacing[1:-1]
    return mass, stiff_diag, stiff_off


def riesz_dual_profile(u_hat, r_nodes, h, xi_sq, space: str = "Hm1") -> np.ndarray:
    """Squared dual norm per frequency for profiles ``u_hat`` of shape (N, ...)."""
    mass, kd, ko = fem_radial_matrices(r_nodes)
    extra = (1,) * (np.ndim(u_hat) - 1)
    mass_b = mass.reshape((-1,) + extra)
    shift = 1.0 + xi_sq
    if space == "Hm1":
        diag = mass_b * shift + h ** 2 * kd.reshape((-1,) + extra)
    elif space == "Hm1r":
        inv_r2 = (1.0 / r_nodes[1:-1] ** 2).reshape((-1,) + extra)
        diag = mass_b * shift * inv_r2 + h ** 2 * kd.reshape((-1,) + extra)
    else:
        raise UnknownSpace(f"unknown dual space {space!r}")
    off = np.broadcast_to(h ** 2 * ko.reshape((-1,) + extra), (len(ko),) + np.shape(diag)[1:])
    load = mass_b * u_hat[1:-1]
    z = solve_tridiagonal(off, diag, off, load)
    return np.real(np.sum(np.conj(load) * z, axis=0))


def dual_norm(field: Field, space: str = "Hm1", domain_mask=None) -> float:
    """``sup |(u, v)| / |v|_{H^1}`` over discrete ``v`` vanishing off the mask.

    Without a mask the dual domain is the whole grid with zero values at both
    radial ends; angles are periodic and diagonalized by the FFT, so each
    frequency needs one tridiagonal solve.  A general mask falls back to a
    sparse factorization with three-point angular differences.
    """
    if space not in ("Hm1", "Hm1r"):
        raise UnknownSpace(f"unknown dual space {space!r}")
    grid = field.grid
    if not np.any(field.samples):
        return 0.0
    if domain_mask is None:
        u_hat = theta_fourier(field).samples
        value = riesz_dual_profile(u_hat, grid.r_nodes, grid.h, grid.xi_squared(), space)
        return float(np.sqrt(max(np.sum(value) * grid.dxi, 0.0)))
    return _masked_dual_norm(field, space, np.broadcast_to(np.asarray(domain_mask, bool), grid.shape))


def _masked_dual_norm(field: Field, space: str, mask: np.ndarray) -> float:
    grid = field.grid
    mask = mask.copy()
    mask[0] = mask[-1] = False
    idx = np.flatnonzero(mask.ravel())
    if idx.size == 0:
        return 0.0
    mass, kd, ko = fem_radial_matrices(grid.r_nodes)
    n_r = len(grid.r_nodes)
    mass_full = np.concatenate([[0.0], mass, [0.0]])
    k_r = sp.diags([np.concatenate([[1.0], kd, [1.0]]), np.concatenate([[0.0], ko, [0.0]]),
                    np.concatenate([[0.0], ko, [0.0]])], [0, 1, -1], shape=(n_r, n_r))
    mats = []
    eye_theta = [sp.identity(len(t)) for t in grid.theta_axes]
    r_col = grid.r_nodes
    inv_r2 = 1.0 / r_col ** 2 if space == "Hm1r" else np.ones(n_r)
    m_r = sp.diags(mass_full * inv_r2)
    op = _kron_all([m_r] + eye_theta) + grid.h ** 2 * _kron_all([k_r] + eye_theta)
    for j, (t, length) in enumerate(zip(grid.theta_axes, grid.theta_lengths)):
        n_t = len(t)
        dt = length / n_t
        lap = sp.diags([2.0 * np.ones(n_t), -np.ones(n_t - 1), -np.ones(n_t - 1)], [0, 1, -1]).tolil()
        lap[0, -1] = lap[-1, 0] = -1.0
        factors = [sp.diags(mass_full * inv_r2)] + [lap.tocsr() / dt ** 2 if k == j else eye_theta[k]
                                                    for k in range(grid.dim_n)]
        mats.append(_kron_all(factors))
    op = op + grid.h ** 2 * sum(mats)
    op = op.tocsr()[idx][:, idx] * grid.theta_cell
    load = (np.broadcast_to(mass_full.reshape((-1,) + (1,) * grid.dim_n), grid.shape).ravel()[idx]
            * field.samples.ravel()[idx] * grid.theta_cell)
    try:
        z = spla.splu(op.tocsc().astype(complex)).solve(load.astype(complex))
    except RuntimeError as exc:
        raise SingularRiesz(str(exc)) from exc
    return float(np.sqrt(max(np.real(np.vdot(load, z)), 0.0)))


def _kron_all(mats):
    out = mats[0]
    for m in mats[1:]:
        out = sp.kron(out, m, format="csr")
    return sp.csr_matrix(out)


def energy_norm(samples: np.ndarray, grid: Grid, space: str = "Hm1") -> float:
    """Discrete energy norm dual to :func:`dual_norm` (interior nodes only)."""
    field = Field(samples, grid)
    u_hat = theta_fourier(field).samples
    mass, kd, ko = fem_radial_matrices(grid.r_nodes)
    xi_sq = grid.xi_squared()
    extra = (1,) * grid.dim_n
    v = u_hat[1:-1]
    if space == "Hm1":
        weight = mass.reshape((-1,) + extra) * (1.0 + xi_sq)
    else:
        weight = (mass / grid.r_nodes[1:-1] ** 2).reshape((-1,) + extra) * (1.0 + xi_sq)
    total = np.sum(weight * np.abs(v) ** 2)
    edges = np.diff(u_hat, axis=0)
    spacing = np.diff(grid.r_nodes).reshape((-1,) + extra)
    total += grid.h ** 2 * np.sum(np.abs(edges) ** 2 / spacing)
    return float(np.sqrt(total * grid.dxi))


# --------------------------------------------------------------------------
# field dumps
# --------------------------------------------------------------------------

def write_clfield(path, field: Field) -> None:
    """``CLFIELD v1`` header followed by little-endian interleaved float64."""
    grid = field.grid
    write_clfield_array(path, field.samples, grid.h, grid.r_range[1], grid.theta_lengths)


def write_clfield_array(path, samples, h: float, big_r: float, lengths) -> None:
    """Dump a complex array of any shape; ``lengths`` are the angular periods."""
    samples = np.asarray(samples, dtype=complex)
    lengths = [float(x) for x in np.atleast_1d(lengths)]
    dims = " ".join(str(s) for s in samples.shape)
    extra = "" if len(set(lengths)) <= 1 else " " + " ".join(repr(x) for x in lengths[1:])
    header = f"CLFIELD v1 {dims} {float(h)!r} {float(big_r)!r} {lengths[0]!r}{extra}\n"
    data = np.empty(samples.size * 2, dtype="<f8")
    flat = samples.ravel(order="C")
    data[0::2] = flat.real
    data[1::2] = flat.imag
    with open(Path(path), "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(data.tobytes())


def read_clfield(path):
    """Return ``(shape, h, R, L, samples)`` from a ``CLFIELD v1`` file."""
    raw = Path(path).read_bytes()
    newline = raw.index(b"\n")
    parts = raw[:newline].decode("ascii").split()
    if parts[:2] != ["CLFIELD", "v1"]:
        raise ValueError("not a CLFIELD v1 file")
    payload = np.frombuffer(raw[newline + 1:], dtype="<f8")
    count = payload.size // 2
    numbers = parts[2:]
    # dims are integers, followed by h, R, L (floats)
    dims = []
    for token in numbers:
        if token.isdigit():
            dims.append(int(token))
        else:
            break
    h, big_r, length = (float(x) for x in numbers[len(dims):len(dims) + 3])
    if int(np.prod(dims)) != count:
        raise ValueError("payload size does not match header dimensions")
    samples = (payload[0::2] + 1j * payload[1::2]).reshape(dims)
    return tuple(dims), h, big_r, length, samples
