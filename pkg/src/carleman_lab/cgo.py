"""Complex geometrical optics solutions on spherical shell sectors.

A solution has the form ``u = exp((phi + i psi)/h) (a + r) - exp(l/h) b``:

* ``phi = +-log r`` and ``psi`` the spherical distance to a pole ``omega``
  form an eikonal pair;
* ``a = exp(Phi)`` solves the transport equation, slice by slice, through a
  Cauchy transform in ``z = x.omega + i |x'|``;
* ``l`` and ``b`` are truncated power series in the distance to the inner
  sphere that make ``u`` vanish there;
* ``r`` is the smallest-norm solution of the conjugated equation on a
  padded box, with boundary values left free except where ``u`` must vanish.

Forward solves use :mod:`carleman_lab.fvm`; transport amplitudes need
``omega`` along the chart's polar axis ``e_1`` so that slices are the
half-planes of fixed last angle.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (CorrectionSolveFailed, OmegaInsideProjection, PivotTooSmall,
                     SliceDegenerate, ZeroEigenvalue)
from .fvm import MinimumNormSolver, SphericalGrid, assemble, polar_frame, polar_to_points
from .geometry import StarDomain
from .potentials import ZeroVector

CHART_AXIS = np.array([1.0, 0.0, 0.0])
DEFAULT_ORDER = 6
CONTOUR_MARGIN = 0.05


# --------------------------------------------------------------------------
# eikonal pair
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PhasePair:
    """``phi = weight_sign * log|x|`` and ``psi = angle(x, omega)`` in ``R^(n+1)``."""

    omega: np.ndarray
    weight_sign: int = 1
    dim_n: int = 2

    def phi(self, x):
        return self.weight_sign * np.log(np.linalg.norm(x, axis=-1))

    def psi(self, x):
        x = np.asarray(x, dtype=float)
        c = np.einsum("...j,j->...", x, self.omega) / np.linalg.norm(x, axis=-1)
        return np.arccos(np.clip(c, -1.0, 1.0))

    def phase(self, x):
        return self.phi(x) + 1j * self.psi(x)

    def grad_phi(self, x):
        x = np.asarray(x, dtype=float)
        return self.weight_sign * x / np.sum(x ** 2, axis=-1, keepdims=True)

    def grad_psi(self, x):
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(x, axis=-1, keepdims=True)
        xhat = x / r
        c = np.einsum("...j,j->...", xhat, self.omega)[..., None]
        tangent = self.omega - c * xhat
        return -tangent / (r * np.sqrt(np.maximum(1.0 - c ** 2, 1e-300)))

    def grad(self, x):
        return self.grad_phi(x) + 1j * self.grad_psi(x)

    def laplacian(self, x):
        """``Delta(phi + i psi)``; on the sphere ``Delta psi = (n-1) cot psi``."""
        x = np.asarray(x, dtype=float)
        r2 = np.sum(x ** 2, axis=-1)
        n = self.dim_n
        return (self.weight_sign * (n - 1) + 1j * (n - 1) / np.tan(self.psi(x))) / r2

    def eikonal_residuals(self, x, step: float | None = None):
        """Max of ``|grad phi . grad psi|`` and ``||grad phi| - |grad psi||``.

        With ``step`` the gradients come from central differences.
        """
        x = np.asarray(x, dtype=float)
        if step is None:
            gp, gq = self.grad_phi(x), self.grad_psi(x)
        else:
            gp = np.zeros(x.shape)
            gq = np.zeros(x.shape)
            for k in range(x.shape[-1]):
                e = np.zeros(x.shape[-1])
                e[k] = step
                gp[..., k] = (self.phi(x + e) - self.phi(x - e)) / (2 * step)
                gq[..., k] = (self.psi(x + e) - self.psi(x - e)) / (2 * step)
        dot = np.abs(np.sum(gp * gq, axis=-1))
        diff = np.abs(np.linalg.norm(gp, axis=-1) - np.linalg.norm(gq, axis=-1))
        return float(np.max(dot)), float(np.max(diff))


def _chart_point(theta):
    theta = np.asarray(theta, dtype=float)
    return polar_to_points(np.ones(theta.shape[:-1]), theta[..., 0], theta[..., 1])


def eikonal_pair(domain: StarDomain, omega=CHART_AXIS, weight_sign: int = 1) -> PhasePair:
    if domain.dim_n != 2:
        raise ValueError("CGO constructions are implemented for three-dimensional domains")
    omega = np.asarray(omega, dtype=float)
    omega = omega / np.linalg.norm(omega)
    directions = _chart_point(domain.dense_theta(41))
    gap = float(np.min(np.arccos(np.clip(directions @ omega, -1.0, 1.0))))
    if gap < 1e-6:
        raise OmegaInsideProjection(f"omega lies {gap:.2e} from the angular projection of the domain")
    return PhasePair(omega, int(np.sign(weight_sign)) or 1, domain.dim_n)


# --------------------------------------------------------------------------
# Cauchy transform on annular-sector slices
# --------------------------------------------------------------------------

def _gauss(order):
    return np.polynomial.legendre.leggauss(order)


@dataclass(eq=False)
class SliceTransform:
    """Inverse of ``d/dzbar`` on ``{r e^{i t}: r in r_edges, t in t_edges}``.

    ``pompeiu`` handles the source ``-i (n-1)/(4 Im z)`` exactly through a
    boundary integral over the box grown by ``contour_margin``, which keeps
    targets on the grid boundary away from the near-singular quadrature;
    ``kernel`` gives midpoint weights for sampled sources, with the target's
    own cell integrated exactly.
    """

    r_edges: np.ndarray
    t_edges: np.ndarray
    dim_n: int = 2
    panels_per_cell: int = 4
    order: int = 8
    contour_margin: float = 0.0

    def __post_init__(self):
        if self.t_edges[0] <= 0 or self.t_edges[-1] >= np.pi:
            raise SliceDegenerate("the slice touches the axis Im z = 0")
        re, te = self.r_edges, self.t_edges
        rc = 0.5 * (re[1:] + re[:-1])
        tc = 0.5 * (te[1:] + te[:-1])
        R, T = np.meshgrid(rc, tc, indexing="ij")
        self.centers = (R * np.exp(1j * T)).ravel()
        self.areas = (0.5 * (re[1:] ** 2 - re[:-1] ** 2)[:, None] * np.diff(te)[None, :]).ravel()
        m = self.contour_margin
        ra, rb = re[0] - m, re[-1] + m
        ta, tb = max(te[0] - m / ra, 0.5 * te[0]), min(te[-1] + m / ra, 0.5 * (te[-1] + np.pi))
        dr, dt = np.min(np.diff(re)), np.min(np.diff(te))
        self.nodes, self.dz = self._contour(ra, rb, ta, tb,
                                            int(np.ceil(self.panels_per_cell * (rb - ra) / dr)),
                                            int(np.ceil(self.panels_per_cell * (tb - ta) / dt)))

    def _contour(self, ra, rb, ta, tb, n_radial, n_angular):
        """Counterclockwise quadrature nodes and ``dz`` weights on the sector boundary."""
        x, w = _gauss(self.order)
        nodes, weights = [], []

        def arc(radius, t0, t1, panels):
            edges = np.linspace(t0, t1, panels + 1)
            t = (0.5 * (edges[1:] - edges[:-1])[:, None] * (x + 1) + edges[:-1, None]).ravel()
            dt = (0.5 * (edges[1:] - edges[:-1])[:, None] * w).ravel()
            z = radius * np.exp(1j * t)
            nodes.append(z)
            weights.append(1j * z * dt)

        def segment(angle, r0, r1, panels):
            edges = np.linspace(r0, r1, panels + 1)
            r = (0.5 * (edges[1:] - edges[:-1])[:, None] * (x + 1) + edges[:-1, None]).ravel()
            dr = (0.5 * (edges[1:] - edges[:-1])[:, None] * w).ravel()
            nodes.append(r * np.exp(1j * angle))
            weights.append(np.exp(1j * angle) * dr)

        arc(rb, ta, tb, n_angular)
        segment(tb, rb, ra, n_radial)
        arc(ra, tb, ta, n_angular)
        segment(ta, ra, rb, n_radial)
        return np.concatenate(nodes), np.concatenate(weights)

    def particular(self, z):
        """``P`` with ``dP/dzbar = -i (n-1) / (4 Im z)``."""
        return -0.5 * (self.dim_n - 1) * np.log(z - np.conj(z))

    def pompeiu(self, z, chunk: int = 1024):
        """``T[-i(n-1)/(4t)](z) = -(1/2 pi i) oint (P(zeta) - P(z)) / (zeta - z) dzeta``.

        The subtracted form stays regular for targets on the boundary.
        """
        z = np.asarray(z, dtype=complex).ravel()
        Pn = self.particular(self.nodes)
        out = np.empty(z.shape, dtype=complex)
        for start in range(0, len(z), chunk):
            zz = z[start:start + chunk, None]
            Pz = self.particular(zz)
            out[start:start + chunk] = -np.sum((Pn[None, :] - Pz) / (self.nodes[None, :] - zz) * self.dz,
                                               axis=1) / (2j * np.pi)
        return out

    def _cell_of(self, z):
        re, te = self.r_edges, self.t_edges
        i = np.clip(np.searchsorted(re, np.abs(z)) - 1, 0, len(re) - 2)
        j = np.clip(np.searchsorted(te, np.angle(z)) - 1, 0, len(te) - 2)
        return i, j

    def cell_integral(self, z, i, j):
        """``(1/pi) int_cell dA / (z - zeta)`` through ``(1/2 pi i) oint (zbar' - zbar)/(z - zeta) dzeta``."""
        re, te = self.r_edges, self.t_edges
        out = np.empty(len(z), dtype=complex)
        for k in range(len(z)):
            nodes, dz = self._contour(re[i[k]], re[i[k] + 1], te[j[k]], te[j[k] + 1], 4, 4)
            out[k] = np.sum((np.conj(nodes) - np.conj(z[k])) / (z[k] - nodes) * dz) / (2j * np.pi)
        return out

    def kernel(self, z):
        """Matrix ``K`` with ``T[rho](z) ~ K @ rho(cell centres)``."""
        z = np.asarray(z, dtype=complex).ravel()
        K = self.areas[None, :] / (np.pi * (z[:, None] - self.centers[None, :]))
        i, j = self._cell_of(z)
        own = i * (len(self.t_edges) - 1) + j
        K[np.arange(len(z)), own] = self.cell_integral(z, i, j)
        return K


# --------------------------------------------------------------------------
# transport amplitudes on a grid
# --------------------------------------------------------------------------

def _require_chart_axis(pair: PhasePair):
    if not np.allclose(pair.omega, CHART_AXIS, atol=1e-12):
        raise ValueError("transport amplitudes need omega along the chart polar axis e_1")


def grid_nodes(grid: SphericalGrid):
    """Polar coordinates of all nodes: cells first, then boundary nodes."""
    return np.concatenate([grid.cell_polar, grid.boundary.polar])


@dataclass(eq=False)
class Amplitude:
    """``a = exp(Phi)`` on every node of a grid (cells, then boundary nodes)."""

    grid: SphericalGrid
    pair: PhasePair
    mode: str
    Phi: np.ndarray
    transform: SliceTransform
    W: object = None
    log_gamma: object = None
    _core_pompeiu: np.ndarray = field(default=None, repr=False)
    _core_w: np.ndarray = field(default=None, repr=False)

    @property
    def a(self):
        return np.exp(self.Phi)

    @property
    def cells(self):
        return self.a[: self.grid.size]

    @property
    def boundary(self):
        return self.a[self.grid.size:]

    def times_holomorphic(self, log_gamma) -> "Amplitude":
        """Multiply ``a`` by ``gamma(z)``, holomorphic in the slice variable."""
        z = _slice_z(grid_nodes(self.grid))
        extra = log_gamma(z)
        if self.mode == "minus":
            extra = np.conj(log_gamma(z))
        chained = log_gamma if self.log_gamma is None else (lambda w, f=self.log_gamma: f(w) + log_gamma(w))
        return Amplitude(self.grid, self.pair, self.mode, self.Phi + extra, self.transform, self.W,
                         chained, self._core_pompeiu, self._core_w)

    def dbar_defect(self, step: float = 1e-4):
        """``dPhi_core/dzbar - rho`` on cell centres, with ``Phi_core`` the unconjugated transform.

        The Pompeiu part is differenced pointwise, the sampled magnetic part on
        the grid (interior cells only, zeros elsewhere).
        """
        grid = self.grid
        z = _slice_z(grid.cell_polar)
        zz = np.unique(np.round(z, 14))
        tr = self.transform

        def core(w):
            value = tr.pompeiu(w)
            if self.log_gamma is not None:
                value = value + self.log_gamma(w)
            return value

        dbar = 0.5 * ((core(zz + step) - core(zz - step)) / (2 * step)
                      + 1j * (core(zz + 1j * step) - core(zz - 1j * step)) / (2 * step))
        rho0 = -1j * (self.pair.dim_n - 1) / (4 * zz.imag)
        lookup = dict(zip(np.round(zz, 14), dbar - rho0))
        defect = np.array([lookup[v] for v in np.round(z, 14)])
        if self._core_w is not None:
            defect = defect + _grid_dbar_defect(grid, self._core_w, self._rho_w_cells())
        return defect

    def _rho_w_cells(self):
        sign = 1.0 if self.mode == "plus" else -1.0
        return sign * _magnetic_source(self.W, self.grid.cell_polar)

    def transport_residual(self, mask=None) -> float:
        """RMS of ``(grad f . grad a + i grad f . W a + Delta f a / 2) / a`` over cells."""
        defect = 2.0 * np.abs(self.dbar_defect()) / self.grid.cell_polar[:, 0]
        vol = self.grid.volumes
        mask = np.ones(self.grid.size, dtype=bool) if mask is None else mask
        return float(np.sqrt(np.sum(vol[mask] * defect[mask] ** 2) / np.sum(vol[mask])))


def _slice_z(polar):
    return polar[:, 0] * np.exp(1j * polar[:, 1])


def _magnetic_source(W, polar):
    """``-(i/2)(W_s + i W_t)`` at polar points; ``t`` along ``(0, cos t2, sin t2)``."""
    if W is None or isinstance(W, ZeroVector):
        return np.zeros(len(polar), dtype=complex)
    pts = polar_to_points(polar[:, 0], polar[:, 1], polar[:, 2])
    vals = W(pts)
    w_s = vals[:, 0]
    w_t = vals[:, 1] * np.cos(polar[:, 2]) + vals[:, 2] * np.sin(polar[:, 2])
    return -0.5j * (w_s + 1j * w_t)


def _grid_dbar_defect(grid: SphericalGrid, values, rho):
    """Central-difference ``d/dzbar`` in polar slice coordinates minus ``rho``; interior cells only."""
    n_r, n1, n2 = grid.shape
    V = values.reshape(grid.shape)
    P = rho.reshape(grid.shape)
    rc, t1c, _ = grid.centers
    out = np.zeros(grid.shape, dtype=complex)
    dr = (V[2:, 1:-1] - V[:-2, 1:-1]) / (rc[2:] - rc[:-2])[:, None, None]
    dt = (V[1:-1, 2:] - V[1:-1, :-2]) / (t1c[2:] - t1c[:-2])[None, :, None]
    r = rc[1:-1][:, None, None]
    phase = np.exp(1j * t1c[1:-1])[None, :, None]
    out[1:-1, 1:-1] = 0.5 * phase * (dr + 1j * dt / r) - P[1:-1, 1:-1]
    return out.ravel()


def transport_amplitude(grid, W, pair: PhasePair, conj_mode: str = "plus",
                        transform: SliceTransform | None = None) -> Amplitude:
    """Transport amplitude on every node of ``grid`` (a :class:`SphericalGrid` or a StarDomain).

    ``plus`` solves ``dPhi/dzbar = -(i/2)(W_s + i W_t) - i(n-1)/(4t)`` for the
    weight ``+log r``; ``minus`` returns the conjugate of the transform with
    the sign of ``W`` flipped, which solves the transport equation for
    ``-log r``.
    """
    _require_chart_axis(pair)
    if isinstance(grid, StarDomain):
        grid = cgo_grid(grid, 0.1, "free").grid
    if conj_mode not in ("plus", "minus"):
        raise ValueError("conj_mode must be 'plus' or 'minus'")
    if (conj_mode == "plus") != (pair.weight_sign > 0):
        raise ValueError("conj_mode 'plus' goes with weight +log r, 'minus' with -log r")
    transform = transform or SliceTransform(grid.r_edges, grid.t1_edges, pair.dim_n,
                                            contour_margin=CONTOUR_MARGIN)
    nodes = grid_nodes(grid)
    z = _slice_z(nodes)
    core0 = transform.pompeiu(z)
    core_w = None
    if W is not None and not isinstance(W, ZeroVector):
        core_w = _magnetic_transform(grid, transform, W, nodes, z)
        if conj_mode == "minus":
            core_w = -core_w
    core = core0 + (0 if core_w is None else core_w)
    Phi = core if conj_mode == "plus" else np.conj(core)
    return Amplitude(grid, pair, conj_mode, Phi, transform, W, None, core0,
                     None if core_w is None else core_w[: grid.size])


def _magnetic_transform(grid, transform, W, nodes, z):
    """Midpoint Cauchy transform of the magnetic source, grouped by last angle."""
    rc, t1c, _ = grid.centers
    R, T = np.meshgrid(rc, t1c, indexing="ij")
    etas, inverse = np.unique(np.round(nodes[:, 2], 13), return_inverse=True)
    zs, zi = np.unique(np.round(z, 13), return_inverse=True)
    K = transform.kernel(zs)
    out = np.empty(len(nodes), dtype=complex)
    for e, eta in enumerate(etas):
        src = np.stack([R.ravel(), T.ravel(), np.full(R.size, eta)], axis=-1)
        values = K @ _magnetic_source(W, src)
        sel = inverse == e
        out[sel] = values[zi[sel]]
    return out


# --------------------------------------------------------------------------
# power series in the distance to the inner sphere
# --------------------------------------------------------------------------

def cheb_nodes(a: float, b: float, count: int):
    k = np.arange(count + 1)
    return a + (b - a) * (1 - np.cos(np.pi * k / count)) / 2


def cheb_diff(a: float, b: float, count: int):
    """Differentiation matrix on :func:`cheb_nodes`."""
    x = np.cos(np.pi * np.arange(count + 1) / count)
    c = np.ones(count + 1)
    c[0] = c[-1] = 2.0
    c *= (-1.0) ** np.arange(count + 1)
    X = x[:, None] - x[None, :]
    D = np.outer(c, 1 / c) / (X + np.eye(count + 1))
    D -= np.diag(D.sum(axis=1))
    # nodes above run from +1 to -1 while cheb_nodes run from a to b
    return -D * 2.0 / (b - a)


def bary_matrix(a: float, b: float, count: int, targets):
    """Barycentric interpolation from :func:`cheb_nodes` to ``targets``."""
    nodes = cheb_nodes(a, b, count)
    w = (-1.0) ** np.arange(count + 1)
    w[0] *= 0.5
    w[-1] *= 0.5
    targets = np.asarray(targets, dtype=float)
    diff = targets[:, None] - nodes[None, :]
    exact = np.isclose(diff, 0.0, atol=1e-14)
    diff[exact] = 1.0
    M = w[None, :] / diff
    M /= M.sum(axis=1, keepdims=True)
    rows = np.any(exact, axis=1)
    M[rows] = exact[rows].astype(float)
    return M


@dataclass(eq=False)
class SeriesField:
    """``sum_j c[j](t) s^j`` with coefficients on a tensor Chebyshev patch."""

    coeffs: np.ndarray
    patch: "EPatch"

    @property
    def order(self) -> int:
        return self.coeffs.shape[0] - 1

    def __add__(self, other):
        m = max(self.order, other.order) + 1
        out = np.zeros((m,) + self.coeffs.shape[1:], dtype=complex)
        out[: self.order + 1] += self.coeffs
        out[: other.order + 1] += other.coeffs
        return SeriesField(out, self.patch)

    def scale(self, factor):
        return SeriesField(self.coeffs * factor, self.patch)

    def mul(self, other, order: int | None = None):
        order = self.order + other.order if order is None else order
        out = np.zeros((order + 1,) + self.coeffs.shape[1:], dtype=complex)
        for j in range(min(self.order, order) + 1):
            for k in range(min(other.order, order - j) + 1):
                out[j + k] += self.coeffs[j] * other.coeffs[k]
        return SeriesField(out, self.patch)

    def ds(self):
        if self.order == 0:
            return SeriesField(np.zeros_like(self.coeffs), self.patch)
        j = np.arange(1, self.order + 1).reshape((-1,) + (1,) * (self.coeffs.ndim - 1))
        return SeriesField(j * self.coeffs[1:], self.patch)

    def dt(self, axis: int):
        D = self.patch.diff[axis]
        return SeriesField(np.moveaxis(np.tensordot(D, self.coeffs, axes=([1], [axis + 1])), 0, axis + 1),
                           self.patch)

    def times_t(self, values):
        return SeriesField(self.coeffs * values[None], self.patch)

    @classmethod
    def polynomial(cls, coeffs, patch):
        shape = (len(coeffs),) + patch.shape
        return cls(np.asarray(coeffs, dtype=complex)[:, None, None] * np.ones(shape), patch)

    def coefficient(self, j: int):
        return self.coeffs[j] if j <= self.order else np.zeros(self.patch.shape, dtype=complex)

    def evaluate(self, s, t1, t2, derivative: int = 0):
        """Values at points ``(s, t1, t2)``; ``t``-interpolation is barycentric."""
        s = np.asarray(s, dtype=float)
        p = self.patch
        M1 = bary_matrix(*p.t1_range, p.count, t1)
        M2 = bary_matrix(*p.t2_range, p.count, t2)
        series = self
        for _ in range(derivative):
            series = series.ds()
        out = np.zeros(len(s), dtype=complex)
        for j in range(series.order, -1, -1):
            coef = np.einsum("pa,ab,pb->p", M1, series.coeffs[j], M2)
            out = out * s + coef
        return out


@dataclass(frozen=True)
class EPatch:
    """Chebyshev patch on the sphere ``r = r0`` over an angular box."""

    r0: float
    t1_range: tuple
    t2_range: tuple
    count: int = 24

    @property
    def shape(self):
        return (self.count + 1, self.count + 1)

    @property
    def mesh(self):
        t1 = cheb_nodes(*self.t1_range, self.count)
        t2 = cheb_nodes(*self.t2_range, self.count)
        return np.meshgrid(t1, t2, indexing="ij")

    @property
    def diff(self):
        return (cheb_diff(*self.t1_range, self.count), cheb_diff(*self.t2_range, self.count))

    def points(self, s: float = 0.0):
        T1, T2 = self.mesh
        return polar_to_points(np.full(T1.shape, self.r0 + s), T1, T2)


def _metric_dot(A: SeriesField, B: SeriesField, order: int):
    """``<grad_t A, grad_t B>`` for the unit-sphere metric ``dt1^2 + sin^2 t1 dt2^2``."""
    T1, _ = A.patch.mesh
    inv_sin2 = 1.0 / np.sin(T1) ** 2
    return A.dt(0).mul(B.dt(0), order) + A.dt(1).mul(B.dt(1), order).times_t(inv_sin2)


def _sphere_laplacian(A: SeriesField):
    T1, _ = A.patch.mesh
    s1 = np.sin(T1)
    return A.dt(0).times_t(s1).dt(0).times_t(1.0 / s1) + A.dt(1).dt(1).times_t(1.0 / s1 ** 2)


def smooth_step(x):
    """``1`` for ``x <= 1/2``, ``0`` for ``x >= 1``, smooth in between."""
    x = np.asarray(x, dtype=float)
    y = np.clip(2.0 * x - 1.0, 0.0, 1.0)
    out = np.zeros_like(y)
    inner = (y > 0) & (y < 1)
    f = lambda v: np.exp(-1.0 / v)
    out[inner] = f(1 - y[inner]) / (f(1 - y[inner]) + f(y[inner]))
    out[y <= 0] = 1.0
    return out


@dataclass(eq=False)
class EllSeries:
    """``l = a_0 + sum_{j>=1} a_j(t) chi(b_j s / w) s^j`` with ``s = r - r0``."""

    patch: EPatch
    series: SeriesField
    scales: np.ndarray
    collar: float
    pair: PhasePair

    @property
    def order(self) -> int:
        return self.series.order

    def coefficients(self):
        return self.series.coeffs

    def compatibility_defect(self) -> float:
        """``max |(grad_t a_0)^2 + a_1^2|`` with the metric of the sphere of radius r0."""
        a0 = SeriesField(self.series.coeffs[:1], self.patch)
        grad2 = _metric_dot(a0, a0, 0).coeffs[0] / self.patch.r0 ** 2
        return float(np.max(np.abs(grad2 + self.series.coeffs[1] ** 2)))

    def eikonal_series(self) -> SeriesField:
        """``(r0+s)^2 l_s^2 + |grad_t l|^2`` for the uncut series, all orders kept."""
        P = SeriesField.polynomial([self.patch.r0 ** 2, 2 * self.patch.r0, 1.0], self.patch)
        ls = self.series.ds()
        return P.mul(ls.mul(ls)) + _metric_dot(self.series, self.series, 2 * self.order)

    def eikonal_residual(self, s, t1, t2):
        """``|grad l . grad l|`` of the uncut series at points of the collar."""
        s = np.asarray(s, dtype=float)
        return np.abs(self.eikonal_series().evaluate(s, t1, t2)) / (self.patch.r0 + s) ** 2

    def cutoffs(self, s):
        return np.stack([smooth_step(b * np.asarray(s) / self.collar) for b in self.scales])

    def evaluate(self, s, t1, t2):
        """Glued ``l`` at points; only the terms ``j >= 1`` carry cutoffs."""
        s = np.asarray(s, dtype=float)
        p = self.patch
        M1 = bary_matrix(*p.t1_range, p.count, t1)
        M2 = bary_matrix(*p.t2_range, p.count, t2)
        chi = self.cutoffs(s)
        out = np.einsum("pa,ab,pb->p", M1, self.series.coeffs[0], M2).astype(complex)
        for j in range(1, self.order + 1):
            coef = np.einsum("pa,ab,pb->p", M1, self.series.coeffs[j], M2)
            out += coef * chi[j] * s ** j
        return out


def _chebyshev_coefficients(patch: EPatch, values, chop: float = 1e-11):
    """Tensor Chebyshev coefficients of patch values, tiny entries set to zero."""
    V = np.polynomial.chebyshev.chebvander(-np.cos(np.pi * np.arange(patch.count + 1) / patch.count),
                                           patch.count)
    coef = np.linalg.solve(V, np.linalg.solve(V, np.asarray(values, dtype=complex)).T).T
    coef[np.abs(coef) < chop * max(np.max(np.abs(coef)), 1e-300)] = 0.0
    return coef, V


def _denoise(patch: EPatch, values):
    coef, V = _chebyshev_coefficients(patch, values)
    return V @ coef @ V.T


def _c_k_norms(patch: EPatch, values, k: int) -> float:
    """``max_{|alpha| <= k} sup |d^alpha values|`` on the patch grid, from chopped coefficients."""
    cheb = np.polynomial.chebyshev
    coef, V = _chebyshev_coefficients(patch, values)
    s1 = 2.0 / (patch.t1_range[1] - patch.t1_range[0])
    s2 = 2.0 / (patch.t2_range[1] - patch.t2_range[0])
    best = 0.0
    for order in range(k + 1):
        for d1 in range(order + 1):
            c = cheb.chebder(coef, d1, scl=s1, axis=0) if d1 else coef
            c = cheb.chebder(c, order - d1, scl=s2, axis=1) if order - d1 else c
            best = max(best, float(np.max(np.abs(V[:, : c.shape[0]] @ c @ V[:, : c.shape[1]].T))))
    return best


def build_ell(patch: EPatch, pair: PhasePair, order: int = DEFAULT_ORDER, collar: float = 0.2,
              eps0: float = 1e-6) -> EllSeries:
    """Solve the eikonal recursion for ``l`` to order ``order``.

    ``a_0 = (phi + i psi)|_E``, ``a_1 = -d_s (phi + i psi)|_E`` and, for
    ``m >= 1``, ``a_{m+1}`` is read off the ``s^m`` coefficient with pivot
    ``2 r0^2 (m+1) a_1``.
    """
    r0 = patch.r0
    pts = patch.points()
    coeffs = np.zeros((order + 1,) + patch.shape, dtype=complex)
    coeffs[0] = pair.phase(pts)
    xhat = pts / r0
    coeffs[1] = -np.einsum("...j,...j->...", pair.grad(pts), xhat)
    a1 = coeffs[1]
    if np.min(np.abs(a1)) < eps0:
        raise PivotTooSmall(f"|a_1| drops to {np.min(np.abs(a1)):.3e}")
    P = SeriesField.polynomial([r0 ** 2, 2 * r0, 1.0], patch)
    for m in range(1, order):
        current = SeriesField(coeffs[: m + 1].copy(), patch)
        ls = current.ds()
        total = P.mul(ls.mul(ls, m), m) + _metric_dot(current, current, m)
        coeffs[m + 1] = _denoise(patch, -total.coefficient(m) / (2 * r0 ** 2 * (m + 1) * a1))
    running = 1.0
    scales = []
    for j in range(order + 1):
        running = max(running, _c_k_norms(patch, coeffs[j], j))
        scales.append(running)
    return EllSeries(patch, SeriesField(coeffs, patch), np.array(scales), collar, pair)


def _w_series(W, patch: EPatch, collar: float, order: int, samples: int = 24):
    """Taylor coefficients in ``s`` of ``(W_r, W_t1, W_t2)`` by Chebyshev fits on ``[0, collar]``."""
    T1, T2 = patch.mesh
    s_nodes = cheb_nodes(0.0, collar, samples)
    pts = polar_to_points((patch.r0 + s_nodes)[:, None, None] * np.ones(T1.shape), T1[None], T2[None])
    e_r, e_1, e_2 = polar_frame(T1, T2)
    vals = W(pts.reshape(-1, 3)).reshape(pts.shape)
    comps = [np.einsum("sabj,abj->sab", vals, e) for e in (e_r, e_1, e_2)]
    cheb = np.polynomial.chebyshev
    V = cheb.chebvander(2 * s_nodes / collar - 1, samples)
    to_power = np.zeros((samples + 1, samples + 1))
    for k in range(samples + 1):
        poly = cheb.Chebyshev.basis(k, domain=[0, collar]).convert(kind=np.polynomial.Polynomial)
        to_power[k, : len(poly.coef)] = poly.coef
    out = []
    for c in comps:
        cc = np.linalg.solve(V, c.reshape(samples + 1, -1))
        power = to_power.T @ cc
        out.append(SeriesField(power[: order + 1].reshape((order + 1,) + patch.shape).astype(complex), patch))
    return out


@dataclass(eq=False)
class BSeries:
    ell: EllSeries
    series: SeriesField
    W: object

    def transport_series(self) -> SeriesField:
        return _b_transport(self.ell, self.series, self.W, 2 * self.ell.order + self.series.order)

    def transport_residual(self, s, t1, t2):
        """``|2 grad l . grad b + (Delta l + 2i W . grad l) b|`` for the uncut series."""
        s = np.asarray(s, dtype=float)
        return np.abs(self.transport_series().evaluate(s, t1, t2)) / (self.ell.patch.r0 + s) ** 2

    def evaluate(self, s, t1, t2):
        chi = smooth_step(self.ell.scales[-1] * np.asarray(s) / self.ell.collar)
        return self.series.evaluate(s, t1, t2) * chi


def _b_transport(ell: EllSeries, b: SeriesField, W, order: int) -> SeriesField:
    """``(r0+s)^2 [2 grad l . grad b + (Delta l + 2i W . grad l) b]`` as a series."""
    patch = ell.patch
    r0 = patch.r0
    l = ell.series
    P = SeriesField.polynomial([r0 ** 2, 2 * r0, 1.0], patch)
    Q1 = SeriesField.polynomial([r0, 1.0], patch)
    ls = l.ds()
    out = P.mul(ls, order).mul(b.ds(), order).scale(2.0) + _metric_dot(l, b, order).scale(2.0)
    lap = P.mul(ls, order + 1).ds() + _sphere_laplacian(l)
    coupling = lap
    if W is not None and not isinstance(W, ZeroVector):
        wr, w1, w2 = _w_series(W, patch, ell.collar, order)
        T1, _ = patch.mesh
        drift = P.mul(wr, order).mul(ls, order) + Q1.mul(
            w1.mul(l.dt(0), order) + w2.mul(l.dt(1), order).times_t(1.0 / np.sin(T1)), order)
        coupling = coupling + drift.scale(2j)
    return out + coupling.mul(b, order)


def build_b(ell: EllSeries, W, a_on_E, order: int | None = None) -> BSeries:
    """Series ``b`` with ``b|_E = a|_E`` solving the transport equation along ``l``.

    ``a_on_E`` holds values on the patch's Chebyshev mesh.
    """
    order = ell.order if order is None else order
    patch = ell.patch
    r0 = patch.r0
    a1 = ell.series.coeffs[1]
    if np.min(np.abs(a1)) < 1e-12:
        raise PivotTooSmall("a_1 vanishes on E")
    coeffs = np.zeros((order + 1,) + patch.shape, dtype=complex)
    coeffs[0] = np.asarray(a_on_E, dtype=complex).reshape(patch.shape)
    for m in range(order):
        current = SeriesField(coeffs[: m + 1].copy(), patch)
        total = _b_transport(ell, current, W, m)
        coeffs[m + 1] = _denoise(patch, -total.coefficient(m) / (2 * r0 ** 2 * (m + 1) * a1))
    return BSeries(ell, SeriesField(coeffs, patch), W)


# --------------------------------------------------------------------------
# the assembled solution
# --------------------------------------------------------------------------

@dataclass(eq=False)
class CGOGrid:
    grid: SphericalGrid
    omega_mask: np.ndarray        # cells of the domain inside the padded box
    E_nodes: np.ndarray           # boundary nodes on the inner sphere of the domain
    r0: float
    domain: StarDomain


def _aligned_axis(lo: float, hi: float, spacing: float, pad_lo: float, pad_hi: float):
    n = max(int(np.ceil((hi - lo) / spacing - 1e-9)), 2)
    d = (hi - lo) / n
    k_lo = int(np.ceil(pad_lo / d - 1e-9)) if pad_lo > 0 else 0
    k_hi = int(np.ceil(pad_hi / d - 1e-9)) if pad_hi > 0 else 0
    return lo - k_lo * d + d * np.arange(n + k_lo + k_hi + 1)


def cgo_grid(domain: StarDomain, h: float, mode: str = "free", cells_per_h: float = 2.5,
             max_spacing: float = 0.025, pad: float = 0.1) -> CGOGrid:
    """Padded box around the domain with faces aligned to the domain boundary.

    In ``vanish`` mode the inner sphere is not padded, so it is part of the
    box boundary where the remainder vanishes.
    """
    if not domain.log_f.is_constant or domain.inverted or domain.dim_n != 2:
        raise ValueError("CGO solutions are implemented for shell sectors f = const in three dimensions")
    theta = np.array([[np.mean(domain.theta_box[0]), np.mean(domain.theta_box[1])]])
    r0 = float(domain.inner_radius(theta)[0])
    r1 = float(domain.outer_radius(theta)[0])
    spacing = min(h / cells_per_h, max_spacing)
    r_mid = 0.5 * (r0 + r1)
    inner_pad = 0.0 if mode == "vanish" else min(pad, 0.5 * r0)
    r_edges = _aligned_axis(r0, r1, spacing, inner_pad, pad)
    (a1, b1), (a2, b2) = domain.theta_box
    t1_edges = _aligned_axis(a1, b1, spacing / r_mid, pad, pad)
    t2_edges = _aligned_axis(a2, b2, spacing / r_mid, pad, pad)
    grid = SphericalGrid(r_edges, t1_edges, t2_edges)
    p = grid.cell_polar
    tol = 1e-9
    mask = ((p[:, 0] > r0 - tol) & (p[:, 0] < r1 + tol) & (p[:, 1] > a1) & (p[:, 1] < b1)
            & (p[:, 2] > a2) & (p[:, 2] < b2))
    b = grid.boundary
    E = ((b.face == "r_lo") & np.isclose(b.polar[:, 0], r0) & (b.polar[:, 1] > a1) & (b.polar[:, 1] < b1)
         & (b.polar[:, 2] > a2) & (b.polar[:, 2] < b2))
    return CGOGrid(grid, mask, E, r0, domain)


def omega_boundary_trace(setup: CGOGrid, cells, boundary):
    """``(values, areas)`` on the faces of the domain: interior faces average adjacent cells."""
    grid = setup.grid
    mask = setup.omega_mask
    vals, areas = [], []
    for a, c, _, area in grid.edges.values():
        cut = mask[a] != mask[c]
        vals.append(0.5 * (cells[a[cut]] + cells[c[cut]]))
        areas.append(area[cut])
    b = grid.boundary
    on = mask[b.cell]
    vals.append(boundary[on])
    areas.append(b.area[on])
    return np.concatenate(vals), np.concatenate(areas)


def semiclassical_h1(setup: CGOGrid, cells, h: float) -> float:
    """``(||r||^2 + ||h grad r||^2)^{1/2}`` over the domain, gradients from cell differences."""
    grid = setup.grid
    mask = setup.omega_mask
    l2 = np.sum(grid.volumes[mask] * np.abs(cells[mask]) ** 2)
    grad = 0.0
    for a, c, kappa, _ in grid.edges.values():
        both = mask[a] & mask[c]
        grad += np.sum(kappa[both] * np.abs(cells[a[both]] - cells[c[both]]) ** 2)
    return float(np.sqrt(l2 + h ** 2 * grad))


@dataclass(eq=False)
class CGOSolution:
    h: float
    mode: str
    setup: CGOGrid
    pair: PhasePair
    amplitude: Amplitude
    remainder: np.ndarray          # r on all nodes (cells, then boundary)
    correction: np.ndarray | None  # exp((l - f)/h) b on all nodes
    ell: EllSeries | None
    b: BSeries | None
    norms: dict
    regularized: bool = False

    @property
    def grid(self):
        return self.setup.grid

    def phase(self):
        return self.pair.phase(polar_to_points(*grid_nodes(self.grid).T))

    def u(self):
        """``exp(f/h) (a + r - exp((l - f)/h) b)`` on all nodes."""
        amp = self.amplitude.a + self.remainder
        if self.correction is not None:
            amp = amp - self.correction
        return np.exp(self.phase() / self.h) * amp

    def u_cells(self):
        return self.u()[: self.grid.size]

    def u_boundary(self):
        return self.u()[self.grid.size:]


def _conjugated_operator(grid, pair, W, q, h):
    pts = grid.cell_points
    grad_f = pair.grad(pts)
    drift = -2.0 * h * grad_f
    shift = -2.0 * h * (0.5 * pair.laplacian(pts))
    if W is not None and not isinstance(W, ZeroVector):
        shift = shift - 2.0j * h * np.einsum("ij,ij->i", W(pts), grad_f)
    return assemble(grid, W, q, scale=h ** 2, drift=drift, shift=shift)


def cgo_solution(domain: StarDomain, W=None, q=None, omega=CHART_AXIS, h: float = 0.1,
                 mode: str = "free", weight_sign: int = 1, order: int = DEFAULT_ORDER,
                 setup: CGOGrid | None = None, collar: float | None = None) -> CGOSolution:
    """Build a CGO solution for ``L_{W,q}`` on ``domain`` at semiclassical scale ``h``.

    ``mode='vanish'`` adds the series correction so that ``u = 0`` on the
    inner sphere of the domain (weight ``+log r`` only).
    """
    if mode not in ("free", "vanish"):
        raise ValueError("mode must be 'free' or 'vanish'")
    if mode == "vanish" and weight_sign < 0:
        raise ValueError("the vanishing correction is built for the weight +log r")
    W = None if isinstance(W, ZeroVector) else W
    pair = eikonal_pair(domain, omega, weight_sign)
    setup = setup or cgo_grid(domain, h, mode)
    grid = setup.grid
    N = grid.size
    amp = transport_amplitude(grid, W, pair, "plus" if weight_sign > 0 else "minus")
    a_all = amp.a

    # residual of the amplitude in the conjugated frame: -2h T(a) + h^2 L a
    plain = assemble(grid, W, q, reference=False)
    lap_a = plain.apply(a_all[:N], a_all[N:])
    defect = amp.dbar_defect()
    if weight_sign < 0:
        defect = np.conj(defect)
    transport = a_all[:N] * 2.0 * defect / _slice_z(grid.cell_polar)
    if weight_sign < 0:
        transport = a_all[:N] * 2.0 * defect / (-np.conj(_slice_z(grid.cell_polar)))
    v_hat = -2.0 * h * transport + h ** 2 * lap_a

    Q = _conjugated_operator(grid, pair, W, q, h)
    rhs = -v_hat
    correction = None
    ell = bser = None
    if mode == "vanish":
        (a1, b1), (a2, b2) = (grid.t1_edges[[0, -1]], grid.t2_edges[[0, -1]])
        patch = EPatch(setup.r0, (a1, b1), (a2, b2))
        collar = collar or min(0.25, 0.5 * (grid.r_edges[-1] - setup.r0))
        ell = build_ell(patch, pair, order, collar)
        T1, T2 = patch.mesh
        a_on_E = _amplitude_at(amp, patch.r0 * np.ones(T1.size), T1.ravel(), T2.ravel(), W)
        bser = build_b(ell, W, a_on_E, order)
        nodes = grid_nodes(grid)
        s = nodes[:, 0] - setup.r0
        l_vals = ell.evaluate(s, nodes[:, 1], nodes[:, 2])
        f_vals = pair.phase(polar_to_points(*nodes.T))
        b_vals = bser.evaluate(s, nodes[:, 1], nodes[:, 2])
        correction = np.exp((l_vals - f_vals) / h) * b_vals
        correction[np.abs(b_vals) == 0] = 0.0
        rhs = rhs + Q.apply(correction[:N], correction[N:])

    b_nodes = grid.boundary
    free = ~np.isin(b_nodes.face, ("t2_lo", "t2_hi"))
    if mode == "vanish":
        free &= b_nodes.face != "r_lo"
    try:
        r_cells, r_bnd = MinimumNormSolver(Q, free).solve(rhs)
    except ZeroEigenvalue as exc:
        raise CorrectionSolveFailed(f"conjugated system failed at h={h}: {exc}") from exc
    remainder = np.concatenate([r_cells, r_bnd])
    regularized = False

    vol = grid.volumes
    mask = setup.omega_mask
    vals, areas = omega_boundary_trace(setup, r_cells, remainder[N:])
    norms = {
        "interior_residual": float(np.sqrt(np.sum(vol[mask] * np.abs(v_hat[mask]) ** 2))),
        "r_H1": semiclassical_h1(setup, r_cells, h),
        "r_L2": float(np.sqrt(np.sum(vol[mask] * np.abs(r_cells[mask]) ** 2))),
        "r_bdry": float(np.sqrt(np.sum(areas * np.abs(vals) ** 2))),
        "transport_residual": amp.transport_residual(mask),
    }
    sol = CGOSolution(h, mode, setup, pair, amp, remainder, correction, ell, bser, norms, regularized)
    u = sol.u()
    u_norm = float(np.sqrt(np.sum(vol[mask] * np.abs(u[:N][mask]) ** 2)))
    E = setup.E_nodes
    uE = float(np.sqrt(np.sum(grid.boundary.area[E] * np.abs(u[N:][E]) ** 2)))
    norms["u_L2"] = u_norm
    norms["uE_norm"] = uE / u_norm if mode == "vanish" else float("nan")
    return sol


def _amplitude_at(amp: Amplitude, r, t1, t2, W):
    """Amplitude at arbitrary points of the slice box (used for ``a`` on E)."""
    polar = np.stack([r, t1, t2], axis=-1)
    z = _slice_z(polar)
    core = amp.transform.pompeiu(z)
    if W is not None and not isinstance(W, ZeroVector):
        grid = amp.grid
        rc, t1c, _ = grid.centers
        R, T = np.meshgrid(rc, t1c, indexing="ij")
        K = amp.transform.kernel(z)
        sign = 1.0 if amp.mode == "plus" else -1.0
        extra = np.empty(len(z), dtype=complex)
        for k in range(len(z)):
            src = np.stack([R.ravel(), T.ravel(), np.full(R.size, t2[k])], axis=-1)
            extra[k] = K[k] @ _magnetic_source(W, src)
        core = core + sign * extra
    if amp.log_gamma is not None:
        core = core + amp.log_gamma(z)
    return np.exp(core if amp.mode == "plus" else np.conj(core))
