"""Cell-centred finite volumes for magnetic Schrodinger operators on spherical boxes.

Cells are coordinate boxes in ``(r, t1, t2)`` with ``x = (r cos t1, r sin t1 cos t2,
r sin t1 sin t2)``.  Unknowns sit at cell centres; Dirichlet data sits at the
centres of boundary faces.  The magnetic potential enters through edge phases
``exp(i * int W.dl)`` along the chord joining two nodes, which keeps the
discrete operator exactly covariant under ``W -> W + grad Psi``.

A grid whose first radial edge is 0 and whose polar range is ``[0, pi]`` with a
periodic last angle is a full ball; degenerate faces then carry zero area and
no boundary nodes.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as sla

from .errors import ZeroEigenvalue

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(3)
DIRECT_LIMIT = 16000


def polar_frame(t1, t2):
    """Unit vectors ``(e_r, e_t1, e_t2)`` stacked on the last axis."""
    t1 = np.asarray(t1, dtype=float)
    t2 = np.asarray(t2, dtype=float)
    c1, s1, c2, s2 = np.cos(t1), np.sin(t1), np.cos(t2), np.sin(t2)
    e_r = np.stack([c1, s1 * c2, s1 * s2], axis=-1)
    e_1 = np.stack([-s1, c1 * c2, c1 * s2], axis=-1)
    e_2 = np.stack([np.zeros_like(t2 * c1), -s2 + 0 * c1, c2 + 0 * c1], axis=-1)
    return e_r, e_1, e_2


def polar_to_points(r, t1, t2):
    e_r, _, _ = polar_frame(t1, t2)
    return np.asarray(r, dtype=float)[..., None] * e_r


def chord_integral(W, start, stop):
    """Three-point Gauss-Legendre value of ``int W . dl`` along straight chords."""
    start = np.asarray(start, dtype=float)
    stop = np.asarray(stop, dtype=float)
    if W is None or len(start) == 0:
        return np.zeros(len(start))
    if hasattr(W, "line_integral"):
        return W.line_integral(start, stop)
    d = stop - start
    total = np.zeros(len(start))
    for s, w in zip(_GL_NODES, _GL_WEIGHTS):
        pts = start + 0.5 * (s + 1.0) * d
        total += 0.5 * w * np.einsum("ij,ij->i", W(pts), d)
    return total


@dataclass(frozen=True)
class BoundaryNodes:
    polar: np.ndarray      # (Nb, 3) r, t1, t2
    points: np.ndarray     # (Nb, 3)
    normal: np.ndarray     # outward unit normals
    area: np.ndarray
    cell: np.ndarray       # adjacent cell
    second: np.ndarray     # next cell along the inward normal
    d1: np.ndarray         # metric distance node -> cell
    d2: np.ndarray         # metric distance node -> second cell
    kappa: np.ndarray      # area / d1
    face: np.ndarray       # face label


FACE_ORDER = ("r_lo", "r_hi", "t1_lo", "t1_hi", "t2_lo", "t2_hi")


@dataclass(frozen=True, eq=False)
class SphericalGrid:
    r_edges: np.ndarray
    t1_edges: np.ndarray
    t2_edges: np.ndarray
    periodic: bool = False

    def __post_init__(self):
        for name in ("r_edges", "t1_edges", "t2_edges"):
            edges = np.asarray(getattr(self, name), dtype=float)
            if edges.ndim != 1 or len(edges) < 3 or np.any(np.diff(edges) <= 0):
                raise ValueError(f"{name} must be increasing with at least two cells")
            object.__setattr__(self, name, edges)
        if self.periodic and not np.isclose(self.t2_edges[-1] - self.t2_edges[0], 2 * np.pi):
            raise ValueError("a periodic last angle must span 2 pi")

    @property
    def shape(self) -> tuple:
        return (len(self.r_edges) - 1, len(self.t1_edges) - 1, len(self.t2_edges) - 1)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @cached_property
    def centers(self):
        mid = lambda e: 0.5 * (e[1:] + e[:-1])
        return mid(self.r_edges), mid(self.t1_edges), mid(self.t2_edges)

    @cached_property
    def cell_polar(self) -> np.ndarray:
        r, t1, t2 = np.meshgrid(*self.centers, indexing="ij")
        return np.stack([r.ravel(), t1.ravel(), t2.ravel()], axis=-1)

    @cached_property
    def cell_points(self) -> np.ndarray:
        p = self.cell_polar
        return polar_to_points(p[:, 0], p[:, 1], p[:, 2])

    @cached_property
    def volumes(self) -> np.ndarray:
        re, t1e, t2e = self.r_edges, self.t1_edges, self.t2_edges
        vr = (re[1:] ** 3 - re[:-1] ** 3) / 3.0
        v1 = np.cos(t1e[:-1]) - np.cos(t1e[1:])
        v2 = np.diff(t2e)
        return (vr[:, None, None] * v1[None, :, None] * v2[None, None, :]).ravel()

    def index(self, i, j, k):
        n_r, n1, n2 = self.shape
        return (np.asarray(i) * n1 + np.asarray(j)) * n2 + np.asarray(k)

    @cached_property
    def uniform_t2(self) -> bool:
        d = np.diff(self.t2_edges)
        return bool(np.allclose(d, d[0]))

    # -- cell-to-cell connections ------------------------------------------
    @cached_property
    def edges(self):
        """``{direction: (a, b, kappa, area)}`` with ``b`` the neighbour of ``a`` in +direction."""
        n_r, n1, n2 = self.shape
        rc, t1c, t2c = self.centers
        re, t1e, t2e = self.r_edges, self.t1_edges, self.t2_edges
        I, J, K = np.meshgrid(np.arange(n_r), np.arange(n1), np.arange(n2), indexing="ij")
        out = {}

        sel = I[:-1]
        i, j, k = sel, J[:-1], K[:-1]
        area = re[i + 1] ** 2 * (np.cos(t1e[j]) - np.cos(t1e[j + 1])) * (t2e[k + 1] - t2e[k])
        kappa = area / (rc[i + 1] - rc[i])
        out["r"] = (self.index(i, j, k).ravel(), self.index(i + 1, j, k).ravel(), kappa.ravel(), area.ravel())

        i, j, k = I[:, :-1], J[:, :-1], K[:, :-1]
        area = 0.5 * (re[i + 1] ** 2 - re[i] ** 2) * np.sin(t1e[j + 1]) * (t2e[k + 1] - t2e[k])
        kappa = area / (rc[i] * (t1c[j + 1] - t1c[j]))
        out["t1"] = (self.index(i, j, k).ravel(), self.index(i, j + 1, k).ravel(), kappa.ravel(), area.ravel())

        if self.periodic:
            i, j, k = I, J, K
            k_next = (k + 1) % n2
            gap = np.where(k_next == 0, t2c[0] + 2 * np.pi - t2c[-1], t2c[k_next] - t2c[k])
        else:
            i, j, k = I[:, :, :-1], J[:, :, :-1], K[:, :, :-1]
            k_next = k + 1
            gap = t2c[k_next] - t2c[k]
        area = 0.5 * (re[i + 1] ** 2 - re[i] ** 2) * (t1e[j + 1] - t1e[j])
        kappa = area / (rc[i] * np.sin(t1c[j]) * gap)
        out["t2"] = (self.index(i, j, k).ravel(), self.index(i, j, k_next).ravel(), kappa.ravel(), area.ravel())
        return out

    # -- boundary faces ------------------------------------------------------
    def _has_face(self, face: str) -> bool:
        if face == "r_lo":
            return self.r_edges[0] > 0
        if face == "t1_lo":
            return np.sin(self.t1_edges[0]) > 1e-12
        if face == "t1_hi":
            return np.sin(self.t1_edges[-1]) > 1e-12
        if face in ("t2_lo", "t2_hi"):
            return not self.periodic
        return True

    @cached_property
    def boundary(self) -> BoundaryNodes:
        n_r, n1, n2 = self.shape
        rc, t1c, t2c = self.centers
        re, t1e, t2e = self.r_edges, self.t1_edges, self.t2_edges
        parts = []
        for face in FACE_ORDER:
            if not self._has_face(face):
                continue
            axis, side = face.split("_")
            if axis == "r":
                j, k = np.meshgrid(np.arange(n1), np.arange(n2), indexing="ij")
                i = np.full_like(j, 0 if side == "lo" else n_r - 1)
                i2 = i + (1 if side == "lo" else -1)
                rb = re[0] if side == "lo" else re[-1]
                polar = np.stack([np.full(j.shape, rb), t1c[j], t2c[k]], -1)
                area = rb ** 2 * (np.cos(t1e[j]) - np.cos(t1e[j + 1])) * (t2e[k + 1] - t2e[k])
                d1 = np.abs(rc[i] - rb)
                d2 = np.abs(rc[i2] - rb)
                cell, second = self.index(i, j, k), self.index(i2, j, k)
                e_r, _, _ = polar_frame(polar[..., 1], polar[..., 2])
                normal = e_r if side == "hi" else -e_r
            elif axis == "t1":
                i, k = np.meshgrid(np.arange(n_r), np.arange(n2), indexing="ij")
                j = np.full_like(i, 0 if side == "lo" else n1 - 1)
                j2 = j + (1 if side == "lo" else -1)
                tb = t1e[0] if side == "lo" else t1e[-1]
                polar = np.stack([rc[i], np.full(i.shape, tb), t2c[k]], -1)
                area = 0.5 * (re[i + 1] ** 2 - re[i] ** 2) * np.sin(tb) * (t2e[k + 1] - t2e[k])
                d1 = rc[i] * np.abs(t1c[j] - tb)
                d2 = rc[i] * np.abs(t1c[j2] - tb)
                cell, second = self.index(i, j, k), self.index(i, j2, k)
                _, e_1, _ = polar_frame(polar[..., 1], polar[..., 2])
                normal = e_1 if side == "hi" else -e_1
            else:
                i, j = np.meshgrid(np.arange(n_r), np.arange(n1), indexing="ij")
                k = np.full_like(i, 0 if side == "lo" else n2 - 1)
                k2 = k + (1 if side == "lo" else -1)
                tb = t2e[0] if side == "lo" else t2e[-1]
                polar = np.stack([rc[i], t1c[j], np.full(i.shape, tb)], -1)
                area = 0.5 * (re[i + 1] ** 2 - re[i] ** 2) * (t1e[j + 1] - t1e[j])
                d1 = rc[i] * np.sin(t1c[j]) * np.abs(t2c[k] - tb)
                d2 = rc[i] * np.sin(t1c[j]) * np.abs(t2c[k2] - tb)
                cell, second = self.index(i, j, k), self.index(i, j, k2)
                _, _, e_2 = polar_frame(polar[..., 1], polar[..., 2])
                normal = e_2 if side == "hi" else -e_2
            m = polar.shape[0] * polar.shape[1]
            parts.append(dict(polar=polar.reshape(m, 3), normal=normal.reshape(m, 3),
                              area=area.ravel(), cell=cell.ravel(), second=second.ravel(),
                              d1=d1.ravel(), d2=d2.ravel(), face=np.full(m, face)))
        cat = {key: np.concatenate([p[key] for p in parts]) for key in parts[0]}
        pts = polar_to_points(cat["polar"][:, 0], cat["polar"][:, 1], cat["polar"][:, 2])
        return BoundaryNodes(polar=cat["polar"], points=pts, normal=cat["normal"], area=cat["area"],
                             cell=cat["cell"], second=cat["second"], d1=cat["d1"], d2=cat["d2"],
                             kappa=cat["area"] / cat["d1"], face=cat["face"])

    def face_mask(self, *faces) -> np.ndarray:
        return np.isin(self.boundary.face, faces)

    def cell_mask(self, r_range=None, t1_range=None, t2_range=None) -> np.ndarray:
        p = self.cell_polar
        mask = np.ones(self.size, dtype=bool)
        for col, rng in enumerate((r_range, t1_range, t2_range)):
            if rng is not None:
                mask &= (p[:, col] > rng[0]) & (p[:, col] < rng[1])
        return mask


def sector_grid(r_range, t1_range, t2_range, shape) -> SphericalGrid:
    n_r, n1, n2 = shape
    return SphericalGrid(np.linspace(*r_range, n_r + 1), np.linspace(*t1_range, n1 + 1),
                         np.linspace(*t2_range, n2 + 1))


def ball_grid(radius: float, n: int = 48, n_azimuth: int | None = None) -> SphericalGrid:
    return SphericalGrid(np.linspace(0.0, radius, n + 1), np.linspace(0.0, np.pi, n + 1),
                         np.linspace(0.0, 2 * np.pi, (n_azimuth or n) + 1), periodic=True)


# --------------------------------------------------------------------------
# operators
# --------------------------------------------------------------------------

def _sample(fn, points, shape_tail=()):
    if fn is None:
        return None
    if callable(fn):
        return np.asarray(fn(points))
    arr = np.asarray(fn)
    if arr.shape[: 1] != points.shape[:1]:
        raise ValueError(f"samples of shape {arr.shape} do not match {points.shape[0]} nodes")
    return arr


@dataclass(eq=False)
class FVOperator:
    """``(Op u)_c = cc @ u_cells + cb @ u_boundary`` on every cell ``c``.

    ``cc = cc_rt + cc_t2`` keeps the couplings along the last angle apart so a
    separable solver can be built when the coefficients do not depend on it.
    """

    grid: SphericalGrid
    cc_rt: sp.csr_matrix
    cc_t2: sp.csr_matrix
    cb: sp.csr_matrix
    scale: float
    W: object
    boundary_phase1: np.ndarray
    boundary_phase2: np.ndarray
    separable: bool
    reference: "FVOperator | None" = None
    t2_weight: np.ndarray | None = None

    @cached_property
    def cc(self) -> sp.csc_matrix:
        return (self.cc_rt + self.cc_t2).tocsc()

    def apply(self, cells, boundary):
        return self.cc @ cells + self.cb @ boundary

    def residual(self, cells, boundary, rhs=None):
        res = self.apply(cells, boundary)
        return res if rhs is None else res - rhs

    def variational_flux(self, cells, boundary):
        """Total flux through each boundary face, ``~ area * (d_nu + i W.nu) u``.

        Together with the cell equations this satisfies a discrete Green
        identity exactly.
        """
        b = self.grid.boundary
        return self.scale * b.kappa * (boundary - self.boundary_phase1 * cells[b.cell])

    def one_sided_flux(self, cells, boundary):
        """Second-order one-sided ``(d_nu + i W.nu) u`` per unit area."""
        b = self.grid.boundary
        d1, d2 = b.d1, b.d2
        c0 = 1.0 / d1 + 1.0 / d2
        c1 = d2 / (d1 * (d2 - d1))
        c2 = d1 / (d2 * (d2 - d1))
        u1 = self.boundary_phase1 * cells[b.cell]
        u2 = self.boundary_phase2 * cells[b.second]
        return c0 * boundary - c1 * u1 + c2 * u2


def _derivative_stencils(grid: SphericalGrid):
    """Central three-point weights per direction: neighbours may be cells or boundary nodes.

    Returns for each direction a tuple ``(minus, plus)`` of ``(kind, index, dist)``
    arrays in coordinate units; ``kind`` is 0 for cells, 1 for boundary nodes.
    """
    n_r, n1, n2 = grid.shape
    N = grid.size
    b = grid.boundary
    rc, t1c, t2c = grid.centers
    coord_c = (rc, t1c, t2c)
    edges_coord = (grid.r_edges, grid.t1_edges, grid.t2_edges)
    out = {}
    idx3 = np.stack(np.unravel_index(np.arange(N), grid.shape), axis=-1)
    for axis, name in enumerate(("r", "t1", "t2")):
        n_axis = grid.shape[axis]
        pos = idx3[:, axis]
        result = []
        for step, face in ((-1, f"{name}_lo"), (1, f"{name}_hi")):
            kind = np.zeros(N, dtype=int)
            index = np.full(N, -1)
            dist = np.zeros(N)
            nb = pos + step
            inside = (nb >= 0) & (nb < n_axis)
            nidx = idx3.copy()
            nidx[:, axis] = np.clip(nb, 0, n_axis - 1)
            flat = grid.index(nidx[:, 0], nidx[:, 1], nidx[:, 2])
            index[inside] = flat[inside]
            c = coord_c[axis]
            dist[inside] = np.abs(c[nb[inside]] - c[pos[inside]])
            if axis == 2 and grid.periodic:
                wrap = ~inside
                nidx[:, axis] = nb % n_axis
                flat = grid.index(nidx[:, 0], nidx[:, 1], nidx[:, 2])
                index[wrap] = flat[wrap]
                dist[wrap] = np.abs(c[1] - c[0])
            elif np.any(b.face == face):
                sel = np.flatnonzero(b.face == face)
                cells = b.cell[sel]
                kind[cells] = 1
                index[cells] = sel
                end = edges_coord[axis][0] if step < 0 else edges_coord[axis][-1]
                dist[cells] = np.abs(c[pos[cells]] - end)
            result.append((kind, index, dist))
        out[name] = tuple(result)
    return out


def assemble(grid: SphericalGrid, W=None, q=None, *, scale: float = 1.0, drift=None,
             shift=None, reference: bool = True) -> FVOperator:
    """Discretize ``scale * L_{W,q} + drift . grad + shift``.

    ``W`` is a Cartesian vector callable, ``q`` a callable or cell samples,
    ``drift`` Cartesian vector samples on cells (may be complex), ``shift``
    cell samples.  ``L_{W,q} = (D + W)^2 + q`` with ``D = -i grad``.
    """
    N = grid.size
    vol = grid.volumes
    pts = grid.cell_points
    b = grid.boundary
    Nb = len(b.area)

    rows_rt, cols_rt, vals_rt = [], [], []
    rows_t2, cols_t2, vals_t2 = [], [], []
    diag_rt = np.zeros(N, dtype=complex)
    diag_t2 = np.zeros(N, dtype=complex)
    for name, (a, c, kappa, _) in grid.edges.items():
        phase = np.exp(1j * chord_integral(W, pts[a], pts[c]))
        rows = [a, c]
        cols = [c, a]
        vals = [-kappa * phase, -kappa * np.conj(phase)]
        if name == "t2":
            rows_t2 += rows; cols_t2 += cols; vals_t2 += vals
            np.add.at(diag_t2, a, kappa); np.add.at(diag_t2, c, kappa)
        else:
            rows_rt += rows; cols_rt += cols; vals_rt += vals
            np.add.at(diag_rt, a, kappa); np.add.at(diag_rt, c, kappa)

    phase1 = np.exp(1j * chord_integral(W, b.points, pts[b.cell]))
    phase2 = phase1 * np.exp(1j * chord_integral(W, pts[b.cell], pts[b.second]))
    t2_face = np.isin(b.face, ("t2_lo", "t2_hi"))
    np.add.at(diag_t2, b.cell[t2_face], b.kappa[t2_face])
    np.add.at(diag_rt, b.cell[~t2_face], b.kappa[~t2_face])

    q_cells = _sample(q, pts)
    if q_cells is not None:
        diag_rt = diag_rt + vol * np.broadcast_to(q_cells, (N,))

    inv_v = scale / vol
    cc_rt = sp.coo_matrix((np.concatenate(vals_rt) if vals_rt else [],
                           (np.concatenate(rows_rt) if rows_rt else [], np.concatenate(cols_rt) if cols_rt else [])),
                          shape=(N, N)).tocsr()
    cc_rt = sp.diags(inv_v) @ (cc_rt + sp.diags(diag_rt))
    cc_t2 = sp.coo_matrix((np.concatenate(vals_t2) if vals_t2 else [],
                           (np.concatenate(rows_t2) if rows_t2 else [], np.concatenate(cols_t2) if cols_t2 else [])),
                          shape=(N, N)).tocsr()
    cc_t2 = sp.diags(inv_v) @ (cc_t2 + sp.diags(diag_t2))
    cb = sp.coo_matrix((-b.kappa * np.conj(phase1) * inv_v[b.cell], (b.cell, np.arange(Nb))),
                       shape=(N, Nb)).tocsr()

    extra_rt, extra_t2, extra_cb = _first_order(grid, drift)
    if extra_rt is not None:
        cc_rt = cc_rt + extra_rt
        cc_t2 = cc_t2 + extra_t2
        cb = cb + extra_cb
    if shift is not None:
        cc_rt = cc_rt + sp.diags(np.broadcast_to(np.asarray(shift, dtype=complex), (N,)))

    q_separable = q_cells is None or np.allclose(
        np.broadcast_to(q_cells, (N,)).reshape(grid.shape),
        np.broadcast_to(q_cells, (N,)).reshape(grid.shape)[:, :, :1])
    drift_separable = drift is None or np.allclose(_contravariant(grid, drift)[2], 0.0)
    shift_separable = shift is None or np.allclose(
        np.broadcast_to(shift, (N,)).reshape(grid.shape),
        np.broadcast_to(shift, (N,)).reshape(grid.shape)[:, :, :1])
    separable = W is None and q_separable and drift_separable and shift_separable and grid.uniform_t2

    op = FVOperator(grid, cc_rt.tocsr(), cc_t2.tocsr(), cb.tocsr(), scale, W, phase1, phase2, separable)
    n_r, n1, n2 = grid.shape
    rc, t1c, _ = grid.centers
    dt2 = grid.t2_edges[1] - grid.t2_edges[0]
    area = 0.5 * (grid.r_edges[1:] ** 2 - grid.r_edges[:-1] ** 2)[:, None] * np.diff(grid.t1_edges)[None, :]
    kappa = area / (rc[:, None] * np.sin(t1c)[None, :] * dt2)
    vol2 = vol.reshape(grid.shape)[:, :, 0]
    op.t2_weight = (scale * kappa / vol2).ravel()
    if separable:
        op.reference = op
    elif reference:
        def layer_mean(values):
            if values is None:
                return None
            arr = np.broadcast_to(np.asarray(values), (N,)).reshape(grid.shape)
            return np.repeat(arr.mean(axis=2, keepdims=True), n2, axis=2).ravel()
        ref_drift = None
        if drift is not None:
            comps = _contravariant(grid, drift)
            e_r, e_1, _ = polar_frame(grid.cell_polar[:, 1], grid.cell_polar[:, 2])
            r = grid.cell_polar[:, 0]
            mr, m1 = layer_mean(comps[0]), layer_mean(comps[1])
            ref_drift = mr[:, None] * e_r + (m1 * r)[:, None] * e_1
        ref = assemble(grid, None, layer_mean(q_cells), scale=scale, drift=ref_drift,
                       shift=layer_mean(shift), reference=False)
        if grid.uniform_t2 and ref.separable:
            op.reference = ref
    return op


def _contravariant(grid: SphericalGrid, drift):
    drift = np.asarray(drift)
    p = grid.cell_polar
    e_r, e_1, e_2 = polar_frame(p[:, 1], p[:, 2])
    r, s1 = p[:, 0], np.sin(p[:, 1])
    return (np.einsum("ij,ij->i", drift, e_r),
            np.einsum("ij,ij->i", drift, e_1) / r,
            np.einsum("ij,ij->i", drift, e_2) / (r * s1))


def _first_order(grid: SphericalGrid, drift):
    if drift is None:
        return None, None, None
    N = grid.size
    Nb = len(grid.boundary.area)
    comps = _contravariant(grid, drift)
    stencils = _derivative_stencils(grid)
    mats = {"rt": [[], [], []], "t2": [[], [], []], "cb": [[], [], []]}
    cells = np.arange(N)
    for comp, name in zip(comps, ("r", "t1", "t2")):
        (km, im, hm), (kp, ip, hp) = stencils[name]
        if np.any(im < 0) or np.any(ip < 0):
            raise ValueError("first-order terms need neighbours on both sides of every cell")
        wm = -hp / (hm * (hm + hp))
        w0 = (hp - hm) / (hm * hp)
        wp = hm / (hp * (hm + hp))
        key = "t2" if name == "t2" else "rt"
        mats[key][0].append(cells); mats[key][1].append(cells); mats[key][2].append(comp * w0)
        for kind, idx, w in ((km, im, wm), (kp, ip, wp)):
            c = kind == 0
            mats[key][0].append(cells[c]); mats[key][1].append(idx[c]); mats[key][2].append((comp * w)[c])
            c = kind == 1
            mats["cb"][0].append(cells[c]); mats["cb"][1].append(idx[c]); mats["cb"][2].append((comp * w)[c])

    def build(key, shape):
        rows, cols, vals = mats[key]
        if not rows:
            return sp.csr_matrix(shape, dtype=complex)
        return sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=shape).tocsr()

    return build("rt", (N, N)), build("t2", (N, N)), build("cb", (N, Nb))


# --------------------------------------------------------------------------
# solvers
# --------------------------------------------------------------------------

class SeparableSolver:
    """Exact inverse of an operator whose coefficients do not depend on ``t2``.

    The ``t2`` couplings form ``diag(weight) (x) T``; diagonalizing the small
    matrix ``T`` leaves one sparse ``(r, t1)`` problem per mode.
    """

    def __init__(self, op: FVOperator):
        grid = op.grid
        n_r, n1, n2 = grid.shape
        layer = grid.index(*np.meshgrid(np.arange(n_r), np.arange(n1), [0], indexing="ij")).ravel()
        a2 = op.cc_rt[layer][:, layer].tocsc()
        T = np.zeros((n2, n2))
        idx = np.arange(n2)
        T[idx, idx] = 2.0
        T[idx[:-1], idx[1:]] = -1.0
        T[idx[1:], idx[:-1]] = -1.0
        if grid.periodic:
            T[0, -1] = T[-1, 0] = -1.0
        else:
            T[0, 0] = T[-1, -1] = 3.0
        lam, Q = np.linalg.eigh(T)
        self.Q = Q
        self.shape = (n_r * n1, n2)
        weight = sp.diags(op.t2_weight)
        self.factors = []
        for value in lam:
            mat = (a2 + value * weight).tocsc()
            try:
                self.factors.append(sla.splu(mat, permc_spec="MMD_AT_PLUS_A"))
            except RuntimeError as exc:
                raise ZeroEigenvalue(f"singular mode matrix: {exc}") from exc

    def solve(self, rhs):
        rhs = np.asarray(rhs)
        many = rhs.ndim == 2
        cols = rhs if many else rhs[:, None]
        out = np.empty(cols.shape, dtype=complex)
        for c in range(cols.shape[1]):
            B = cols[:, c].reshape(self.shape) @ self.Q
            X = np.empty(B.shape, dtype=complex)
            for m, lu in enumerate(self.factors):
                X[:, m] = lu.solve(np.ascontiguousarray(B[:, m]))
            out[:, c] = (X @ self.Q.T).ravel()
        return out if many else out[:, 0]


class DirichletSolver:
    """Solves ``Op u = rhs`` on cells given boundary values.

    Small systems use a sparse LU; larger separable ones the exact separable
    inverse; the rest GMRES preconditioned by the separable part.
    """

    def __init__(self, op: FVOperator, rtol: float = 1e-12, direct_limit: int = DIRECT_LIMIT):
        self.op = op
        self.rtol = rtol
        self.lu = None
        self.separable = None
        self.iterations = []
        if op.grid.size <= direct_limit or op.reference is None:
            try:
                self.lu = sla.splu(op.cc, permc_spec="MMD_AT_PLUS_A")
            except RuntimeError as exc:
                raise ZeroEigenvalue(f"singular Dirichlet system: {exc}") from exc
        else:
            self.separable = SeparableSolver(op.reference)

    def solve_cells(self, rhs):
        rhs = np.asarray(rhs, dtype=complex)
        if self.lu is not None:
            out = self.lu.solve(rhs)
        elif self.op.separable:
            out = self.separable.solve(rhs)
        else:
            out = self._gmres(rhs)
        if not np.all(np.isfinite(out)):
            raise ZeroEigenvalue("non-finite solution: the discrete operator is singular")
        return out

    def _gmres(self, rhs):
        cols = rhs if rhs.ndim == 2 else rhs[:, None]
        N = self.op.grid.size
        prec = sla.LinearOperator((N, N), matvec=self.separable.solve, dtype=complex)
        out = np.empty(cols.shape, dtype=complex)
        for c in range(cols.shape[1]):
            count = [0]
            def tick(_):
                count[0] += 1
            x0 = self.separable.solve(cols[:, c])
            x, info = sla.gmres(self.op.cc, cols[:, c], x0=x0, M=prec, rtol=self.rtol, atol=0.0,
                                restart=60, maxiter=400, callback=tick, callback_type="pr_norm")
            if info != 0:
                raise ZeroEigenvalue(f"GMRES did not converge (info={info})")
            self.iterations.append(count[0])
            out[:, c] = x
        return out if rhs.ndim == 2 else out[:, 0]

    def solve(self, boundary, rhs=None):
        """Cell values with ``Op u = rhs`` and ``u = boundary`` on boundary nodes."""
        boundary = np.asarray(boundary, dtype=complex)
        source = -(self.op.cb @ boundary)
        if rhs is not None:
            source = source + (rhs if source.ndim == 1 else rhs)
        return self.solve_cells(source)


class MinimumNormSolver:
    """Smallest weighted-L2 solution of ``Op x = rhs`` with free boundary values.

    Unknowns are the cell values and the boundary values on ``free`` nodes;
    the rest of the boundary is pinned to zero.  With cell weights ``V`` and
    node weights ``w`` the solution is ``x = M^{-1} A^* y`` where
    ``A M^{-1} A^* y = rhs`` and ``A = [cc, cb_free]``.  When the operator is
    separable in ``t2`` and no ``t2``-face node is free, each ``t2`` mode is an
    independent sparse problem; otherwise conjugate gradients run with that
    separable inverse as preconditioner.
    """

    def __init__(self, op: FVOperator, free, rtol: float = 1e-10):
        grid = op.grid
        b = grid.boundary
        self.op = op
        self.rtol = rtol
        self.free = np.asarray(free, dtype=bool)
        self.cell_weight = grid.volumes
        self.node_weight = b.area * b.d1
        self.cb_free = op.cb[:, np.flatnonzero(self.free)].tocsr()
        self.iterations = []
        t2_free = np.any(self.free & np.isin(b.face, ("t2_lo", "t2_hi")))
        ref = op.reference
        self.modes = None
        if ref is not None and not t2_free and grid.uniform_t2:
            self.modes = self._mode_factors(ref)
        elif grid.size <= DIRECT_LIMIT:
            S = self._normal_matrix(op)
            self.lu = sla.splu(S.tocsc(), permc_spec="MMD_AT_PLUS_A")
        else:
            raise ValueError("no separable reference is available for this operator")

    def _normal_matrix(self, op):
        cbf = op.cb[:, np.flatnonzero(self.free)]
        return (op.cc @ sp.diags(1.0 / self.cell_weight) @ op.cc.conj().T
                + cbf @ sp.diags(1.0 / self.node_weight[self.free]) @ cbf.conj().T)

    def _mode_factors(self, ref):
        grid = ref.grid
        n_r, n1, n2 = grid.shape
        b = grid.boundary
        layer = grid.index(*np.meshgrid(np.arange(n_r), np.arange(n1), [0], indexing="ij")).ravel()
        a2 = ref.cc_rt[layer][:, layer].tocsc()
        node_k = np.round((b.polar[:, 2] - grid.centers[2][0]) / (grid.t2_edges[1] - grid.t2_edges[0])).astype(int)
        cols = np.flatnonzero(self.free & (node_k == 0))
        B = ref.cb[layer][:, cols].tocsc()
        T = np.zeros((n2, n2))
        idx = np.arange(n2)
        T[idx, idx] = 2.0
        T[idx[:-1], idx[1:]] = T[idx[1:], idx[:-1]] = -1.0
        if grid.periodic:
            T[0, -1] = T[-1, 0] = -1.0
        else:
            T[0, 0] = T[-1, -1] = 3.0
        lam, self.Q = np.linalg.eigh(T)
        self.shape = (n_r * n1, n2)
        inv_v = sp.diags(1.0 / self.cell_weight[layer])
        extra = B @ sp.diags(1.0 / self.node_weight[cols]) @ B.conj().T
        D = sp.diags(ref.t2_weight)
        factors = []
        for value in lam:
            Am = a2 + value * D
            factors.append(sla.splu((Am @ inv_v @ Am.conj().T + extra).tocsc(), permc_spec="MMD_AT_PLUS_A"))
        return factors

    def _mode_solve(self, rhs):
        B = rhs.reshape(self.shape) @ self.Q
        X = np.empty(B.shape, dtype=complex)
        for m, lu in enumerate(self.modes):
            X[:, m] = lu.solve(np.ascontiguousarray(B[:, m]))
        return (X @ self.Q.T).ravel()

    def _apply_normal(self, y):
        op = self.op
        return (op.cc @ ((op.cc.conj().T @ y) / self.cell_weight)
                + self.cb_free @ ((self.cb_free.conj().T @ y) / self.node_weight[self.free]))

    def solve(self, rhs):
        """Return ``(cells, boundary)``; pinned boundary nodes are zero."""
        rhs = np.asarray(rhs, dtype=complex)
        N = self.op.grid.size
        if self.modes is None:
            y = self.lu.solve(rhs)
        elif self.op.separable:
            y = self._mode_solve(rhs)
        else:
            count = [0]
            def tick(_):
                count[0] += 1
            S = sla.LinearOperator((N, N), matvec=self._apply_normal, dtype=complex)
            M = sla.LinearOperator((N, N), matvec=self._mode_solve, dtype=complex)
            y, info = sla.cg(S, rhs, x0=self._mode_solve(rhs), M=M, rtol=self.rtol, atol=0.0,
                             maxiter=500, callback=tick)
            if info != 0:
                raise ZeroEigenvalue(f"conjugate gradients did not converge (info={info})")
            self.iterations.append(count[0])
        cells = (self.op.cc.conj().T @ y) / self.cell_weight
        boundary = np.zeros(len(self.free), dtype=complex)
        boundary[self.free] = (self.cb_free.conj().T @ y) / self.node_weight[self.free]
        return cells, boundary
