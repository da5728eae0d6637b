"""Forward Dirichlet problems for ``L_{W,q} = (D + W)^2 + q`` and their DN data."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import sph_harm_y

from .errors import EmptyMask, NonvanishingBoundaryPsi
from .fvm import DirichletSolver, SphericalGrid, assemble, polar_frame
from .geometry import BallDomain, BoundaryMargins, StarDomain, boundary_samples
from .potentials import ConstantScalar, GaugeShifted, ZeroVector, curl_matrix

BALL_CELLS = 48
BALL_GRADING = 0.8
STAR_CELLS = 16


@dataclass(frozen=True)
class PotentialPair:
    W1: object
    W2: object
    q1: object
    q2: object

    def curls(self, points):
        return curl_matrix(self.W1, points), curl_matrix(self.W2, points)

    def curl_difference(self, points) -> float:
        a, b = self.curls(points)
        return float(np.max(np.abs(a - b))) if len(points) else 0.0


# --------------------------------------------------------------------------
# grids for the supported domains
# --------------------------------------------------------------------------

def ball_forward_grid(radius: float, cells: int = BALL_CELLS, grading: float = BALL_GRADING) -> SphericalGrid:
    """Cells refined toward the sphere; equal polar and azimuthal spacing."""
    s = np.linspace(0.0, 1.0, cells + 1)
    return SphericalGrid(radius * (s + grading * s * (1 - s)), np.linspace(0, np.pi, cells + 1),
                         np.linspace(0, 2 * np.pi, 2 * cells + 1), periodic=True)


def star_forward_grid(domain: StarDomain, cells=STAR_CELLS) -> SphericalGrid:
    if domain.dim_n != 2:
        raise ValueError("forward solves are implemented for three-dimensional domains only")
    if not domain.log_f.is_constant:
        raise ValueError("forward solves need a constant radius profile (a spherical shell sector)")
    theta = np.array([[np.mean(domain.theta_box[0]), np.mean(domain.theta_box[1])]])
    r_lo = float(domain.inner_radius(theta)[0])
    r_hi = float(domain.outer_radius(theta)[0])
    n = (cells, cells, cells) if np.isscalar(cells) else tuple(cells)
    (a1, b1), (a2, b2) = domain.theta_box
    return SphericalGrid(np.linspace(r_lo, r_hi, n[0] + 1), np.linspace(a1, b1, n[1] + 1),
                         np.linspace(a2, b2, n[2] + 1))


def forward_grid(domain, resolution=None) -> SphericalGrid:
    if isinstance(domain, BallDomain):
        return ball_forward_grid(domain.radius, resolution or BALL_CELLS)
    if isinstance(domain, StarDomain):
        return star_forward_grid(domain, resolution or STAR_CELLS)
    raise TypeError(f"unsupported domain {type(domain).__name__}")


def _centred(fn, domain):
    """Potentials are Cartesian; ball grids live in coordinates centred at the ball centre."""
    if fn is None or not isinstance(domain, BallDomain) or not np.any(domain.center):
        return fn
    c = np.asarray(domain.center, dtype=float)
    return lambda x: fn(np.asarray(x) + c)


def _is_zero(fn) -> bool:
    return fn is None or isinstance(fn, ZeroVector) or (isinstance(fn, ConstantScalar) and fn.value == 0)


@dataclass
class ForwardProblem:
    """Factorized discrete Dirichlet problem for one potential."""

    domain: object
    W: object = None
    q: object = None
    resolution: object = None
    grid: SphericalGrid = field(init=False)

    def __post_init__(self):
        self.grid = forward_grid(self.domain, self.resolution)
        W = None if _is_zero(self.W) else _centred(self.W, self.domain)
        q = None if _is_zero(self.q) else _centred(self.q, self.domain)
        self.op = assemble(self.grid, W, q)
        self.solver = DirichletSolver(self.op)

    @property
    def boundary(self):
        return self.grid.boundary

    def solve(self, g):
        return self.solver.solve(g)

    def flux(self, cells, g, kind: str = "one_sided"):
        if kind == "one_sided":
            return self.op.one_sided_flux(cells, g)
        return self.op.variational_flux(cells, g) / self.boundary.area


@dataclass(frozen=True)
class DirichletSolution:
    grid: SphericalGrid
    cells: np.ndarray
    boundary: np.ndarray
    interior_residual: float


def solve_dirichlet(domain, W, q, g, resolution=None) -> DirichletSolution:
    """Solve ``L_{W,q} u = 0`` with ``u = g`` on the boundary nodes.

    ``g`` is either an array over the boundary nodes or a callable of the
    Cartesian node positions.
    """
    problem = ForwardProblem(domain, W, q, resolution)
    nodes = problem.boundary.points
    if callable(g):
        g = g(nodes + (np.asarray(domain.center) if isinstance(domain, BallDomain) else 0.0))
    g = np.asarray(g, dtype=complex)
    cells = problem.solve(g)
    res = problem.op.apply(cells, g)
    scale = max(np.max(np.abs(problem.op.cb @ g)), 1e-300)
    return DirichletSolution(problem.grid, cells, g, float(np.max(np.abs(res)) / scale))


# --------------------------------------------------------------------------
# DN matrices
# --------------------------------------------------------------------------

def real_harmonics(l_max: int, theta, phi):
    """Real orthonormal spherical harmonics, rows ordered by (l, m) with m = -l..l."""
    rows, labels = [], []
    for l in range(l_max + 1):
        for m in range(-l, l + 1):
            y = sph_harm_y(l, abs(m), theta, phi)
            if m > 0:
                rows.append(np.sqrt(2) * (-1) ** m * y.real)
            elif m < 0:
                rows.append(np.sqrt(2) * (-1) ** m * y.imag)
            else:
                rows.append(y.real)
            labels.append((l, m))
    return np.array(rows), labels


@dataclass(frozen=True)
class DNMatrix:
    basis: str
    labels: list
    matrix: np.ndarray
    nodes: np.ndarray
    areas: np.ndarray
    resolution: tuple

    def eigen_estimates(self):
        """Diagonal entries, one per basis function (harmonic basis only)."""
        return np.real(np.diag(self.matrix))

    def symmetry_defect(self) -> float:
        """Relative antisymmetric part of the area-weighted matrix in the nodal basis."""
        A = self.areas[:, None] * self.matrix if self.basis == "nodal" else self.matrix
        return float(np.max(np.abs(A - A.T)) / np.max(np.abs(A)))


def dn_map(domain, W=None, q=None, basis: str = "auto", l_max: int = 8, resolution=None,
           flux: str = "one_sided", problem: ForwardProblem | None = None) -> DNMatrix:
    """Columns are fluxes ``(d_nu + i W.nu) u`` of the solutions for each basis datum."""
    problem = problem or ForwardProblem(domain, W, q, resolution)
    b = problem.boundary
    if basis == "auto":
        basis = "harmonics" if isinstance(domain, BallDomain) else "nodal"
    if basis == "harmonics":
        if not isinstance(domain, BallDomain):
            raise ValueError("the harmonic basis needs a ball")
        R = domain.radius
        Y, labels = real_harmonics(l_max, b.polar[:, 1], b.polar[:, 2])
        Y = Y / R
        cells = problem.solve(Y.T.astype(complex))
        fluxes = np.stack([problem.flux(cells[:, k], Y[k], flux) for k in range(len(Y))], axis=1)
        gram = (Y * b.area) @ Y.T
        matrix = np.linalg.solve(gram, (Y * b.area) @ fluxes)
    elif basis == "nodal":
        n = len(b.area)
        labels = list(range(n))
        matrix = np.empty((n, n), dtype=complex)
        eye_block = 256
        for start in range(0, n, eye_block):
            stop = min(start + eye_block, n)
            G = np.zeros((n, stop - start), dtype=complex)
            G[np.arange(start, stop), np.arange(stop - start)] = 1.0
            cells = problem.solve(G)
            for k in range(stop - start):
                matrix[:, start + k] = problem.flux(cells[:, k], G[:, k], flux)
    else:
        raise ValueError(f"unknown basis {basis!r}")
    return DNMatrix(basis, labels, matrix, b.points.copy(), b.area.copy(), problem.grid.shape)


def gauge_transform(W, Psi, domain=None, tol: float = 1e-10):
    """``W + grad Psi``; ``Psi`` must vanish on the boundary of ``domain``."""
    if domain is not None:
        if isinstance(domain, BallDomain):
            t = np.linspace(0, np.pi, 25)[1:-1]
            p = np.linspace(0, 2 * np.pi, 48, endpoint=False)
            T, P = np.meshgrid(t, p, indexing="ij")
            e_r, _, _ = polar_frame(T.ravel(), P.ravel())
            pts = np.asarray(domain.center) + domain.radius * e_r
        else:
            pts = boundary_samples(domain, 16).points
        worst = float(np.max(np.abs(Psi(pts))))
        if worst > tol:
            raise NonvanishingBoundaryPsi(f"Psi reaches {worst:.3e} on the boundary")
    return GaugeShifted(W if W is not None else ZeroVector(), Psi)


# --------------------------------------------------------------------------
# partial data
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class NodeClassification:
    x_dot_nu: np.ndarray
    front: np.ndarray
    U: np.ndarray
    E: np.ndarray


def classify_nodes(domain: StarDomain, grid: SphericalGrid, margins: BoundaryMargins | None = None,
                   weight_sign: int = 1) -> NodeClassification:
    """Front, U and E masks on the boundary nodes of a forward grid."""
    margins = margins or BoundaryMargins()
    b = grid.boundary
    diam = domain.diameter_estimate()
    eps_z = margins.eps_Z if margins.eps_Z is not None else 0.05 * diam
    dilation = margins.U_dilation if margins.U_dilation is not None else 0.05 * diam
    x_dot_nu = weight_sign * np.einsum("ij,ij->i", b.points, b.normal)
    front = x_dot_nu <= margins.tau_nu
    graph_face = "r_hi" if domain.inverted else "r_lo"
    lower, upper = domain.box_lower, domain.box_upper
    ang = b.polar[:, 1:]
    edge = b.polar[:, 0] * np.min(np.minimum(ang - lower, upper - ang), axis=1)
    E = (b.face == graph_face) & (-x_dot_nu >= eps_z) & (edge >= eps_z)
    if not np.any(E):
        raise EmptyMask("E is empty on this grid")
    dist, _ = cKDTree(b.points[front]).query(b.points, k=1)
    U = dist <= dilation
    return NodeClassification(x_dot_nu, front, U, E)


@dataclass(frozen=True)
class PartialData:
    dn: DNMatrix
    U_mask: np.ndarray
    E_mask: np.ndarray

    def __post_init__(self):
        if self.dn.basis != "nodal":
            raise ValueError("partial data needs the nodal basis")
        if not np.any(self.U_mask) or not np.any(~self.E_mask):
            raise EmptyMask("U is empty or E covers the whole boundary")

    def block(self) -> np.ndarray:
        a = self.dn.areas
        inputs = ~self.E_mask
        M = self.dn.matrix[np.ix_(self.U_mask, inputs)]
        return np.sqrt(a[self.U_mask])[:, None] * M / np.sqrt(a[inputs])[None, :]

    def distance(self, other: "PartialData") -> float:
        """``max_g ||(L1 - L2) g||_{L2(U)} / ||g||`` over ``g`` vanishing on E."""
        return float(np.linalg.norm(self.block() - other.block(), 2))

    def relative_distance(self, other: "PartialData") -> float:
        return self.distance(other) / float(np.linalg.norm(self.block(), 2))


def restrict_partial(dn: DNMatrix, U_mask, E_mask) -> PartialData:
    return PartialData(dn, np.asarray(U_mask, dtype=bool), np.asarray(E_mask, dtype=bool))


# --------------------------------------------------------------------------
# estimator interface
# --------------------------------------------------------------------------

class DNMapEstimator:
    """Fit the DN matrix of a potential; predict boundary fluxes for new data.

    ``fit`` takes the potential as ``(W, q)``; ``predict`` maps boundary data
    (rows of basis coefficients or nodal values) to fluxes.
    """

    def __init__(self, domain=None, basis: str = "auto", l_max: int = 8, resolution=None,
                 flux: str = "one_sided"):
        self.domain = domain
        self.basis = basis
        self.l_max = l_max
        self.resolution = resolution
        self.flux = flux

    def get_params(self, deep: bool = True) -> dict:
        return {k: getattr(self, k) for k in ("domain", "basis", "l_max", "resolution", "flux")}

    def set_params(self, **params):
        for key, value in params.items():
            if key not in self.get_params():
                raise ValueError(f"unknown parameter {key!r}")
            setattr(self, key, value)
        return self

    def fit(self, X, y=None):
        W, q = X if isinstance(X, tuple) else (X, None)
        self.problem_ = ForwardProblem(self.domain, W, q, self.resolution)
        self.dn_ = dn_map(self.domain, basis=self.basis, l_max=self.l_max, flux=self.flux,
                          problem=self.problem_)
        self.matrix_ = self.dn_.matrix
        return self

    def predict(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=complex))
        return X @ self.matrix_.T
