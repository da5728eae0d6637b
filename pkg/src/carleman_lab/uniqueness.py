"""Numerical pipeline behind the partial-data uniqueness argument.

Two CGO solutions are paired through Green's formula: ``u1`` for the weight
``-log r`` and potentials ``(W1, conj q1)``, ``u2~`` for ``+log r`` and
``(W2, q2)`` vanishing on the inner sphere.  The boundary term of the
identity is compared with four volume terms whose growth in ``1/h`` is
measured.  The limiting relations are then probed directly: plane integrals
of ``W1 - W2`` and slice integrals of ``q2 - q1`` against holomorphic test
functions.

Everything runs on the finite-volume discretization of :mod:`carleman_lab.fvm`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .cgo import CHART_AXIS, CGOSolution, SliceTransform, _amplitude_at, cgo_solution
from .dnmap import NodeClassification, PotentialPair, classify_nodes
from .errors import CurveDegenerate, InsufficientHPoints, NotHolomorphic
from .fvm import DirichletSolver, SphericalGrid, assemble, polar_to_points
from .geometry import StarDomain, make_star_domain
from .potentials import Bump, ConstantScalar, GaugeShifted, SumScalar, SwirlField, ZeroVector

DEFAULT_H_LIST = (0.2, 0.1, 0.05)
TERM_NAMES = ("boundary", "W_main", "potential_main", "W_correction", "potential_correction")
EXPECTED_EXPONENTS = (-0.5, -1.0, 0.0, 0.0, 1.0)
EXPONENT_SLACK = 0.3
HOLOMORPHIC_GATE = 1e-8


def default_domain() -> StarDomain:
    """Shell sector ``1 < r < 1.5`` around ``e_3`` with angular half-width 0.25."""
    half = 0.25
    box = ((np.pi / 2 - half, np.pi / 2 + half),) * 2
    return make_star_domain("const:1", 1.5, theta_box=box)


def canonical_pairs(center=(0.0, 0.0, 1.25)) -> dict[str, PotentialPair]:
    """Gauge pair, curl-distinct pair and q-bump pair inside :func:`default_domain`."""
    swirl = SwirlField(center, 1.0, 0.3)
    psi = Bump(center, 0.2, 0.5)
    zero_q = ConstantScalar(0.0)
    bump = Bump(center, 0.2, 1.0)
    return {
        "gauge": PotentialPair(swirl, GaugeShifted(swirl, psi), zero_q, zero_q),
        "curl": PotentialPair(ZeroVector(), swirl, zero_q, zero_q),
        "q_bump": PotentialPair(swirl, swirl, zero_q, SumScalar((zero_q, bump))),
    }


# --------------------------------------------------------------------------
# slice frames
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SliceFrame:
    """Half-plane ``{origin + s e_s + t e_t : t > 0}`` with chart ``z = s + i t``."""

    omega: np.ndarray
    eta: np.ndarray
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        omega = np.asarray(self.omega, dtype=float)
        omega = omega / np.linalg.norm(omega)
        eta = np.asarray(self.eta, dtype=float)
        eta = eta - (eta @ omega) * omega
        norm = np.linalg.norm(eta)
        if norm < 1e-12:
            raise CurveDegenerate("eta is parallel to omega")
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "eta", eta / norm)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float))

    @property
    def e_s(self):
        return self.omega

    @property
    def e_t(self):
        return self.eta

    @classmethod
    def chart(cls, theta2: float, origin=None) -> "SliceFrame":
        """Slice of the polar chart at fixed last angle; ``z = r exp(i theta1)``."""
        return cls(CHART_AXIS, np.array([0.0, np.cos(theta2), np.sin(theta2)]),
                   np.zeros(3) if origin is None else origin)

    def points(self, s, t):
        s = np.asarray(s, dtype=float)[..., None]
        t = np.asarray(t, dtype=float)[..., None]
        return self.origin + s * self.omega + t * self.eta

    def z(self, x):
        rel = np.asarray(x, dtype=float) - self.origin
        s = rel @ self.omega
        return s + 1j * np.linalg.norm(rel - s[..., None] * self.omega, axis=-1)


def frame_family(domain: StarDomain, count: int, seed: int = 0, tilt: float = 0.15,
                 shift: float = 0.05) -> list[SliceFrame]:
    """Frames with ``omega`` near ``e_1``, shifted origins, and ``eta`` aimed at the domain."""
    from .carleman import rng_for
    frames = []
    lo, hi = domain.box_lower, domain.box_upper
    r_mid = float(np.mean([domain.inner_radius(np.array([0.5 * (lo + hi)]))[0],
                           domain.outer_radius(np.array([0.5 * (lo + hi)]))[0]]))
    for k in range(count):
        rng = rng_for(seed, k)
        omega = CHART_AXIS + tilt * rng.uniform(-1.0, 1.0, 3)
        origin = shift * rng.uniform(-1.0, 1.0, 3)
        theta = lo + (hi - lo) * rng.uniform(0.2, 0.8, len(lo))
        target = polar_to_points(r_mid, theta[0], theta[1])
        frames.append(SliceFrame(omega, target - origin, origin))
    return frames


# --------------------------------------------------------------------------
# holomorphic test functions
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Monomial:
    center: complex
    scale: float
    power: int

    def __call__(self, z):
        return ((np.asarray(z) - self.center) / self.scale) ** self.power


@dataclass(frozen=True)
class Exponential:
    center: complex
    rate: complex

    def __call__(self, z):
        return np.exp(self.rate * (np.asarray(z) - self.center))


def holomorphic_tests(center: complex = 0.0, scale: float = 1.0, degree: int = 6,
                      rates=(1.0, -1.0, 1j, -1j)) -> list:
    """Centred monomials up to ``degree`` and a few exponentials."""
    tests = [Monomial(center, scale, k) for k in range(degree + 1)]
    tests += [Exponential(center, c / scale) for c in rates]
    return tests


def dbar_residual(g, z, step: float = 1e-3) -> float:
    """``max |d g / d zbar| / max(1, |g|)`` from fourth-order differences."""
    z = np.asarray(z, dtype=complex).ravel()
    def d(direction):
        e = step * direction
        return (-g(z + 2 * e) + 8 * g(z + e) - 8 * g(z - e) + g(z - 2 * e)) / (12 * step)
    dbar = 0.5 * (d(1.0) + 1j * d(1j))
    return float(np.max(np.abs(dbar) / np.maximum(1.0, np.abs(g(z)))))


def _require_holomorphic(g, z):
    res = dbar_residual(g, z)
    if res > HOLOMORPHIC_GATE:
        raise NotHolomorphic(f"d/dzbar residual {res:.2e} exceeds {HOLOMORPHIC_GATE:.0e}")


# --------------------------------------------------------------------------
# slice integrals
# --------------------------------------------------------------------------

def _composite_gauss(a: float, b: float, panels: int, order: int = 4):
    x, w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(a, b, panels + 1)
    half = 0.5 * np.diff(edges)[:, None]
    return ((x + 1) * half + edges[:-1, None]).ravel(), (w * half).ravel()


@dataclass(frozen=True)
class SliceQuadrature:
    """Tensor Gauss rule in ``(s, t)`` restricted to the slice of a domain."""

    frame: SliceFrame
    z: np.ndarray
    weights: np.ndarray
    points: np.ndarray


def slice_quadrature(domain, frame: SliceFrame, panels: int = 96, order: int = 4) -> SliceQuadrature:
    lo, hi = domain.box_lower, domain.box_upper
    t1 = np.linspace(lo[0], hi[0], 9)
    t2 = np.linspace(lo[1], hi[1], 9)
    T1, T2 = np.meshgrid(t1, t2, indexing="ij")
    theta = np.stack([T1.ravel(), T2.ravel()], -1)
    corners = np.concatenate([polar_to_points(domain.inner_radius(theta), T1.ravel(), T2.ravel()),
                              polar_to_points(domain.outer_radius(theta), T1.ravel(), T2.ravel())])
    zc = frame.z(corners)
    pad = 0.05 * (np.ptp(zc.real) + np.ptp(zc.imag))
    s, ws = _composite_gauss(zc.real.min() - pad, zc.real.max() + pad, panels, order)
    t, wt = _composite_gauss(max(zc.imag.min() - pad, 0.0), zc.imag.max() + pad, panels, order)
    S, T = np.meshgrid(s, t, indexing="ij")
    w = np.outer(ws, wt).ravel()
    pts = frame.points(S.ravel(), T.ravel())
    inside = domain.contains(pts)
    if not np.any(inside):
        raise CurveDegenerate("the slice misses the domain")
    return SliceQuadrature(frame, (S.ravel() + 1j * T.ravel())[inside], w[inside], pts[inside])


def slice_integral(difference, frame: SliceFrame, domain, g=None, kind: str = "W",
                   quadrature: SliceQuadrature | None = None) -> complex:
    """``int_{slice} g(z) D ds dt`` for ``D = (W1 - W2).(e_s + i e_t)`` or ``D = q2 - q1``.

    The exterior-form version ``dzbar ^ dz = 2i ds dt`` differs by that
    constant.  With ``g = 1`` and a real vector difference, the real and
    imaginary parts are the plane integrals of the ``e_s`` and ``e_t``
    components.
    """
    quad = quadrature or slice_quadrature(domain, frame)
    if g is None:
        gz = np.ones(len(quad.z), dtype=complex)
    else:
        _require_holomorphic(g, quad.z[:: max(1, len(quad.z) // 64)])
        gz = g(quad.z)
    if kind == "W":
        vals = difference(quad.points)
        density = vals @ frame.e_s + 1j * (vals @ frame.e_t)
    elif kind == "q":
        density = np.asarray(difference(quad.points), dtype=complex)
    else:
        raise ValueError("kind must be 'W' or 'q'")
    return complex(np.sum(quad.weights * gz * density))


# --------------------------------------------------------------------------
# Cauchy extension of boundary data
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SliceContour:
    nodes: np.ndarray   # ordered counterclockwise
    dz: np.ndarray

    @property
    def center(self) -> complex:
        return complex(np.sum(self.nodes * np.abs(self.dz)) / np.sum(np.abs(self.dz)))

    @property
    def radius(self) -> float:
        return float(np.max(np.abs(self.nodes - self.center)))


def circle_contour(center: complex, radius: float, count: int = 256) -> SliceContour:
    """Counterclockwise circle sampled by the trapezoid rule."""
    angle = 2 * np.pi * np.arange(count) / count
    nodes = center + radius * np.exp(1j * angle)
    return SliceContour(nodes, 1j * (nodes - center) * 2 * np.pi / count)


def sector_contour(r_range, t_range, panels: int = 16, order: int = 8) -> SliceContour:
    """Boundary of ``{r e^{it}}`` over the given ranges, as Gauss panels."""
    tr = SliceTransform(np.asarray(r_range, dtype=float), np.asarray(t_range, dtype=float),
                        panels_per_cell=panels, order=order)
    return SliceContour(tr.nodes, tr.dz)


@dataclass(frozen=True)
class CauchyExtension:
    F: np.ndarray
    winding: int
    moments_ok: bool
    moments: np.ndarray
    boundary_mismatch: float


def winding_number(values) -> int:
    values = np.asarray(values, dtype=complex)
    if np.min(np.abs(values)) < 1e-300:
        raise CurveDegenerate("the boundary data vanish on the curve")
    angles = np.unwrap(np.angle(np.append(values, values[0])))
    return int(np.rint((angles[-1] - angles[0]) / (2 * np.pi)))


def cauchy_extension(f, contour: SliceContour, targets=None, k_max: int = 6,
                     moment_tol: float = 1e-6) -> CauchyExtension:
    """``F(z) = (1/2 pi i) oint f(zeta) / (zeta - z) dzeta`` with consistency checks.

    ``moments_ok`` says the moments ``oint (zeta - c)^k f dzeta`` vanish
    relative to ``oint |zeta - c|^k |f| |dzeta|``, which is what makes ``F``
    vanish outside the curve.  ``boundary_mismatch`` is the largest jump
    defect ``|F_inside - f|`` along the curve relative to ``max |f|``.
    """
    nodes, dz = contour.nodes, contour.dz
    if len(nodes) < 3 or np.min(np.abs(dz)) == 0.0:
        raise CurveDegenerate("the contour has fewer than three nodes or zero-length panels")
    fv = np.asarray(f(nodes) if callable(f) else f, dtype=complex)
    c = contour.center
    rel = nodes - c
    moments = np.array([abs(np.sum(rel ** k * fv * dz)) / np.sum(np.abs(rel) ** k * np.abs(fv) * np.abs(dz))
                        for k in range(k_max + 1)])
    F = None
    if targets is not None:
        zt = np.asarray(targets, dtype=complex).ravel()
        F = (fv[None, :] * dz[None, :] / (nodes[None, :] - zt[:, None])).sum(axis=1) / (2j * np.pi)
    # the outside limit of F at each node; it equals F_inside - f there
    diff = fv[None, :] - fv[:, None]
    denom = nodes[None, :] - nodes[:, None]
    np.fill_diagonal(denom, 1.0)
    terms = diff / denom * dz[None, :]
    slope = (np.roll(fv, -1) - np.roll(fv, 1)) / (np.roll(nodes, -1) - np.roll(nodes, 1))
    np.fill_diagonal(terms, slope * dz)
    outside = terms.sum(axis=1) / (2j * np.pi)
    mismatch = float(np.max(np.abs(outside)) / np.max(np.abs(fv)))
    return CauchyExtension(F, winding_number(fv), bool(np.all(moments <= moment_tol)), moments, mismatch)


def cgo_slice_data(u1: CGOSolution, u2: CGOSolution, theta2: float, panels: int = 16):
    """Contour of the chart slice at ``theta2`` and ``(z - zbar)^(n-1) conj(a1) a2`` on it."""
    dom = u2.setup.domain
    (a1, b1), _ = dom.theta_box
    theta = np.array([[0.5 * (a1 + b1), theta2]])
    contour = sector_contour([dom.inner_radius(theta)[0], dom.outer_radius(theta)[0]], [a1, b1], panels)
    r, t = np.abs(contour.nodes), np.angle(contour.nodes)
    eta = np.full(len(r), theta2)
    amp1 = _amplitude_at(u1.amplitude, r, t, eta, u1.amplitude.W)
    amp2 = _amplitude_at(u2.amplitude, r, t, eta, u2.amplitude.W)
    z = contour.nodes
    return contour, (z - np.conj(z)) ** (u2.pair.dim_n - 1) * np.conj(amp1) * amp2


# --------------------------------------------------------------------------
# Green's identity on the domain grid
# --------------------------------------------------------------------------

def _edge_range(edges, lo, hi, tol=1e-9):
    idx = np.flatnonzero((edges >= lo - tol) & (edges <= hi + tol))
    return idx[0], idx[-1]


def domain_grid(sol: CGOSolution) -> SphericalGrid:
    """The cells of the CGO box that make up the domain."""
    g, dom = sol.grid, sol.setup.domain
    theta = np.array([[np.mean(dom.theta_box[0]), np.mean(dom.theta_box[1])]])
    r0, r1 = float(dom.inner_radius(theta)[0]), float(dom.outer_radius(theta)[0])
    (a1, b1), (a2, b2) = dom.theta_box
    ir = _edge_range(g.r_edges, r0, r1)
    i1 = _edge_range(g.t1_edges, a1, b1)
    i2 = _edge_range(g.t2_edges, a2, b2)
    return SphericalGrid(g.r_edges[ir[0]: ir[1] + 1], g.t1_edges[i1[0]: i1[1] + 1],
                         g.t2_edges[i2[0]: i2[1] + 1])


def _offset(big_edges, sub_edges) -> int:
    k = int(np.argmin(np.abs(big_edges - sub_edges[0])))
    if not np.allclose(big_edges[k: k + len(sub_edges)], sub_edges, atol=1e-9):
        raise ValueError("the domain grid is not a block of the CGO grid")
    return k


def restrict_amplitude(sol: CGOSolution, sub: SphericalGrid, amplitude) -> tuple[np.ndarray, np.ndarray]:
    """``exp(f/h) * amplitude`` on the cells and boundary nodes of ``sub``.

    Boundary nodes of ``sub`` that are interior faces of the CGO grid get the
    mean of the two adjacent amplitudes, which varies on the grid scale
    rather than the scale ``h``.
    """
    big = sol.grid
    N = big.size
    amplitude = np.asarray(amplitude, dtype=complex)
    off = np.array([_offset(big.r_edges, sub.r_edges), _offset(big.t1_edges, sub.t1_edges),
                    _offset(big.t2_edges, sub.t2_edges)])
    n_r, n1, n2 = sub.shape
    I, J, K = np.unravel_index(np.arange(sub.size), sub.shape)
    big_cells = big.index(I + off[0], J + off[1], K + off[2])
    b = sub.boundary
    phase_sub = sol.pair.phase(polar_to_points(*np.concatenate([sub.cell_polar, b.polar]).T)) / sol.h
    cells = np.exp(phase_sub[: sub.size]) * amplitude[big_cells]

    ci, cj, ck = np.unravel_index(b.cell, sub.shape)
    step = {"r_lo": (-1, 0, 0), "r_hi": (1, 0, 0), "t1_lo": (0, -1, 0), "t1_hi": (0, 1, 0),
            "t2_lo": (0, 0, -1), "t2_hi": (0, 0, 1)}
    inner = big.index(ci + off[0], cj + off[1], ck + off[2])
    values = np.empty(len(b.area), dtype=complex)
    tree = cKDTree(big.boundary.polar)
    shape = np.array(big.shape)
    for face, (di, dj, dk) in step.items():
        sel = b.face == face
        if not np.any(sel):
            continue
        oi, oj, ok = ci[sel] + off[0] + di, cj[sel] + off[1] + dj, ck[sel] + off[2] + dk
        out_of_box = (oi < 0) | (oi >= shape[0]) | (oj < 0) | (oj >= shape[1]) | (ok < 0) | (ok >= shape[2])
        mean = np.empty(sel.sum(), dtype=complex)
        keep = ~out_of_box
        outer = big.index(oi[keep], oj[keep], ok[keep])
        mean[keep] = 0.5 * (amplitude[inner[sel][keep]] + amplitude[outer])
        if np.any(out_of_box):
            dist, idx = tree.query(b.polar[sel][out_of_box])
            if np.max(dist) > 1e-9:
                raise ValueError("boundary node of the domain grid not found on the CGO grid")
            mean[out_of_box] = amplitude[N + idx]
        values[sel] = mean
    return cells, np.exp(phase_sub[sub.size:]) * values


def _total_amplitude(sol: CGOSolution):
    amp = sol.amplitude.a + sol.remainder
    if sol.correction is not None:
        amp = amp - sol.correction
    return amp


def _conj_scalar(q):
    if q is None:
        return None
    return lambda x: np.conj(q(x))


def _vec(W):
    return None if W is None or isinstance(W, ZeroVector) else W


@dataclass
class IdentityTerms:
    """Both sides of the identity at one ``h``.

    ``boundary`` is the term on the boundary away from ``U`` and
    ``boundary_U`` the rest; the volume terms use ``u2`` (``W_main``,
    ``potential_main``) and the vanishing correction ``u_r``
    (``W_correction``, ``potential_correction``).
    """

    h: float
    boundary: complex
    boundary_U: complex
    W_main: complex
    potential_main: complex
    W_correction: complex
    potential_correction: complex
    residual: float
    projection_defect: tuple

    def values(self) -> tuple:
        return tuple(getattr(self, name) for name in TERM_NAMES)


def greens_identity_check(pair: PotentialPair, u1: CGOSolution, u2tilde: CGOSolution,
                          w=None, masks: NodeClassification | None = None) -> IdentityTerms:
    """Evaluate ``boundary = W_main + potential_main + W_correction + potential_correction``.

    The CGO solutions are restricted to the domain grid and replaced by the
    discrete solutions with the same boundary values, so both sides are
    computed for exact discrete solutions and the identity residual is pure
    solver error.  ``w`` solves ``L_{W1,q1} w = 0`` with the boundary values
    of ``u2tilde``; it is computed when not given as ``(cells, boundary)``.
    """
    sub = domain_grid(u2tilde)
    W1, W2 = _vec(pair.W1), _vec(pair.W2)
    K1 = assemble(sub, W1, pair.q1)
    K1_adj = assemble(sub, W1, _conj_scalar(pair.q1))
    K2 = assemble(sub, W2, pair.q2)

    c2, b2 = restrict_amplitude(u2tilde, sub, _total_amplitude(u2tilde))
    c1, b1 = restrict_amplitude(u1, sub, _total_amplitude(u1))
    if u2tilde.correction is not None:
        rc, rb = restrict_amplitude(u2tilde, sub, u2tilde.correction)
        ur = (-rc, -rb)
    else:
        ur = (np.zeros(sub.size, dtype=complex), np.zeros(len(b2), dtype=complex))
    if u2tilde.mode == "vanish":
        b2[sub.boundary.face == "r_lo"] = 0.0

    vol = sub.volumes
    norm = lambda x: float(np.sqrt(np.sum(vol * np.abs(x) ** 2)))
    solver1 = DirichletSolver(K1)
    solver1_adj = solver1 if pair.q1 is None or _is_real(pair.q1, sub) else DirichletSolver(K1_adj)
    u2d = DirichletSolver(K2).solve(b2)
    u1d = solver1_adj.solve(b1)
    defect = (norm(u1d - c1) / norm(c1), norm(u2d - c2) / norm(c2))
    w_cells = solver1.solve(b2) if w is None else np.asarray(w[0])

    u2_cells = u2d - ur[0]
    u2_bnd = b2 - ur[1]
    q_diff = _potential_difference(pair, sub.cell_points)

    def difference(cells, bnd):
        return K2.apply(cells, bnd) - K1.apply(cells, bnd)

    def split(cells, bnd):
        total = difference(cells, bnd)
        pot = q_diff * cells
        return (complex(np.sum(vol * np.conj(u1d) * (total - pot))),
                complex(np.sum(vol * np.conj(u1d) * pot)))

    W_main, pot_main = split(u2_cells, u2_bnd)
    W_corr, pot_corr = split(*ur)

    flux = K1.variational_flux(u2d - w_cells, np.zeros(len(b2), dtype=complex))
    masks = masks or classify_nodes(u2tilde.setup.domain, sub)
    contrib = np.conj(b1) * flux
    boundary = complex(np.sum(contrib[~masks.U]))
    boundary_U = complex(np.sum(contrib[masks.U]))
    rhs = W_main + pot_main + W_corr + pot_corr
    scale = max(abs(boundary + boundary_U), abs(W_main), abs(pot_main), abs(W_corr), abs(pot_corr), 1e-300)
    residual = abs(boundary + boundary_U - rhs) / scale
    return IdentityTerms(u2tilde.h, boundary, boundary_U, W_main, pot_main, W_corr, pot_corr,
                         float(residual), defect)


def _is_real(q, grid) -> bool:
    return bool(np.all(np.isreal(np.asarray(q(grid.cell_points)))))


def _potential_difference(pair: PotentialPair, pts):
    """``W2^2 - W1^2 + q2 - q1`` at points."""
    out = np.zeros(len(pts), dtype=complex)
    for sign, W, q in ((1.0, pair.W2, pair.q2), (-1.0, pair.W1, pair.q1)):
        if _vec(W) is not None:
            out += sign * np.sum(W(pts) ** 2, axis=-1)
        if q is not None:
            out += sign * np.asarray(q(pts))
    return out


# --------------------------------------------------------------------------
# growth of the identity terms
# --------------------------------------------------------------------------

@dataclass
class IdentityReport:
    h_list: tuple
    terms: list
    exponents: dict
    contract: dict
    residuals: list
    slice_table: list = field(default_factory=list)
    verdict: str | None = None

    @property
    def passed(self) -> bool:
        return all(self.contract.values()) and max(self.residuals) <= 1e-4


def fit_exponent(h_values, magnitudes, floor: float = 1e-300) -> float:
    """Slope of ``log |term|`` against ``log h``; NaN when a value is at the floor."""
    mags = np.asarray(magnitudes, dtype=float)
    if np.any(mags <= floor):
        return float("nan")
    return float(np.polyfit(np.log(h_values), np.log(mags), 1)[0])


def build_identity_pair(pair: PotentialPair, domain, h: float, omega=CHART_AXIS):
    """``(u1, u2tilde)`` for one ``h``."""
    u1 = cgo_solution(domain, _vec(pair.W1), _conj_scalar(pair.q1), omega, h, mode="free", weight_sign=-1)
    u2 = cgo_solution(domain, _vec(pair.W2), pair.q2, omega, h, mode="vanish", weight_sign=1)
    return u1, u2


def identity_terms(pair: PotentialPair, domain, h: float, omega=CHART_AXIS) -> IdentityTerms:
    """Build both CGO solutions at ``h`` and evaluate the identity."""
    u1, u2 = build_identity_pair(pair, domain, h, omega)
    return greens_identity_check(pair, u1, u2)


def _identity_job(args):
    return identity_terms(*args)


def term_scalings(pair: PotentialPair, domain=None, omega=CHART_AXIS, h_list=DEFAULT_H_LIST,
                  degenerate_tol: float = 1e-12, mapper=map) -> IdentityReport:
    """Run the identity across ``h_list`` and fit growth exponents of each term.

    A term counts as degenerate (excluded from fits) when it stays below
    ``degenerate_tol``, absolutely and relative to the largest term, at every ``h``.  ``mapper`` may
    be a pool's ``map``; results keep the order of ``h_list``.
    """
    h_list = tuple(float(h) for h in h_list)
    if len(h_list) < 3:
        raise InsufficientHPoints("term exponents need at least three values of h")
    domain = domain or default_domain()
    terms = list(mapper(_identity_job, [(pair, domain, h, omega) for h in h_list]))
    table = np.array([[abs(v) for v in t.values()] for t in terms])
    biggest = max(float(table.max()), 1e-300)
    exponents, contract = {}, {}
    for col, (name, expected) in enumerate(zip(TERM_NAMES, EXPECTED_EXPONENTS)):
        mags = table[:, col]
        if np.all(mags <= degenerate_tol * max(biggest, 1.0)):
            exponents[name] = float("nan")
            contract[name] = True
            continue
        p = fit_exponent(h_list, mags)
        exponents[name] = p
        contract[name] = bool(np.isnan(p) or p >= expected - EXPONENT_SLACK)
    return IdentityReport(h_list, terms, exponents, contract, [t.residual for t in terms])


# --------------------------------------------------------------------------
# detection from plane and slice integrals
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DetectionProtocol:
    frames: int = 16
    seed: int = 0
    tilt: float = 0.15
    shift: float = 0.05
    degree: int = 6
    null_factor: float = 10.0
    floor: float = 1e-10
    panels: int = 96


@dataclass
class Detection:
    verdict: str
    W_statistic: float
    q_statistic: float
    W_null: float
    q_null: float
    W_threshold: float
    q_threshold: float
    table: list


def _reference_gauge(domain) -> Bump:
    """Bump well inside the domain; its gradient is the null difference."""
    lo, hi = domain.box_lower, domain.box_upper
    mid = 0.5 * (lo + hi)
    theta = np.array([mid])
    r0, r1 = float(domain.inner_radius(theta)[0]), float(domain.outer_radius(theta)[0])
    rm = 0.5 * (r0 + r1)
    center = polar_to_points(rm, mid[0], mid[1])
    radius = 0.8 * min(0.5 * (r1 - r0), rm * np.sin(0.5 * float(np.min(hi - lo))))
    return Bump(tuple(center), radius, 1.0)


def _statistics(W_diff, q_diff, domain, frames, protocol: DetectionProtocol, table=None, label=""):
    W_stat = q_stat = 0.0
    for k, frame in enumerate(frames):
        quad = slice_quadrature(domain, frame, protocol.panels)
        c = complex(np.mean(quad.z))
        R = float(np.max(np.abs(quad.z - c)))
        for j, g in enumerate(holomorphic_tests(c, R, protocol.degree)):
            vw = slice_integral(W_diff, frame, domain, g, "W", quad) if W_diff is not None else 0j
            vq = slice_integral(q_diff, frame, domain, g, "q", quad) if q_diff is not None else 0j
            W_stat = max(W_stat, abs(vw))
            q_stat = max(q_stat, abs(vq))
            if table is not None:
                table.append((label, k, j, vw, vq))
    return W_stat, q_stat


def _vector_difference(A, B):
    A, B = _vec(A), _vec(B)
    if A is None and B is None:
        return None
    return lambda x: (A(x) if A is not None else 0.0) - (B(x) if B is not None else 0.0)


def _scalar_difference(p, q):
    if p is None and q is None:
        return None
    return lambda x: (np.asarray(p(x)) if p is not None else 0.0) - (np.asarray(q(x)) if q is not None else 0.0)


def detect_difference(pair: PotentialPair, domain=None, protocol: DetectionProtocol | None = None) -> Detection:
    """Classify a pair as ``indistinguishable``, ``dW_differ`` or ``q_differ``.

    Thresholds are ``null_factor`` times the largest value seen for a
    reference gauge difference ``grad Psi`` (and zero ``q`` difference) on the
    same frames, but at least ``floor``.
    """
    protocol = protocol or DetectionProtocol()
    domain = domain or default_domain()
    frames = frame_family(domain, protocol.frames, protocol.seed, protocol.tilt, protocol.shift)
    psi = _reference_gauge(domain)
    null_W, null_q = _statistics(psi.gradient, lambda x: np.zeros(len(x)), domain, frames, protocol)
    table: list = []
    W_stat, q_stat = _statistics(_vector_difference(pair.W1, pair.W2), _scalar_difference(pair.q2, pair.q1),
                                 domain, frames, protocol, table)
    W_thr = max(protocol.null_factor * null_W, protocol.floor)
    q_thr = max(protocol.null_factor * null_q, protocol.floor)
    if W_stat > W_thr:
        verdict = "dW_differ"
    elif q_stat > q_thr:
        verdict = "q_differ"
    else:
        verdict = "indistinguishable"
    return Detection(verdict, W_stat, q_stat, null_W, null_q, W_thr, q_thr, table)
