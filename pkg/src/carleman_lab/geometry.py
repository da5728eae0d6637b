"""Star-shaped domains in hyperspherical charts and their boundary classification.

A domain is the region between the graph ``r = f(theta)`` and the sphere
``r = r_max`` over a rectangular chart box of the n-sphere.  The reference
point for the weight ``log|x|`` is the origin.  Points use hyperspherical
coordinates

    x_1 = r cos t1,  x_k = r sin t1 ... sin t_{k-1} cos t_k,  x_{n+1} = r sin t1 ... sin t_n.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linprog
from scipy.spatial import cKDTree

from .errors import EmptyE, HullContainsOrigin, NonPositiveF, OutOfChart

DEFAULT_HALF_WIDTH = 0.4


# --------------------------------------------------------------------------
# hyperspherical coordinates
# --------------------------------------------------------------------------

def to_cartesian(r, theta):
    """Map ``r`` (shape S) and ``theta`` (shape S + (n,)) to points of shape S + (n+1,)."""
    r = np.asarray(r, dtype=float)
    theta = np.asarray(theta, dtype=float)
    n = theta.shape[-1]
    out = np.empty(theta.shape[:-1] + (n + 1,))
    running = np.array(r, copy=True) * np.ones(theta.shape[:-1])
    for k in range(n):
        out[..., k] = running * np.cos(theta[..., k])
        running = running * np.sin(theta[..., k])
    out[..., n] = running
    return out


def from_cartesian(x):
    """Inverse of :func:`to_cartesian`; the last angle lies in (-pi, pi]."""
    x = np.asarray(x, dtype=float)
    n = x.shape[-1] - 1
    r = np.linalg.norm(x, axis=-1)
    theta = np.empty(x.shape[:-1] + (n,))
    for k in range(n - 1):
        tail = np.linalg.norm(x[..., k + 1:], axis=-1)
        theta[..., k] = np.arctan2(tail, x[..., k])
    theta[..., n - 1] = np.arctan2(x[..., n], x[..., n - 1])
    return r, theta


def jacobian(r, theta):
    """Columns are d x / d r and d x / d theta_j; shape S + (n+1, n+1)."""
    theta = np.asarray(theta, dtype=float)
    n = theta.shape[-1]
    shape = theta.shape[:-1]
    r = np.asarray(r, dtype=float) * np.ones(shape)
    s, c = np.sin(theta), np.cos(theta)
    jac = np.zeros(shape + (n + 1, n + 1))
    for k in range(n + 1):
        last = c[..., k] if k < n else np.ones(shape)
        # factors of x_k / r: sin(t_0) ... sin(t_{k-1}) * last
        factors = [s[..., i] for i in range(k)] + [last]
        jac[..., k, 0] = np.prod(factors, axis=0)
        for j in range(min(k + 1, n)):
            varied = list(factors)
            varied[j] = c[..., j] if j < k else -s[..., k]
            jac[..., k, 1 + j] = r * np.prod(varied, axis=0)
    return jac


def sphere_metric(theta):
    """Diagonal round-sphere metric entries ``g_jj = prod_{k<j} sin^2 t_k``."""
    theta = np.asarray(theta, dtype=float)
    n = theta.shape[-1]
    g = np.ones(theta.shape)
    for j in range(1, n):
        g[..., j] = g[..., j - 1] * np.sin(theta[..., j - 1]) ** 2
    return g


def gradient_cartesian(r, theta, partials):
    """Cartesian gradient of a function given its partials in (r, theta)."""
    jac = jacobian(r, theta)
    return np.linalg.solve(np.swapaxes(jac, -1, -2), partials[..., None])[..., 0]


# --------------------------------------------------------------------------
# radius profiles
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class LogRadius:
    """Smooth profile for ``log f(theta)``.

    ``kind`` is one of ``const`` (value = log f), ``exp_linear``
    (log f = K * theta_n) or ``trig`` (a constant plus separable cosine and
    sine terms, rows ``(axis, k, a, b)``).
    """

    kind: str = "const"
    value: float = 0.0
    K: float = 0.0
    terms: tuple = ()

    def __call__(self, theta):
        theta = np.asarray(theta, dtype=float)
        base = np.full(theta.shape[:-1], float(self.value))
        if self.kind == "exp_linear":
            return base + self.K * theta[..., -1]
        if self.kind == "trig":
            for axis, k, a, b in self.terms:
                base = base + a * np.cos(k * theta[..., int(axis)]) + b * np.sin(k * theta[..., int(axis)])
        return base

    def gradient(self, theta):
        """Partials ``d log f / d theta_j`` with shape S + (n,)."""
        theta = np.asarray(theta, dtype=float)
        grad = np.zeros(theta.shape)
        if self.kind == "exp_linear":
            grad[..., -1] = self.K
        elif self.kind == "trig":
            for axis, k, a, b in self.terms:
                t = theta[..., int(axis)]
                grad[..., int(axis)] += k * (-a * np.sin(k * t) + b * np.cos(k * t))
        return grad

    @property
    def is_constant(self) -> bool:
        if self.kind == "const":
            return True
        if self.kind == "exp_linear":
            return self.K == 0.0
        return all(a == 0 and b == 0 for _, _, a, b in self.terms)


def parse_log_radius(spec) -> LogRadius:
    """Accept ``const:c``, ``exp_linear:K``, ``coeffs:<path>``, a number or a LogRadius."""
    if isinstance(spec, LogRadius):
        return spec
    if isinstance(spec, (int, float)):
        return LogRadius("const", value=float(np.log(spec)))
    kind, _, arg = str(spec).partition(":")
    kind = kind.strip()
    if kind == "const":
        value = float(arg)
        if value <= 0:
            raise NonPositiveF(f"constant radius must be positive, got {value}")
        return LogRadius("const", value=float(np.log(value)))
    if kind == "exp_linear":
        return LogRadius("exp_linear", K=float(arg))
    if kind == "coeffs":
        rows = []
        constant = 0.0
        for line in Path(arg.strip()).read_text().splitlines():
            line = line.split("#")[0].strip()
            if not line:
                continue
            parts = [float(p) for p in line.replace(",", " ").split()]
            if len(parts) == 1:
                constant = parts[0]
            else:
                rows.append(tuple(parts[:4]))
        return LogRadius("trig", value=constant, terms=tuple(rows))
    raise ValueError(f"unknown radius specification {spec!r}")


# --------------------------------------------------------------------------
# domains
# --------------------------------------------------------------------------

def default_theta_box(dim_n: int, half_width: float = DEFAULT_HALF_WIDTH):
    return tuple((np.pi / 2 - half_width, np.pi / 2 + half_width) for _ in range(dim_n))


@dataclass(frozen=True)
class StarDomain:
    """Region ``f(theta) <= r <= r_max`` over a chart box.

    With ``inverted=True`` the region is the image under ``r -> 1/r``,
    namely ``1/r_max <= r <= 1/f(theta)``.  The graph of ``f`` (or of
    ``1/f``) is always the piece that carries the patch E.
    """

    log_f: LogRadius
    r_max: float
    theta_box: tuple
    dim_n: int = 2
    inverted: bool = False
    hull_normal: np.ndarray = field(default=None, compare=False, repr=False)
    hull_margin: float = field(default=0.0, compare=False, repr=False)

    def f(self, theta):
        return np.exp(self.log_f(theta))

    def graph_radius(self, theta):
        f = self.f(theta)
        return 1.0 / f if self.inverted else f

    def cap_radius(self, theta):
        theta = np.asarray(theta, dtype=float)
        value = 1.0 / self.r_max if self.inverted else self.r_max
        return np.full(theta.shape[:-1], value)

    def inner_radius(self, theta):
        return self.cap_radius(theta) if self.inverted else self.graph_radius(theta)

    def outer_radius(self, theta):
        return self.graph_radius(theta) if self.inverted else self.cap_radius(theta)

    @property
    def box_lower(self):
        return np.array([a for a, _ in self.theta_box])

    @property
    def box_upper(self):
        return np.array([b for _, b in self.theta_box])

    def in_chart(self, theta, tol: float = 1e-12):
        theta = np.asarray(theta, dtype=float)
        return np.all((theta >= self.box_lower - tol) & (theta <= self.box_upper + tol), axis=-1)

    def contains_polar(self, r, theta, tol: float = 1e-12):
        inside = self.in_chart(theta, tol)
        r = np.asarray(r, dtype=float)
        return inside & (r >= self.inner_radius(theta) - tol) & (r <= self.outer_radius(theta) + tol)

    def contains(self, x, tol: float = 1e-12):
        r, theta = from_cartesian(x)
        theta = self._wrap_last_angle(theta)
        return self.contains_polar(r, theta, tol)

    def _wrap_last_angle(self, theta):
        # the last angle is periodic; move it into the chart box when possible
        theta = np.array(theta, copy=True)
        lo, hi = self.theta_box[-1]
        last = theta[..., -1]
        shifted = last + 2 * np.pi
        last = np.where((last < lo) & (shifted <= hi + 1e-12), shifted, last)
        theta[..., -1] = last
        return theta

    def dense_theta(self, count: int = 41):
        axes = [np.linspace(a, b, count) for a, b in self.theta_box]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack(mesh, axis=-1).reshape(-1, self.dim_n)

    def diameter_estimate(self) -> float:
        pts = boundary_samples(self, 10).points
        return float(np.max(np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)))


@dataclass(frozen=True)
class BallDomain:
    """Euclidean ball used for forward simulations with spherical harmonics."""

    center: np.ndarray
    radius: float = 1.0

    def contains(self, x, tol: float = 1e-12):
        x = np.asarray(x, dtype=float)
        return np.linalg.norm(x - np.asarray(self.center), axis=-1) <= self.radius + tol


def separating_hyperplane(points):
    """Maximize ``t`` subject to ``c . x_i >= t`` and ``|c|_inf <= 1``.

    Returns ``(c, t)``; ``t > 0`` certifies that the origin lies outside the
    closed convex hull of the points.
    """
    points = np.asarray(points, dtype=float)
    dim = points.shape[1]
    cost = np.zeros(dim + 1)
    cost[-1] = -1.0
    a_ub = np.hstack([-points, np.ones((len(points), 1))])
    b_ub = np.zeros(len(points))
    bounds = [(-1.0, 1.0)] * dim + [(None, None)]
    res = linprog(cost, A_ub=a_ub, b_ub=b_ub, bounds=bounds, method="highs")
    if not res.success:
        return np.zeros(dim), -np.inf
    return res.x[:dim], float(res.x[-1])


def make_star_domain(f_spec, r_max: float, dim_n: int = 2, theta_box=None,
                     hull_samples: int = 16) -> StarDomain:
    """Build and validate a star domain ``f(theta) <= r <= r_max``."""
    log_f = parse_log_radius(f_spec)
    box = tuple(tuple(map(float, pair)) for pair in (theta_box or default_theta_box(dim_n)))
    if len(box) != dim_n:
        raise ValueError(f"theta_box has {len(box)} axes, expected {dim_n}")
    if any(b <= a for a, b in box):
        raise ValueError("theta_box intervals must be increasing")
    domain = StarDomain(log_f=log_f, r_max=float(r_max), theta_box=box, dim_n=dim_n)
    f_values = domain.f(domain.dense_theta())
    if not np.all(np.isfinite(f_values)) or f_values.min() < 1e-6:
        raise NonPositiveF(f"f drops to {f_values.min():.3e} on the chart box")
    if r_max <= f_values.max():
        raise ValueError(f"r_max={r_max} must exceed max f={f_values.max():.6g}")
    return _certify(domain, hull_samples)


def _certify(domain: StarDomain, hull_samples: int) -> StarDomain:
    pts = boundary_samples(domain, hull_samples).points
    normal, margin = separating_hyperplane(pts)
    scale = float(np.max(np.linalg.norm(pts, axis=1)))
    if margin <= 1e-9 * scale:
        raise HullContainsOrigin(f"no separating hyperplane (margin {margin:.3e})")
    return StarDomain(domain.log_f, domain.r_max, domain.theta_box, domain.dim_n,
                      domain.inverted, hull_normal=normal, hull_margin=margin)


def invert_radius(point):
    """``(r, theta) -> (1/r, theta)``."""
    r, theta = point
    return 1.0 / np.asarray(r, dtype=float), theta


def invert_domain(domain: StarDomain) -> StarDomain:
    """Image of a domain under :func:`invert_radius`."""
    flipped = StarDomain(domain.log_f, domain.r_max, domain.theta_box, domain.dim_n,
                         not domain.inverted)
    return _certify(flipped, 16)


def flatten_map(point, f_data, direction: str = "forward"):
    """``(r, theta) -> (r / f(theta), theta)`` or its inverse."""
    r, theta = point
    r = np.asarray(r, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if isinstance(f_data, StarDomain):
        log_f, inside = f_data.log_f, f_data.in_chart(theta)
    else:
        log_f, inside = parse_log_radius(f_data), np.ones(theta.shape[:-1], dtype=bool)
    if not np.all(inside):
        raise OutOfChart("angles outside the chart box")
    if np.any(r <= 0):
        raise ValueError("radius must be positive")
    f = np.exp(log_f(theta))
    if direction == "forward":
        return r / f, theta
    if direction == "inverse":
        return r * f, theta
    raise ValueError(f"direction must be forward or inverse, got {direction!r}")


# --------------------------------------------------------------------------
# boundary sampling and classification
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class BoundarySamples:
    points: np.ndarray
    normals: np.ndarray
    radius: np.ndarray
    theta: np.ndarray
    piece: np.ndarray  # 'graph', 'cap' or 'side'
    edge_distance: np.ndarray  # approximate distance to the chart edge along the sphere


def _surface_normal(domain, theta, radius_fn, grad_log, outward_sign):
    radius = radius_fn(theta)
    partials = np.concatenate([np.ones(theta.shape[:-1] + (1,)), -radius[..., None] * grad_log], axis=-1)
    grad = gradient_cartesian(radius, theta, partials)
    grad = grad / np.linalg.norm(grad, axis=-1, keepdims=True)
    return radius, outward_sign * grad


def boundary_samples(domain: StarDomain, count: int = 24) -> BoundarySamples:
    """Sample graph, cap and side faces with analytic outward normals."""
    n = domain.dim_n
    theta = domain.dense_theta(count)
    pts, nrm, rad, th, piece = [], [], [], [], []

    grad_log_f = domain.log_f.gradient(theta)
    grad_log_graph = -grad_log_f if domain.inverted else grad_log_f
    # graph: inner (outward = -grad(r - f)) unless inverted, where it is outer
    sign = 1.0 if domain.inverted else -1.0
    radius, normal = _surface_normal(domain, theta, domain.graph_radius, grad_log_graph, sign)
    pts.append(to_cartesian(radius, theta)); nrm.append(normal); rad.append(radius); th.append(theta)
    piece += ["graph"] * len(theta)

    radius, normal = _surface_normal(domain, theta, domain.cap_radius, np.zeros_like(theta), -sign)
    pts.append(to_cartesian(radius, theta)); nrm.append(normal); rad.append(radius); th.append(theta)
    piece += ["cap"] * len(theta)

    fractions = np.linspace(0.0, 1.0, count)
    for j in range(n):
        other = [np.linspace(a, b, count) for k, (a, b) in enumerate(domain.theta_box) if k != j]
        for end, outward in ((domain.theta_box[j][0], -1.0), (domain.theta_box[j][1], 1.0)):
            mesh = np.meshgrid(*other, fractions, indexing="ij") if other else np.meshgrid(fractions, indexing="ij")
            frac = mesh[-1].ravel()
            face_theta = np.empty((frac.size, n))
            col = 0
            for k in range(n):
                if k == j:
                    face_theta[:, k] = end
                else:
                    face_theta[:, k] = mesh[col].ravel()
                    col += 1
            lo, hi = domain.inner_radius(face_theta), domain.outer_radius(face_theta)
            radius = lo + frac * (hi - lo)
            partials = np.zeros((frac.size, n + 1))
            partials[:, 1 + j] = 1.0
            grad = gradient_cartesian(radius, face_theta, partials)
            normal = outward * grad / np.linalg.norm(grad, axis=-1, keepdims=True)
            pts.append(to_cartesian(radius, face_theta)); nrm.append(normal)
            rad.append(radius); th.append(face_theta)
            piece += ["side"] * frac.size

    theta_all = np.concatenate(th)
    radius_all = np.concatenate(rad)
    metric = np.sqrt(sphere_metric(theta_all))
    to_edge = np.minimum(theta_all - domain.box_lower, domain.box_upper - theta_all) * metric
    return BoundarySamples(
        points=np.concatenate(pts),
        normals=np.concatenate(nrm),
        radius=radius_all,
        theta=theta_all,
        piece=np.array(piece),
        edge_distance=radius_all * np.min(to_edge, axis=-1),
    )


@dataclass(frozen=True)
class BoundaryMargins:
    tau_nu: float = 1e-8
    eps_Z: float | None = None
    U_dilation: float | None = None


@dataclass(frozen=True)
class BoundaryClassification:
    samples: BoundarySamples
    x_dot_nu: np.ndarray
    front_mask: np.ndarray
    back_mask: np.ndarray
    tangential_mask: np.ndarray
    U_mask: np.ndarray
    E_mask: np.ndarray
    eps_Z: float
    U_dilation: float
    weight_sign: int


def classify_boundary(domain: StarDomain, margins: BoundaryMargins | None = None,
                      weight_sign: int = 1, count: int = 24) -> BoundaryClassification:
    """Split the sampled boundary by the sign of ``x . nu``.

    For ``weight_sign = -1`` the roles of front and back are exchanged, which
    is the classification relevant for the weight ``-log r``.
    """
    margins = margins or BoundaryMargins()
    samples = boundary_samples(domain, count)
    pts = samples.points
    diam = float(np.max(np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1))) \
        if len(pts) <= 4000 else domain.diameter_estimate()
    eps_z = margins.eps_Z if margins.eps_Z is not None else 0.05 * diam
    dilation = margins.U_dilation if margins.U_dilation is not None else 0.05 * diam
    tau = margins.tau_nu

    x_dot_nu = weight_sign * np.einsum("ij,ij->i", pts, samples.normals)
    front = x_dot_nu <= tau
    back = x_dot_nu >= -tau
    tangential = front & back
    graph = samples.piece == "graph"
    e_mask = graph & (-x_dot_nu >= eps_z) & (samples.edge_distance >= eps_z)
    if not np.any(e_mask):
        raise EmptyE("margins leave no sample in E")
    tree = cKDTree(pts[front])
    dist, _ = tree.query(pts, k=1)
    u_mask = dist <= dilation
    return BoundaryClassification(samples, x_dot_nu, front, back, tangential, u_mask, e_mask,
                                  eps_z, dilation, weight_sign)
