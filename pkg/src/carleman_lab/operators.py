"""Second-order operators of the estimate harness on flattened grids.

Every operator is stored in the normal form

    A_rr u_rr + sum_j A_rj u_rj + sum_j A_jj u_jj + c_r u_r + sum_j c_j u_j + c_0 u

with coefficient arrays precomputed on the grid.  Grid coordinates are the
flattened ones ``(rho, theta)`` with physical radius ``r = rho f(theta)``;
operators defined in physical space are expressed through the inverse
metric of that chart.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .discretization import Field, Grid, d_r, d_theta, norm
from .errors import GridMismatch, MissingCoefficients
from .geometry import LogRadius, jacobian, sphere_metric, to_cartesian

KINDS = ("L_Wq", "L_phi", "L_phi_eps", "L_tilde_phi_eps", "L_tilde_sigma")
_STEP = 1e-5


# --------------------------------------------------------------------------
# chart geometry
# --------------------------------------------------------------------------

def chart_metric(rho, theta, log_f: LogRadius):
    """Volume density and inverse metric of the flattened chart.

    Returns ``(sqrt_g, g_rr, g_rj, g_jj)`` where the last two are lists over
    angular axes; ``theta`` has a trailing axis of length n.
    """
    n = theta.shape[-1]
    f = np.exp(log_f(theta))
    slope = log_f.gradient(theta)
    g_sphere = sphere_metric(theta)
    inv_sphere = 1.0 / g_sphere
    sqrt_g = rho ** n * f ** (n + 1) * np.sqrt(np.prod(g_sphere, axis=-1))
    g_rr = (1.0 + np.sum(inv_sphere * slope ** 2, axis=-1)) / f ** 2
    g_rj = [-inv_sphere[..., j] * slope[..., j] / (rho * f ** 2) for j in range(n)]
    g_jj = [inv_sphere[..., j] / (rho ** 2 * f ** 2) for j in range(n)]
    return sqrt_g, g_rr, g_rj, g_jj


def chart_drift(rho, theta, log_f: LogRadius):
    """First-order Laplacian coefficients ``B^b = (1/sqrt g) d_a(sqrt g G^{ab})``."""
    n = theta.shape[-1]

    def densities(rho_, theta_):
        sqrt_g, g_rr, g_rj, g_jj = chart_metric(rho_, theta_, log_f)
        # column b=rho: entries (a=rho, a=j); column b=j: entries (a=rho, a=j)
        cols = [[sqrt_g * g_rr] + [sqrt_g * g_rj[j] for j in range(n)]]
        for b in range(n):
            col = [sqrt_g * g_rj[b]] + [sqrt_g * g_jj[b] if j == b else np.zeros_like(sqrt_g) for j in range(n)]
            cols.append(col)
        return sqrt_g, cols

    sqrt_g, _ = densities(rho, theta)
    plus, minus = densities(rho + _STEP, theta)[1], densities(rho - _STEP, theta)[1]
    drift = [(plus[b][0] - minus[b][0]) / (2 * _STEP) for b in range(n + 1)]
    for a in range(n):
        shift = np.zeros(n)
        shift[a] = _STEP
        plus = densities(rho, theta + shift)[1]
        minus = densities(rho, theta - shift)[1]
        for b in range(n + 1):
            drift[b] = drift[b] + (plus[b][1 + a] - minus[b][1 + a]) / (2 * _STEP)
    return [d / sqrt_g for d in drift]


def chart_tangents(rho, theta, log_f: LogRadius):
    """Cartesian tangent vectors ``d x / d rho`` and ``d x / d theta_j``."""
    f = np.exp(log_f(theta))
    slope = log_f.gradient(theta)
    r = rho * f
    jac = jacobian(r, theta)
    d_rho = f[..., None] * jac[..., :, 0]
    d_theta_list = [jac[..., :, 1 + j] + (rho * f * slope[..., j])[..., None] * jac[..., :, 0]
                    for j in range(theta.shape[-1])]
    return d_rho, d_theta_list


# --------------------------------------------------------------------------
# operator specification
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class OperatorSpec:
    """Which conjugated operator to apply, with its coefficient data.

    ``eps=None`` means no convexification (the weight is ``+-log r``).
    ``W`` and ``q`` are Cartesian callables.  With ``magnetic`` (implied
    when W or q is given) the conjugated kinds act as
    ``h^2 e^{psi/h} L_{W,q} e^{-psi/h}``; otherwise they conjugate the
    Laplacian.  ``model=True`` replaces the sphere geometry of the
    ``L_tilde_sigma`` kind by ``a_j = 1, b_j = 0, beta = K e_n, gamma = K``.
    """

    kind: str
    grid: Grid
    weight_sign: int = 1
    eps: float | None = None
    W: object = None
    q: object = None
    log_f: LogRadius = field(default_factory=LogRadius)
    K: float | None = None
    model: bool = False
    theta_scheme: str = "fd"
    magnetic: bool | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown operator kind {self.kind!r}")
        if self.weight_sign not in (1, -1):
            raise ValueError("weight_sign must be +1 or -1")
        if self.eps is not None and self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.kind == "L_phi_eps" and self.eps is None:
            raise MissingCoefficients("L_phi_eps needs eps")
        if self.model and self.K is None:
            raise MissingCoefficients("model mode needs the drift constant K")
        if self.theta_scheme not in ("fd", "spectral"):
            raise ValueError("theta_scheme must be 'fd' or 'spectral'")
        if self.magnetic is None:
            object.__setattr__(self, "magnetic", self.W is not None or self.q is not None)
        object.__setattr__(self, "_coeffs", _assemble(self))

    @property
    def coefficients(self) -> dict:
        return self._coeffs

    @property
    def budgets(self) -> dict:
        """Deviation of the exact sphere geometry from the model coefficients."""
        return self._coeffs.get("budgets", {})

    def with_h(self, h: float) -> "OperatorSpec":
        return OperatorSpec(self.kind, self.grid.with_h(h), self.weight_sign, self.eps, self.W, self.q,
                            self.log_f, self.K, self.model, self.theta_scheme, self.magnetic)


def _coordinates(grid: Grid):
    rho = grid.r_nodes.reshape((-1,) + (1,) * grid.dim_n)
    theta = grid.theta_stack()[None]
    rho_b = rho * np.ones(grid.shape)
    theta_b = np.broadcast_to(theta, grid.shape + (grid.dim_n,))
    return rho_b, theta_b


def _weight_alpha(spec: OperatorSpec, rho, theta):
    """``alpha = s + (h/eps) log(rho f)``; equals ``s`` without convexification."""
    base = float(spec.weight_sign)
    if spec.eps is None:
        return np.full(rho.shape, base)
    return base + (spec.grid.h / spec.eps) * (np.log(rho) + spec.log_f(theta))


def _assemble(spec: OperatorSpec) -> dict:
    grid, h, n = spec.grid, spec.grid.h, spec.grid.dim_n
    rho, theta = _coordinates(grid)
    zero = np.zeros(grid.shape, dtype=complex)
    coeffs = {"rr": zero.copy(), "rj": [zero.copy() for _ in range(n)], "jj": [zero.copy() for _ in range(n)],
              "r": zero.copy(), "j": [zero.copy() for _ in range(n)], "0": zero.copy()}

    if spec.kind in ("L_tilde_phi_eps", "L_tilde_sigma"):
        alpha = _weight_alpha(spec, rho, theta)
        slope = spec.log_f.gradient(theta)
        inv_sphere = 1.0 / sphere_metric(theta)
        beta_exact = inv_sphere * slope
        gamma_exact = np.sqrt(np.sum(inv_sphere * slope ** 2, axis=-1))
        a_exact = inv_sphere
        b_exact = np.zeros_like(inv_sphere)
        for j in range(n - 1):
            b_exact[..., j] = inv_sphere[..., j] * (n - 1 - j) / np.tan(theta[..., j])
        if spec.kind == "L_tilde_sigma" and spec.model:
            beta = np.zeros_like(beta_exact)
            beta[..., -1] = spec.K
            gamma = np.full(rho.shape, float(spec.K))
            a_coef, b_coef = np.ones_like(a_exact), np.zeros_like(b_exact)
            coeffs["budgets"] = {
                "a": float(np.max(np.abs(a_exact - 1.0))),
                "beta": float(np.max(np.linalg.norm(beta_exact - beta, axis=-1))),
                "gamma": float(np.max(np.abs(gamma_exact - spec.K))),
            }
        else:
            beta, gamma, a_coef, b_coef = beta_exact, gamma_exact, a_exact, b_exact
        coeffs["rr"] += h ** 2 * (1.0 + gamma ** 2)
        coeffs["r"] += -2.0 * h * alpha / rho
        for j in range(n):
            coeffs["rj"][j] += -2.0 * h ** 2 * beta[..., j] / rho
            coeffs["jj"][j] += h ** 2 * a_coef[..., j] / rho ** 2
            coeffs["j"][j] += h ** 2 * b_coef[..., j] / rho ** 2
        coeffs["0"] += alpha ** 2 / rho ** 2
        coeffs.update(alpha=alpha, beta=beta, gamma=gamma, a=a_coef, b=b_coef)
        return coeffs

    sqrt_g, g_rr, g_rj, g_jj = chart_metric(rho, theta, spec.log_f)
    drift = chart_drift(rho, theta, spec.log_f)
    # h^2 Laplacian
    lap = {"rr": h ** 2 * g_rr, "rj": [2 * h ** 2 * g for g in g_rj], "jj": [h ** 2 * g for g in g_jj],
           "r": h ** 2 * drift[0], "j": [h ** 2 * d for d in drift[1:]]}
    r_phys = rho * np.exp(spec.log_f(theta))

    if spec.kind in ("L_phi", "L_phi_eps"):
        s = spec.weight_sign
        phi = s * np.log(r_phys)
        grad_phi = [s / rho] + [s * spec.log_f.gradient(theta)[..., j] for j in range(n)]
        grad_sq = 1.0 / r_phys ** 2
        lap_phi = s * (n - 1) / r_phys ** 2
        if spec.eps is not None:
            scale = 1.0 + h * phi / spec.eps
            grad_w = [scale * g for g in grad_phi]
            lap_w = scale * lap_phi + (h / spec.eps) * grad_sq
            grad_w_sq = scale ** 2 * grad_sq
        else:
            grad_w, lap_w, grad_w_sq = grad_phi, lap_phi, grad_sq
        # contravariant gradient of the weight
        up_r = g_rr * grad_w[0] + sum(g_rj[j] * grad_w[1 + j] for j in range(n))
        up_j = [g_rj[j] * grad_w[0] + g_jj[j] * grad_w[1 + j] for j in range(n)]
        conj = {"rr": lap["rr"], "rj": lap["rj"], "jj": lap["jj"],
                "r": lap["r"] - 2 * h * up_r, "j": [lap["j"][j] - 2 * h * up_j[j] for j in range(n)],
                "0": -h * lap_w + grad_w_sq}
        sign = -1.0 if spec.magnetic else 1.0
        coeffs["rr"] += sign * conj["rr"]
        coeffs["r"] += sign * conj["r"]
        coeffs["0"] += sign * conj["0"]
        for j in range(n):
            coeffs["rj"][j] += sign * conj["rj"][j]
            coeffs["jj"][j] += sign * conj["jj"][j]
            coeffs["j"][j] += sign * conj["j"][j]
        if spec.magnetic:
            w_up, div_w, w_sq, q = _potential_terms(spec, rho, theta, g_rr, g_rj, g_jj)
            coeffs["r"] += -2j * h ** 2 * w_up[0]
            for j in range(n):
                coeffs["j"][j] += -2j * h ** 2 * w_up[1 + j]
            w_dot_grad = sum(w_up[a] * grad_w[a] for a in range(n + 1))
            coeffs["0"] += 2j * h * w_dot_grad - 1j * h ** 2 * div_w + h ** 2 * (w_sq + q)
        coeffs.update(weight_gradient=grad_w)
        return coeffs

    # L_Wq in semiclassical scaling: -h^2 Laplacian plus magnetic terms
    coeffs["rr"] -= lap["rr"]
    coeffs["r"] -= lap["r"]
    for j in range(n):
        coeffs["rj"][j] -= lap["rj"][j]
        coeffs["jj"][j] -= lap["jj"][j]
        coeffs["j"][j] -= lap["j"][j]
    w_up, div_w, w_sq, q = _potential_terms(spec, rho, theta, g_rr, g_rj, g_jj)
    coeffs["r"] += -2j * h ** 2 * w_up[0]
    for j in range(n):
        coeffs["j"][j] += -2j * h ** 2 * w_up[1 + j]
    coeffs["0"] += -1j * h ** 2 * div_w + h ** 2 * (w_sq + q)
    return coeffs


def _potential_terms(spec, rho, theta, g_rr, g_rj, g_jj):
    from .potentials import divergence

    n = theta.shape[-1]
    r_phys = rho * np.exp(spec.log_f(theta))
    x = to_cartesian(r_phys, theta)
    sqrt_g = chart_metric(rho, theta, spec.log_f)[0]
    if spec.W is not None:
        w = np.asarray(spec.W, dtype=float) if isinstance(spec.W, np.ndarray) else spec.W(x)
        if w.shape != x.shape:
            raise GridMismatch("vector potential samples do not match the grid")
        t_rho, t_theta = chart_tangents(rho, theta, spec.log_f)
        w_low = [np.sum(w * t_rho, axis=-1)] + [np.sum(w * t, axis=-1) for t in t_theta]
        w_up = [g_rr * w_low[0] + sum(g_rj[j] * w_low[1 + j] for j in range(n))]
        w_up += [g_rj[j] * w_low[0] + g_jj[j] * w_low[1 + j] for j in range(n)]
        if isinstance(spec.W, np.ndarray):
            # chart divergence of sampled fields: (1/sqrt g) d_a (sqrt g W^a)
            div_w = d_r(sqrt_g * w_up[0], spec.grid, 1)
            for j in range(n):
                div_w = div_w + _theta_derivative(sqrt_g * w_up[1 + j], spec.grid, j, 1, spec.theta_scheme)
            div_w = np.real(div_w) / sqrt_g
        else:
            div_w = divergence(spec.W, x)
        w_sq = np.sum(w ** 2, axis=-1)
    else:
        w_up = [np.zeros(rho.shape)] * (n + 1)
        div_w = np.zeros(rho.shape)
        w_sq = np.zeros(rho.shape)
    if spec.q is None:
        q = np.zeros(rho.shape)
    else:
        q = np.asarray(spec.q, dtype=complex) if isinstance(spec.q, np.ndarray) else spec.q(x)
        if q.shape != rho.shape:
            raise GridMismatch("potential samples do not match the grid")
    if not np.all(np.isfinite(q)):
        raise ValueError("q must be bounded")
    return w_up, div_w, w_sq, q


# --------------------------------------------------------------------------
# application
# --------------------------------------------------------------------------

def _theta_derivative(u, grid: Grid, axis: int, order: int, scheme: str):
    if scheme == "spectral":
        return d_theta(u, grid, axis, order)
    step = grid.dtheta[axis]
    ax = axis + 1
    plus, minus = np.roll(u, -1, axis=ax), np.roll(u, 1, axis=ax)
    if order == 1:
        return (plus - minus) / (2 * step)
    return (plus - 2 * u + minus) / step ** 2


def apply_samples(spec: OperatorSpec, u: np.ndarray) -> np.ndarray:
    """Apply the assembled operator to raw samples on ``spec.grid``."""
    grid, c = spec.grid, spec.coefficients
    u = np.asarray(u, dtype=complex)
    out = c["rr"] * d_r(u, grid, 2) + c["r"] * d_r(u, grid, 1) + c["0"] * u
    for j in range(grid.dim_n):
        du = _theta_derivative(u, grid, j, 1, spec.theta_scheme)
        out += c["j"][j] * du + c["jj"][j] * _theta_derivative(u, grid, j, 2, spec.theta_scheme)
        if np.any(c["rj"][j]):
            out += c["rj"][j] * d_r(du, grid, 1)
    return out


def apply_operator(spec: OperatorSpec, field: Field) -> Field:
    """Second-order accurate application of the selected operator."""
    if not spec.grid.compatible(field.grid):
        raise GridMismatch("field grid differs from the operator grid")
    return Field(apply_samples(spec, field.samples), field.grid)


def conjugation_residual(plain: OperatorSpec, convex: OperatorSpec, field: Field) -> float:
    """Relative defect of ``e^{phi^2/2eps} L_phi e^{-phi^2/2eps} = L_{phi,eps}``.

    ``plain`` is the unconvexified conjugation and ``convex`` carries eps;
    the result is normalized by the semiclassical H^2 norm of the field.
    """
    if not plain.grid.compatible(convex.grid) or convex.eps is None:
        raise GridMismatch("specs must share the grid and the convex one needs eps")
    u = field.samples
    u_norm = norm(field, "H2")
    if u_norm == 0:
        return 0.0
    rho, theta = _coordinates(plain.grid)
    phi = plain.weight_sign * (np.log(rho) + plain.log_f(theta))
    factor = np.exp(phi ** 2 / (2 * convex.eps))
    lhs = factor * apply_samples(plain, u / factor)
    rhs = apply_samples(convex, u)
    return norm(Field(lhs - rhs, field.grid), "L2") / u_norm


def flattening_defect(physical: OperatorSpec, flattened: OperatorSpec, field: Field) -> float:
    """``|| L w - f^{-2} Ltilde w ||_{L2} / (h ||w||_{H1})`` for the pair of chart forms.

    ``physical`` is the ``L_phi_eps`` kind and ``flattened`` the
    ``L_tilde_phi_eps`` kind on the same flattened grid; the quotient is the
    size of the first-order error operator and should stay bounded as h
    decreases.
    """
    if not physical.grid.compatible(flattened.grid):
        raise GridMismatch("specs must share the grid")
    rho, theta = _coordinates(physical.grid)
    f_sq = np.exp(2 * flattened.log_f(theta))
    diff = apply_samples(physical, field.samples) - apply_samples(flattened, field.samples) / f_sq
    w_norm = norm(field, "H1")
    if w_norm == 0:
        return 0.0
    return norm(Field(diff, field.grid), "L2") / (physical.grid.h * w_norm)
