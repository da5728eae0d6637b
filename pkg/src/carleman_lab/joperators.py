"""Frequency-split calculus for the small/large frequency argument.

Symbols depend on the angular dual variable ``xi``; most of them only through
``|xi|^2`` and ``xi_n``, which keeps dense verification sweeps two
dimensional.  Radial operators act per frequency on the r-profiles of the
angular Fourier transform.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .discretization import (Field, Grid, d_r, dual_norm, norm, panel_running_integral, theta_fourier)
from .errors import (BranchCutOnSupport, DeltaInfeasible, InconsistentThresholds, MissingCoefficients,
                     QuadratureDivergence)

_MOLLIFIER_NODES = 48
_CHUNK = 256


# --------------------------------------------------------------------------
# smooth transitions
# --------------------------------------------------------------------------

def smoothstep(t):
    """Septic C^3 step: 0 for t <= 0, 1 for t >= 1."""
    t = np.clip(t, 0.0, 1.0)
    return t ** 4 * (35.0 - 84.0 * t + 70.0 * t ** 2 - 20.0 * t ** 3)


def transition(x, start: float, stop: float):
    """1 for ``x <= start``, 0 for ``x >= stop``, smooth in between."""
    return 1.0 - smoothstep((np.asarray(x, dtype=float) - start) / (stop - start))


def smooth_floor(x, level: float, width: float):
    """Identity above ``level + width``, constant ``level + width/2`` below ``level``.

    Built from the antiderivative of :func:`smoothstep`, so it is C^4 and
    nondecreasing.
    """
    t = np.clip((np.asarray(x, dtype=float) - level) / width, 0.0, 1.0)
    integral = t ** 5 * (7.0 - 14.0 * t + 10.0 * t ** 2 - 2.5 * t ** 3)
    inside = level + width * (0.5 + integral)
    return np.where(x >= level + width, x, np.where(x <= level, level + 0.5 * width, inside))


# --------------------------------------------------------------------------
# parameters and symbols
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CutoffParams:
    """Thresholds of the frequency split.

    Unset radii are derived from ``K`` and the smoothing tolerance ``delta``
    so that every consistency condition holds.  ``r0``/``d0`` are the inner
    thresholds of the large-frequency cutoff.
    """

    K: float = 0.0
    r1: float | None = None
    r2: float | None = None
    d1: float = 0.05
    d2: float = 0.1
    delta: float = 0.05
    r0: float | None = None
    d0: float | None = None
    profile: str = "septic"

    def __post_init__(self):
        K2 = self.K ** 2
        floor_sq = K2 / (1 + K2)
        if self.r2 is None:
            if self.K == 0:
                r2 = min(self.d2, 0.5)
            else:
                slack = min(self.d2, (0.9 * self.delta * (1 + K2)) ** 2)
                r2 = min((K2 + slack) / (1 + K2), 0.5 + 0.5 * floor_sq)
            object.__setattr__(self, "r2", r2)
        if self.r1 is None:
            object.__setattr__(self, "r1", 0.5 * (floor_sq + self.r2))
        if self.r0 is None:
            object.__setattr__(self, "r0", 0.5 * (floor_sq + self.r1))
        if self.d0 is None:
            object.__setattr__(self, "d0", 0.5 * self.d1)
        self.validate()

    @property
    def cut_radius_sq(self) -> float:
        """``K^2/(1+K^2)``: the cut of the imaginary branch starts at this |xi|^2."""
        return self.K ** 2 / (1 + self.K ** 2)

    def validate(self) -> None:
        K2 = self.K ** 2
        problems = []
        if not (self.cut_radius_sq < self.r0 < self.r1 < self.r2 <= 0.5 + 0.5 * self.cut_radius_sq):
            problems.append("need K^2/(1+K^2) < r0 < r1 < r2 <= 1/2 + K^2/(2(1+K^2))")
        if not (0 < self.d0 < self.d1 < self.d2):
            problems.append("need 0 < d0 < d1 < d2")
        if (1 + K2) * self.r2 - K2 > self.d2 + 1e-15:
            problems.append("need (1+K^2) r2 - K^2 <= d2")
        if self.delta <= 0:
            problems.append("delta must be positive")
        if self.profile != "septic":
            problems.append("only the septic transition profile is available")
        if problems:
            raise InconsistentThresholds("; ".join(problems))

    def get_params(self) -> dict:
        return {k: getattr(self, k) for k in ("K", "r0", "r1", "r2", "d0", "d1", "d2", "delta", "profile")}


def _split_xi(xi):
    """Accept a stacked array ``(..., n)`` or a list of component arrays."""
    if isinstance(xi, (list, tuple)):
        comps = [np.asarray(c, dtype=float) for c in xi]
    else:
        xi = np.asarray(xi, dtype=float)
        comps = [xi[..., j] for j in range(xi.shape[-1])] if xi.ndim else [xi]
    sq = sum(c ** 2 for c in comps)
    return comps, sq, comps[-1]


@dataclass(frozen=True, eq=False)
class SymbolFn:
    """A Fourier multiplier in the angular variables.

    ``func(xi_components, r, theta)`` returns values broadcast over the
    inputs; ``r`` and ``theta`` are only passed for symbols flagged as
    depending on them.  Calling the object evaluates at stacked ``xi``.
    """

    func: object
    order: int = 0
    name: str = "symbol"
    meta: dict = field(default_factory=dict)
    r_dependent: bool = False
    theta_dependent: bool = False

    def __call__(self, xi, r=None, theta=None):
        comps, _, _ = _split_xi(xi)
        return self.func(comps, r, theta)

    def get_params(self) -> dict:
        return {"name": self.name, "order": self.order, **self.meta}

    def lattice(self, grid: Grid) -> np.ndarray:
        """Values on the dual lattice of ``grid`` (FFT order).

        The shape is the xi mesh, prefixed by the radial axis for
        r-dependent symbols.  theta-dependent symbols are not reducible to a
        lattice array; use :meth:`transform`.
        """
        if self.theta_dependent:
            raise ValueError("theta-dependent symbols have no single lattice array")
        mesh = list(grid.xi_mesh())
        if self.r_dependent:
            r = grid.r_nodes.reshape((-1,) + (1,) * grid.dim_n)
            mesh = [m[None] for m in mesh]
            return np.broadcast_to(self.func(mesh, r, None), grid.shape)
        return np.broadcast_to(self.func(mesh, None, None), grid.shape[1:])

    def transform(self, fld: Field) -> Field:
        """Kohn-Nirenberg quantization ``T_a`` applied to a field."""
        grid = fld.grid
        u_hat = theta_fourier(fld).samples
        if not self.theta_dependent:
            return theta_fourier(_spectral(u_hat * self.lattice(grid), grid), "inverse")
        return Field(_dense_quantization(self, u_hat, grid), grid)


def _spectral(samples, grid):
    from .discretization import SpectralField

    return SpectralField(samples, grid)


def _dense_quantization(symbol: SymbolFn, u_hat: np.ndarray, grid: Grid) -> np.ndarray:
    """Direct sum over the lattice; cost grows like (grid size) x (lattice size)."""
    n = grid.dim_n
    r = grid.r_nodes.reshape((-1,) + (1,) * n)
    theta = grid.theta_stack()
    mesh = list(grid.xi_mesh())
    scale = (2 * np.pi * grid.h) ** (-n / 2) * grid.dxi
    out = np.zeros(grid.shape, dtype=complex)
    for index in np.ndindex(*grid.shape[1:]):
        xi_k = [float(np.asarray(mesh[j]).reshape(-1)[index[j]]) for j in range(n)]
        phase = np.exp(1j * sum(theta[..., j] * xi_k[j] for j in range(n)) / grid.h)
        values = symbol.func([np.full(theta.shape[:-1], x) for x in xi_k], r, theta[None])
        out += values * phase[None] * u_hat[(slice(None),) + index].reshape((-1,) + (1,) * n)
    return out * scale


# --------------------------------------------------------------------------
# the symbol F and its smoothed versions
# --------------------------------------------------------------------------

def tau_K(xi, K: float):
    """``2iK xi_n - (K xi_n)^2 + (1+K^2)|xi|^2 - K^2``."""
    _, sq, xn = _split_xi(xi)
    return _tau(sq, xn, K)


def _tau(sq, xn, K):
    return 2j * K * xn - (K * xn) ** 2 + (1 + K ** 2) * sq - K ** 2


def _root(tau, branch):
    root = np.sqrt(np.asarray(tau, dtype=complex))
    if branch == "imag":
        root = np.where(root.imag < 0, -root, root)
    elif branch != "real":
        raise ValueError("branch must be 'imag' or 'real'")
    return root


def _F(sq, xn, K, branch):
    root = _root(_tau(sq, xn, K), branch)
    return np.conj((1 + 1j * K * xn + root) / (1 + K ** 2))


def eval_F(xi, K: float, branch: str = "imag"):
    """Symbol F with the selected square-root branch.

    ``conj(F)`` is a root of ``(1+K^2) X^2 - 2(1+iK xi_n) X + 1 - |xi|^2``.
    Returns a Python complex for a single dual vector.
    """
    _, sq, xn = _split_xi(xi)
    out = _F(sq, xn, K, branch)
    return complex(out) if np.ndim(out) == 0 else out


def quadratic_residual(xi, K: float, value):
    """``(1+K^2) X^2 - 2(1+iK xi_n) X + 1 - |xi|^2`` at ``X = conj(value)``."""
    _, sq, xn = _split_xi(xi)
    x = np.conj(value)
    return (1 + K ** 2) * x ** 2 - 2 * (1 + 1j * K * xn) * x + 1 - sq


def _mollify(values_fn, sq, xn, width):
    """Average ``values_fn`` over ``xi_n`` shifts with a compact bump kernel."""
    nodes, weights = np.polynomial.legendre.leggauss(_MOLLIFIER_NODES)
    kernel = weights * np.exp(-1.0 / (1.0 - nodes ** 2))
    kernel = kernel / kernel.sum()
    base = sq - xn ** 2
    total = 0.0
    for t, w in zip(nodes, kernel):
        shifted = xn - width * t
        total = total + w * values_fn(base + shifted ** 2, shifted)
    return total


def make_cutoff(params: CutoffParams) -> SymbolFn:
    """``rho = 1`` where ``|xi|^2 <= r1`` and ``|xi_n| <= d1``; 0 if either exceeds r2, d2."""
    params.validate()

    def rho(comps, r, theta):
        _, sq, xn = _split_xi(comps)
        return transition(sq, params.r1, params.r2) * transition(np.abs(xn), params.d1, params.d2)

    return SymbolFn(rho, 0, "rho", params.get_params())


def make_large_cutoff(params: CutoffParams) -> SymbolFn:
    """``zeta``: 1 where ``|xi|^2 >= r1`` or ``|xi_n| >= d1``; 0 inside ``r0, d0``."""

    def zeta(comps, r, theta):
        _, sq, xn = _split_xi(comps)
        return 1.0 - transition(sq, params.r0, params.r1) * transition(np.abs(xn), params.d0, params.d1)

    return SymbolFn(zeta, 0, "zeta", params.get_params())


def split_frequencies(fld: Field, params: CutoffParams):
    """``(w_s, w_l)`` with ``w_s = T_rho w`` and ``w_l = w - w_s``."""
    small = make_cutoff(params).transform(fld)
    return small, fld.like(fld.samples - small.samples)


def _lower_level(K):
    return 0.5 / (1 + K ** 2), 0.05 / (1 + K ** 2)


def _floor_real(values, K):
    level, width = _lower_level(K)
    return smooth_floor(values.real, level, width) + 1j * values.imag


def _small_values(sq, xn, params: CutoffParams, width: float):
    K = params.K
    if K == 0:
        return _F(sq, xn, K, "imag")
    exact_imag = _F(sq, xn, K, "imag")
    moll = _mollify(lambda s, x: _F(s, x, K, "imag"), sq, xn, width)
    near_cut = transition(np.abs(xn), 2 * width, 3 * width)
    inner = near_cut * moll + (1 - near_cut) * exact_imag
    margin_r, margin_d = 0.25 * (params.r2 - params.r1), 0.25 * (params.d2 - params.d1)
    wide = (transition(sq, params.r2 + margin_r, params.r2 + 2 * margin_r)
            * transition(np.abs(xn), params.d2 + margin_d, params.d2 + 2 * margin_d))
    out = wide * inner + (1 - wide) * _F(sq, xn, K, "real")
    return _floor_real(out, K)


def _check_delta(params: CutoffParams, width: float, samples: int = 241) -> float:
    """Largest ``|F_s - F|`` on a dense (|xi'|, xi_n) sweep of supp rho."""
    radial = np.sqrt(np.linspace(0.0, params.r2, samples))
    tiny = 1e-9
    normal = np.unique(np.concatenate([np.linspace(-params.d2, params.d2, 2 * samples + 1), [-tiny, tiny]]))
    rad, xn = np.meshgrid(radial, normal, indexing="ij")
    sq = rad ** 2 + xn ** 2
    rho = transition(sq, params.r1, params.r2) * transition(np.abs(xn), params.d1, params.d2)
    diff = np.abs(_small_values(sq, xn, params, width) - _F(sq, xn, params.K, "imag"))
    return float(np.max(diff[rho > 0], initial=0.0))


def smooth_F(branch: str, K: float, params: CutoffParams | None = None, delta: float | None = None) -> SymbolFn:
    """Smoothed symbol ``F_s`` (``branch='imag'``) or ``F_l`` (``branch='real'``).

    ``F_s`` mollifies the imaginary branch across its cut near the small
    frequencies and hands over to the real branch away from ``supp rho``;
    ``F_l`` keeps the real branch exactly off ``supp rho`` and mollifies it
    across its own cut inside.  Both have their real part floored at
    ``1/(2(1+K^2))``.
    """
    if params is None:
        params = CutoffParams(K=K, delta=delta if delta is not None else 0.05)
    if params.K != K:
        raise InconsistentThresholds("cutoff parameters were built for a different K")
    delta = params.delta if delta is None else delta
    if delta <= 0:
        raise DeltaInfeasible("delta must be positive")
    if branch == "imag":
        if K == 0:
            width, error = 0.0, 0.0
        else:
            width = min(params.d1 / 4, (0.9 * delta * (1 + K ** 2)) ** 2 / (8 * abs(K)))
            for _ in range(8):
                error = _check_delta(params, width)
                if error <= delta:
                    break
                width *= 0.5
            else:
                raise DeltaInfeasible(f"max |F_s - F| on supp rho is {error:.3g} > delta={delta}")

        def values(comps, r, theta):
            _, sq, xn = _split_xi(comps)
            return _small_values(sq, xn, params, width)

        meta = {"delta": delta, "branch": "imag", "width": width, "max_error": error, **params.get_params()}
        return SymbolFn(values, 1, "F_s", meta)
    if branch == "real":
        width = params.d0 / 4

        def values(comps, r, theta):
            _, sq, xn = _split_xi(comps)
            return _large_values(sq, xn, params, width)

        return SymbolFn(values, 1, "F_l", {"delta": delta, "branch": "real", "width": width, **params.get_params()})
    raise ValueError("branch must be 'imag' or 'real'")


def _large_values(sq, xn, params: CutoffParams, width: float):
    K = params.K
    exact = _F(sq, xn, K, "real")
    if K == 0:
        return exact
    inner = transition(sq, params.r0, 0.5 * (params.r0 + params.r1)) * transition(
        np.abs(xn), params.d0, 0.5 * (params.d0 + params.d1))
    moll = _mollify(lambda s, x: _F(s, x, K, "real"), sq, xn, width)
    blended = _floor_real(inner * moll + (1 - inner) * exact, K)
    return np.where(inner == 0, exact, blended)


# --------------------------------------------------------------------------
# J operators
# --------------------------------------------------------------------------

def _symbol_lattice(symbol, grid: Grid) -> np.ndarray:
    values = symbol.lattice(grid) if isinstance(symbol, SymbolFn) else np.broadcast_to(
        np.asarray(symbol, dtype=complex), grid.shape[1:])
    if values.shape != grid.shape[1:]:
        raise ValueError("J operators need symbols independent of r and theta")
    return np.asarray(values, dtype=complex)


def _profile_chunks(size: int):
    for start in range(0, size, _CHUNK):
        yield slice(start, min(size, start + _CHUNK))


def _forward_integral(profiles, F, grid: Grid):
    """``h^{-1} int_1^r u(t) (t/r)^{F/h} dt`` for profiles (N, m) and symbols (m,)."""
    r, h = grid.r_nodes, grid.h
    out = np.zeros_like(profiles)
    expo = F / h
    if grid.r_scheme == "panels":
        d = grid.panel_degree
        carry = np.zeros(profiles.shape[1], dtype=complex)
        for p in range((len(r) - 1) // d):
            sl = slice(p * d, (p + 1) * d + 1)
            a, nodes = r[p * d], r[sl]
            local = profiles[sl] * (nodes[:, None] / a) ** expo[None]
            running = panel_running_integral(local, nodes, d) / h
            out[sl] = (a / nodes[:, None]) ** expo[None] * (carry[None] + running)
            carry = out[sl][-1]
        return out
    for i in range(1, len(r)):
        ratio = (r[i - 1] / r[i]) ** expo
        cell = 0.5 * (r[i] - r[i - 1]) / h * (profiles[i - 1] * ratio + profiles[i])
        out[i] = ratio * out[i - 1] + cell
    return out


def _backward_integral(profiles, Fbar, grid: Grid):
    """``h^{-1} int_r^R u(t) (r/t)^{Fbar/h} dt``."""
    r, h = grid.r_nodes, grid.h
    out = np.zeros_like(profiles)
    expo = Fbar / h
    if grid.r_scheme == "panels":
        d = grid.panel_degree
        carry = np.zeros(profiles.shape[1], dtype=complex)
        for p in reversed(range((len(r) - 1) // d)):
            sl = slice(p * d, (p + 1) * d + 1)
            b, nodes = r[(p + 1) * d], r[sl]
            local = profiles[sl] * (b / nodes[:, None]) ** expo[None]
            running = panel_running_integral(local, nodes, d) / h
            tail = running[-1][None] - running
            out[sl] = (nodes[:, None] / b) ** expo[None] * (carry[None] + tail)
            carry = out[sl][0]
        return out
    for i in range(len(r) - 2, -1, -1):
        ratio = (r[i] / r[i + 1]) ** expo
        cell = 0.5 * (r[i + 1] - r[i]) / h * (profiles[i + 1] * ratio + profiles[i])
        out[i] = ratio * out[i + 1] + cell
    return out


def _check_positive(F, what="symbol"):
    if np.any(F.real <= 0):
        raise QuadratureDivergence(f"{what} has nonpositive real part; the radial integral diverges")


def apply_J(kind: str, symbol, fld: Field) -> Field:
    """``J = F/r + h d_r``, its adjoint ``Fbar/r - h d_r`` and their integral inverses."""
    if kind not in ("J", "Jstar", "Jinv", "JstarInv"):
        raise ValueError(f"unknown J kind {kind!r}")
    grid = fld.grid
    F = _symbol_lattice(symbol, grid)
    u_hat = theta_fourier(fld).samples
    r = grid.r_nodes.reshape((-1,) + (1,) * grid.dim_n)
    h = grid.h
    if kind == "J":
        out = F[None] / r * u_hat + h * d_r(u_hat, grid, 1)
    elif kind == "Jstar":
        out = np.conj(F)[None] / r * u_hat - h * d_r(u_hat, grid, 1)
    else:
        _check_positive(F)
        flat = u_hat.reshape(len(grid.r_nodes), -1)
        symbols = F.reshape(-1)
        result = np.empty_like(flat)
        for sl in _profile_chunks(flat.shape[1]):
            if kind == "Jinv":
                result[:, sl] = _forward_integral(flat[:, sl], symbols[sl], grid)
            else:
                result[:, sl] = _backward_integral(flat[:, sl], np.conj(symbols[sl]), grid)
        out = result.reshape(u_hat.shape)
    return theta_fourier(_spectral(out, grid), "inverse")


def g_correction(fld: Field, symbol) -> Field:
    """Component of ``u`` along the kernel profile ``r^{-F/h}`` of J, per frequency.

    ``g_hat = ((2 Re F - h)/h) r^{-F/h} int_1^R u_hat(t) t^{-Fbar/h} dt``,
    the L^2(1, infinity) projection of each profile onto the kernel.
    """
    grid = fld.grid
    F = _symbol_lattice(symbol, grid)
    h = grid.h
    if np.any(2 * F.real <= h):
        raise QuadratureDivergence("2 Re F <= h: the kernel profile is not square integrable")
    u_hat = theta_fourier(fld).samples
    r = grid.r_nodes.reshape((-1,) + (1,) * grid.dim_n)
    w = grid.r_weights.reshape(r.shape)
    expo = F[None] / h
    log_r = np.log(r)
    coeff = np.sum(w * u_hat * np.exp(-np.conj(expo) * log_r), axis=0)
    g_hat = ((2 * F.real - h) / h)[None] * np.exp(-expo * log_r) * coeff[None]
    return theta_fourier(_spectral(g_hat, grid), "inverse")


def equivalence_ratio(fld: Field, symbol) -> float:
    """``||J u||_{H^-1_r} / ||u - g||_{L^2}``; bounded above and below in h."""
    g = g_correction(fld, symbol)
    denom = norm(fld.like(fld.samples - g.samples), "L2")
    numer = dual_norm(apply_J("J", symbol, fld), "Hm1r")
    return numer / denom if denom > 0 else float("inf")


def jinv_closed_form(r, power: float, F: complex, h: float):
    """``J^{-1}[r^a]`` for a single frequency: ``(r^{a+1} - r^{-F/h}) / (h(a+1) + F)``."""
    r = np.asarray(r, dtype=float)
    return (r ** (power + 1) - r ** (-F / h)) / (h * (power + 1) + F)


# --------------------------------------------------------------------------
# factorization of the flattened operator
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FactorSymbols:
    G_plus: SymbolFn
    G_minus: SymbolFn
    G_s: SymbolFn
    zeta: SymbolFn
    params: CutoffParams
    sign_convention: str = "alpha^2 + L_sym with L_sym = -sum a_j xi_j^2 + i h b_j xi_j"


def _factor_coefficients(spec, grid):
    """alpha(r, theta), beta (n vectors), gamma, a_j, b_j as broadcastable arrays."""
    coeffs = spec.coefficients
    n = grid.dim_n
    alpha = coeffs["alpha"].real
    beta = [coeffs["beta"][..., j] for j in range(n)]
    gamma = coeffs["gamma"]
    a = [coeffs["a"][..., j] for j in range(n)]
    b = [coeffs["b"][..., j] for j in range(n)]
    return alpha, beta, gamma, a, b


def _is_theta_constant(arr) -> bool:
    arr = np.asarray(arr)
    if arr.ndim <= 1:
        return True
    return bool(np.allclose(arr, arr[(slice(None),) + (slice(0, 1),) * (arr.ndim - 1)], rtol=0, atol=1e-14))


def factor_symbols(spec, zeta_params: CutoffParams) -> FactorSymbols:
    """Symbols ``G_+/-`` splitting the flattened operator into two first-order factors.

    ``G_+/- = zeta (alpha + i beta.xi +/- sqrt(D)) / (1+gamma^2) + (1-zeta) F_l`` with
    ``D = (alpha + i beta.xi)^2 - (1+gamma^2)(alpha^2 + L_sym)``, using the
    principal root (nonnegative real part).
    """
    if spec.kind not in ("L_tilde_sigma", "L_tilde_phi_eps"):
        raise MissingCoefficients("factorization needs a flattened operator spec")
    grid, h = spec.grid, spec.grid.h
    alpha, beta, gamma, a, b = _factor_coefficients(spec, grid)
    theta_dep = not all(_is_theta_constant(c) for c in [alpha, gamma] + beta + a + b)
    r_dep = not np.allclose(alpha, alpha.reshape(-1)[0])
    zeta = make_large_cutoff(zeta_params)
    F_l = smooth_F("real", zeta_params.K, zeta_params)

    def pick(arr, r, theta):
        # reduce the grid arrays to what the caller broadcasts against
        arr = np.asarray(arr)
        if theta_dep:
            return arr
        row = arr[(slice(None),) + (0,) * grid.dim_n]
        if r is None:
            return row[0]
        return row.reshape((-1,) + (1,) * grid.dim_n)

    def pieces(comps, r, theta):
        al = pick(alpha, r, theta)
        ga = pick(gamma, r, theta)
        bxi = sum(pick(beta[j], r, theta) * comps[j] for j in range(grid.dim_n))
        lsym = sum(-pick(a[j], r, theta) * comps[j] ** 2 + 1j * h * pick(b[j], r, theta) * comps[j]
                   for j in range(grid.dim_n))
        lead = al + 1j * bxi
        disc = lead ** 2 - (1 + ga ** 2) * (al ** 2 + lsym)
        return lead, disc, ga

    def make(sign):
        def values(comps, r, theta):
            lead, disc, ga = pieces(comps, r, theta)
            z = zeta.func(comps, r, theta)
            root = np.sqrt(np.asarray(disc, dtype=complex))
            return z * (lead + sign * root) / (1 + ga ** 2) + (1 - z) * F_l.func(comps, r, theta)
        return values

    # branch-cut guard on the lattice (and the r/theta samples of the coefficients)
    mesh = list(grid.xi_mesh())
    if theta_dep:
        lead, disc, _ = _pieces_dense(alpha, beta, gamma, a, b, grid, h)
        z = zeta.func(mesh, None, None)
    else:
        r_arg = grid.r_nodes.reshape((-1,) + (1,) * grid.dim_n) if r_dep else None
        cm = [m[None] for m in mesh] if r_dep else mesh
        lead, disc, _ = pieces(cm, r_arg, None)
        z = zeta.func(cm, r_arg, None)
    disc = np.asarray(disc, dtype=complex)
    z_b = np.broadcast_to(z, np.broadcast_shapes(np.shape(z), disc.shape))
    on_cut = (np.abs(disc.imag) <= 1e-12 * (1 + np.abs(disc))) & (disc.real <= 0)
    if np.any(on_cut & (z_b > 0)):
        raise BranchCutOnSupport("square-root argument meets the negative axis on supp zeta")

    meta = {"r_dependent": r_dep, "theta_dependent": theta_dep}
    plus = SymbolFn(make(1.0), 1, "G_plus", meta, r_dependent=r_dep or theta_dep, theta_dependent=theta_dep)
    minus = SymbolFn(make(-1.0), 1, "G_minus", meta, r_dependent=r_dep or theta_dep, theta_dependent=theta_dep)

    def g_small(comps, r, theta):
        return (1 - zeta.func(comps, r, theta)) * F_l.func(comps, r, theta)

    return FactorSymbols(plus, minus, SymbolFn(g_small, 1, "G_s"), zeta, zeta_params)


def _pieces_dense(alpha, beta, gamma, a, b, grid, h):
    """Coefficients on the full (r, theta) grid against every lattice point."""
    n = grid.dim_n
    mesh = [m.reshape((1,) * (1 + n) + m.shape) for m in grid.xi_mesh()]
    expand = (Ellipsis,) + (None,) * n
    al, ga = alpha[expand], gamma[expand]
    bxi = sum(beta[j][expand] * mesh[j] for j in range(n))
    lsym = sum(-a[j][expand] * mesh[j] ** 2 + 1j * h * b[j][expand] * mesh[j] for j in range(n))
    lead = al + 1j * bxi
    return lead, lead ** 2 - (1 + ga ** 2) * (al ** 2 + lsym), ga


def apply_factored(factors: FactorSymbols, gamma: float, fld: Field) -> Field:
    """``(h d_r - T_{G+}/r)(1+gamma^2)(h d_r - T_{G-}/r)`` applied to a field."""
    grid = fld.grid
    r = grid.r_nodes.reshape((-1,) + (1,) * grid.dim_n)
    h = grid.h
    inner = h * d_r(fld.samples, grid, 1) - factors.G_minus.transform(fld).samples / r
    inner = (1 + gamma ** 2) * inner
    mid = fld.like(inner)
    outer = h * d_r(inner, grid, 1) - factors.G_plus.transform(mid).samples / r
    return fld.like(outer)


def vieta_residual(factors: FactorSymbols, spec, xi, r=None) -> float:
    """Max deviation of ``(1+g^2) G+ G-`` and ``(1+g^2)(G+ + G-)`` from the quadratic's coefficients.

    Evaluated where ``zeta = 1``; the spec must have theta-constant coefficients.
    """
    comps, sq, xn = _split_xi(xi)
    alpha, beta, gamma, a, b = _factor_coefficients(spec, spec.grid)
    n = spec.grid.dim_n
    first = (0,) * (1 + n)
    al, ga = float(alpha[first]), float(np.real(gamma[first]))
    bxi = sum(float(np.real(beta[j][first])) * comps[j] for j in range(n))
    lsym = sum(-float(np.real(a[j][first])) * comps[j] ** 2 + 1j * spec.grid.h * float(np.real(b[j][first])) * comps[j]
               for j in range(n))
    gp = factors.G_plus.func(comps, r, None)
    gm = factors.G_minus.func(comps, r, None)
    z = factors.zeta.func(comps, r, None)
    mask = z >= 1.0
    prod = (1 + ga ** 2) * gp * gm - (al ** 2 + lsym)
    total = (1 + ga ** 2) * (gp + gm) - 2 * (al + 1j * bxi)
    return float(max(np.max(np.abs(prod[mask]), initial=0.0), np.max(np.abs(total[mask]), initial=0.0)))


# --------------------------------------------------------------------------
# verification suite
# --------------------------------------------------------------------------

def compact_bump(x, center: float, radius: float):
    """``exp(1 - 1/(1 - s^2))`` for ``|s| < 1`` with ``s = (x - center)/radius``, else 0."""
    s = (np.asarray(x, dtype=float) - center) / radius
    inside = np.abs(s) < 1
    out = np.zeros(s.shape)
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - s[inside] ** 2))
    return out


def random_compact_field(grid: Grid, rng: np.random.Generator, max_frequency: float = 3.0) -> Field:
    """Smooth bump in (r, theta), compactly inside the grid, with random modulation."""
    r0, r1 = grid.r_range
    span = r1 - r0
    center = rng.uniform(r0 + 0.35 * span, r0 + 0.65 * span)
    radius = rng.uniform(0.15, 0.3) * span
    rr, *thetas = grid.mesh()
    values = compact_bump(rr, center, radius).astype(complex)
    phase = rng.uniform(-max_frequency, max_frequency) * rr
    for axis, th in enumerate(thetas):
        lo, hi = grid.chart_box[axis]
        mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
        values = values * compact_bump(th, mid + rng.uniform(-0.2, 0.2) * half, rng.uniform(0.5, 0.75) * half)
        phase = phase + rng.uniform(-max_frequency, max_frequency) * th
    return Field(values * np.exp(1j * phase / grid.h), grid, "compact")


def factorization_grid(h: float, xi_step: float = 0.6, panels: int = 32, degree: int = 16, n_theta: int = 32):
    """Panel grid whose angular period puts ``xi_step`` on the dual lattice for h = 0.2 / 2^k."""
    from .discretization import make_grid

    period = 2 * np.pi * 0.2 / xi_step
    half = 0.5 * 0.8 * period
    box = ((np.pi / 2 - half, np.pi / 2 + half),) * 2
    return make_grid(h, n_theta=n_theta, theta_box=box, r_scheme="panels", panels=panels, degree=degree)


def factorization_residual(K: float, h: float, xi0=(0.6, 0.6), radial_frequency: float = 0.5,
                           params: CutoffParams | None = None) -> float:
    """``||factored(v) - Ltilde v|| / ||v||_{H1}`` for ``v = psi(r) e^{i(k r + theta.xi0)/h}``."""
    from .operators import OperatorSpec, apply_operator

    params = params or CutoffParams(K=K)
    grid = factorization_grid(h)
    rr, th1, th2 = grid.mesh()
    v = Field(compact_bump(rr, 1.5, 0.4) * np.exp(1j * (radial_frequency * rr + xi0[0] * th1 + xi0[1] * th2) / h),
              grid)
    spec = OperatorSpec("L_tilde_sigma", grid, model=True, K=K, theta_scheme="spectral")
    factors = factor_symbols(spec, params)
    diff = apply_factored(factors, K, v).samples - apply_operator(spec, v).samples
    return norm(v.like(diff), "L2") / norm(v, "H1")


def loglog_slope(hs, values) -> float:
    return float(np.polyfit(np.log(np.asarray(hs, float)), np.log(np.asarray(values, float)), 1)[0])


def _lattice_points(params: CutoffParams, count: int = 201, extent: float = 3.0):
    axis = np.linspace(-extent, extent, count)
    a, b = np.meshgrid(axis, axis, indexing="ij")
    return np.stack([a, b], axis=-1)


def joperator_checks(K: float = 0.0, h: float = 0.1, params: CutoffParams | None = None,
                     delta: float = 0.05, seed: int = 0, fields: int = 8):
    """Rows ``(check_name, h, value, bound, pass)`` for the symbol and J calculus."""
    from .discretization import make_grid

    params = params or CutoffParams(K=K, delta=delta)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    rows = []

    def add(name, value, bound, upper=True):
        ok = bool(value <= bound) if upper else bool(value >= bound)
        rows.append((name, h, float(value), float(bound), ok))

    xi = _lattice_points(params)
    for branch in ("imag", "real"):
        add(f"root_residual_{branch}", np.max(np.abs(quadratic_residual(xi, K, eval_F(xi, K, branch)))), 1e-12)
    F_s = smooth_F("imag", K, params)
    F_l = smooth_F("real", K, params)
    add("delta_bound", _check_delta(params, F_s.meta["width"]) if K else 0.0, delta)
    rho = make_cutoff(params)(xi)
    outside = rho < 1
    add("F_l_exact_off_rho", np.max(np.abs(F_l(xi)[outside] - eval_F(xi[outside], K, "real")), initial=0.0), 0.0)
    level = 0.5 / (1 + K ** 2)
    add("F_s_lower_bound", np.min(F_s(xi).real), level, upper=False)
    add("F_l_lower_bound", np.min(F_l(xi).real), level, upper=False)
    if K != 0:
        sq = np.linspace(params.cut_radius_sq + 0.01, 4.0, 17)
        pts_up = np.stack([np.sqrt(sq), np.full_like(sq, 1e-300)], -1)
        pts_dn = np.stack([np.sqrt(sq), np.full_like(sq, -1e-300)], -1)
        jump = np.abs(eval_F(pts_up, K) - eval_F(pts_dn, K))
        expected = 2 * np.sqrt((1 + K ** 2) * sq - K ** 2) / (1 + K ** 2)
        add("branch_jump", np.max(np.abs(jump - expected)), 1e-10)

    grid = make_grid(h, n_theta=16, r_scheme="panels", panels=64, degree=16)
    worst = {"J_Jinv": 0.0, "Jstar_JstarInv": 0.0, "JstarInv_Jstar": 0.0, "kernel": 0.0, "g_norm": -np.inf}
    for _ in range(fields):
        u = random_compact_field(grid, rng)
        base = norm(u)
        for name, (outer, inner) in {"J_Jinv": ("J", "Jinv"), "Jstar_JstarInv": ("Jstar", "JstarInv"),
                                     "JstarInv_Jstar": ("JstarInv", "Jstar")}.items():
            out = apply_J(outer, F_s, apply_J(inner, F_s, u))
            worst[name] = max(worst[name], norm(u.like(out.samples - u.samples)) / base)
        g = g_correction(u, F_s)
        worst["g_norm"] = max(worst["g_norm"], norm(g) - base)
        worst["kernel"] = max(worst["kernel"], norm(apply_J("J", F_s, g)) / max(norm(g), 1e-300))
    for name in ("J_Jinv", "Jstar_JstarInv", "JstarInv_Jstar"):
        add(name, worst[name], 1e-8)
    add("g_norm_excess", worst["g_norm"], 1e-12)
    add("g_kernel", worst["kernel"], 1e-8)
    r = grid.r_nodes
    closed = jinv_closed_form(r, 1.5, 1.0, h)
    profile = np.broadcast_to((r ** 1.5)[:, None, None], grid.shape).astype(complex)
    numeric = theta_fourier(apply_J("Jinv", 1.0, theta_fourier(_spectral(profile, grid), "inverse"))).samples
    add("jinv_closed_form", np.max(np.abs(numeric - closed[:, None, None])), 1e-10)
    add("factorization_residual", factorization_residual(K, h), 10 * h)
    return rows
