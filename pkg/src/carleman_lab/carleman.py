"""Empirical sweeps of weighted a-priori estimates over the semiclassical parameter.

An estimate ``lhs(w) <= C rhs(L w)`` with an unspecified constant is tested
by recording the ratio ``lhs/rhs`` over a seeded family of compactly
supported test functions, for a decreasing list of h, and checking that the
largest ratio stays inside a band and does not blow up in log-log slope.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .discretization import Field, dual_norm, make_grid, norm
from .errors import ZeroRHS
from .geometry import LogRadius, StarDomain, make_star_domain
from .joperators import CutoffParams, compact_bump, split_frequencies
from .operators import OperatorSpec, apply_operator


@dataclass(frozen=True)
class Estimate:
    """Operator kind and the two sides of one estimate."""

    kind: str
    lhs_space: str
    lhs_eps_scaled: bool
    rhs_space: str
    model: bool = False
    magnetic: bool = False


ESTIMATES = {
    "dksu": Estimate("L_phi_eps", "H1", True, "L2"),
    "flat": Estimate("L_tilde_sigma", "H1", True, "L2"),
    "simple": Estimate("L_tilde_sigma", "L2", True, "Hm1", model=True),
    "spec": Estimate("L_phi_eps", "L2", True, "Hm1", magnetic=True),
    "main": Estimate("L_phi", "L2", False, "Hm1", magnetic=True),
}


def rng_for(seed: int, index: int) -> np.random.Generator:
    """Counter-based substream for job ``index``; independent of execution order."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(index,))))


# --------------------------------------------------------------------------
# test functions
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TestFunctionFamily:
    """Seeded products of radial and angular bumps with modulations ``e^{i k.x/h}``.

    Envelopes are drawn once per test index and do not depend on h, so the
    same test function is followed across the sweep.  ``margin`` is the
    fraction of each coordinate range kept free at both ends.
    """

    __test__ = False  # keep pytest from collecting this class

    count: int = 32
    seed: int = 0
    margin: float = 0.1
    max_frequency: float = 3.0
    width_range: tuple = (0.5, 0.9)

    def draw(self, index: int, dim_n: int = 2) -> dict:
        rng = rng_for(self.seed, index)
        centers = rng.uniform(-0.3, 0.3, size=dim_n + 1)
        widths = rng.uniform(*self.width_range, size=dim_n + 1)
        freqs = rng.uniform(-self.max_frequency, self.max_frequency, size=dim_n + 1)
        return {"centers": centers, "widths": widths, "frequencies": freqs}

    def generate(self, grid, index: int, r_support=None) -> Field:
        """Test function ``index`` on ``grid``, normalized in L^2."""
        params = self.draw(index, grid.dim_n)
        lo, hi = r_support or grid.r_range
        ranges = [(lo, hi)] + list(grid.chart_box)
        coords = grid.mesh()
        values = np.ones(grid.shape, dtype=complex)
        phase = 0.0
        for axis, ((a, b), x) in enumerate(zip(ranges, coords)):
            span = b - a
            inner_a, inner_b = a + self.margin * span, b - self.margin * span
            half = 0.5 * (inner_b - inner_a)
            mid = 0.5 * (inner_a + inner_b)
            radius = params["widths"][axis] * half
            center = mid + params["centers"][axis] * (half - radius)
            values = values * compact_bump(x, center, radius)
            phase = phase + params["frequencies"][axis] * x
        values = values * np.exp(1j * phase / grid.h)
        w = Field(values, grid)
        scale = norm(w)
        if scale == 0:
            raise ZeroRHS("test function vanishes on the grid")
        return Field(values / scale, grid, "compact")


# --------------------------------------------------------------------------
# ratios
# --------------------------------------------------------------------------

def carleman_ratio(spec: OperatorSpec, w: Field, dual_domain_mask=None, estimate: str = "main",
                   lhs_mask=None):
    """``(lhs, rhs, ratio)`` for one test function."""
    est = ESTIMATES[estimate]
    h = spec.grid.h
    lhs = h * norm(w, est.lhs_space, lhs_mask)
    if est.lhs_eps_scaled:
        lhs /= math.sqrt(spec.eps)
    image = apply_operator(spec, w)
    if est.rhs_space == "L2":
        rhs = norm(image, "L2", dual_domain_mask)
    else:
        rhs = dual_norm(image, est.rhs_space, dual_domain_mask)
    if not rhs > 0:
        raise ZeroRHS("operator annihilates the test function")
    return lhs, rhs, lhs / rhs


def split_ratio(spec: OperatorSpec, w: Field, params: CutoffParams):
    """Small and large frequency pieces of the model estimate.

    Returns ``(small, large)`` ratios of ``(h/sqrt(eps))||w_part||`` against
    ``||L w_part||_{H^-1} + h||w||``.
    """
    h = spec.grid.h
    out = []
    for part in split_frequencies(w, params):
        lhs = h / math.sqrt(spec.eps) * norm(part)
        rhs = dual_norm(apply_operator(spec, part), "Hm1") + h * norm(w)
        out.append(lhs / rhs)
    return tuple(out)


# --------------------------------------------------------------------------
# sweeps
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepConfig:
    """Everything a worker needs to rebuild one operator; kept picklable."""

    estimate: str
    f_spec: str = "const:1"
    r_max: float = 2.0
    theta_box: tuple | None = None
    dim_n: int = 2
    n_r: int = 48
    n_theta: int = 48
    weight_sign: int = 1
    W: object = None
    q: object = None
    K: float | None = None


def _radial_range(config: SweepConfig, domain: StarDomain):
    if config.weight_sign < 0:
        if not domain.log_f.is_constant:
            raise ValueError("the reversed weight is only supported on shells with constant f")
        f0 = float(np.exp(domain.log_f(np.zeros(domain.dim_n))))
        return 1.0 / config.r_max, 1.0 / f0
    f_max = float(np.max(domain.f(domain.dense_theta())))
    return 1.0, config.r_max / f_max


@lru_cache(maxsize=8)
def _build(config: SweepConfig, h: float, eps: float):
    domain = make_star_domain(config.f_spec, config.r_max, config.dim_n, config.theta_box)
    if config.weight_sign < 0:
        log_f = LogRadius()
    else:
        log_f = domain.log_f
    grid = make_grid(h, config.n_r, config.n_theta, _radial_range(config, domain), domain.theta_box, config.dim_n)
    est = ESTIMATES[config.estimate]
    K = config.K
    if est.model and K is None:
        K = float(log_f.K) if log_f.kind == "exp_linear" else 0.0
    spec = OperatorSpec(est.kind, grid, config.weight_sign, eps, W=config.W if est.magnetic else None,
                        q=config.q if est.magnetic else None, log_f=log_f, K=K, model=est.model,
                        magnetic=est.magnetic)
    return spec


def _run_job(job):
    config, family, h, eps, indices = job
    spec = _build(config, h, eps)
    rows = []
    for i in indices:
        w = family.generate(spec.grid, i)
        try:
            lhs, rhs, ratio = carleman_ratio(spec, w, estimate=config.estimate)
        except ZeroRHS:
            lhs, rhs, ratio = norm(w), 0.0, math.nan
        rows.append((config.estimate, h, eps, i, lhs, rhs, ratio))
    return rows


@dataclass
class SweepReport:
    rows: list
    band: float = 3.0
    slope_floor: float = -0.15

    @property
    def h_values(self) -> list:
        return sorted({row[1] for row in self.rows}, reverse=True)

    def max_ratio(self, eps: float | None = None) -> dict:
        out = {}
        for row in self.rows:
            if eps is not None and row[2] != eps:
                continue
            if math.isnan(row[6]):
                continue
            out[row[1]] = max(out.get(row[1], 0.0), row[6])
        return dict(sorted(out.items(), reverse=True))

    def slope(self, eps: float | None = None) -> float:
        maxima = self.max_ratio(eps)
        hs = np.array(list(maxima))
        if len(hs) < 2:
            return math.nan
        return float(np.polyfit(np.log(hs), np.log(list(maxima.values())), 1)[0])

    def growth(self, eps: float | None = None) -> float:
        """Max ratio at the smallest h over max ratio at the largest h."""
        maxima = self.max_ratio(eps)
        values = list(maxima.values())
        return values[-1] / values[0]

    def excluded(self) -> int:
        return sum(1 for row in self.rows if math.isnan(row[6]))

    def verdict(self, eps: float | None = None) -> bool:
        return self.growth(eps) <= self.band and self.slope(eps) >= self.slope_floor

    def to_csv_rows(self):
        header = ("estimate_id", "h", "eps", "test_id", "lhs", "rhs", "ratio")
        return [header] + [tuple(_fmt(v) for v in row) for row in self.rows]


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


class CarlemanSweep:
    """Estimator-style front end: configure, ``fit`` over an h list, read ``report_``.

    ``fit`` only evaluates ratios; there is nothing to predict afterwards.
    """

    def __init__(self, estimate: str = "main", eps: float = 0.25, f_spec: str = "const:1", r_max: float = 2.0,
                 theta_box=None, n_r: int = 48, n_theta: int = 48, weight_sign: int = 1, W=None, q=None,
                 K: float | None = None, band: float = 3.0, slope_floor: float = -0.15, workers: int = 1,
                 chunk: int = 8):
        if estimate not in ESTIMATES:
            raise ValueError(f"unknown estimate {estimate!r}; expected one of {sorted(ESTIMATES)}")
        self.estimate = estimate
        self.eps = eps
        self.f_spec = f_spec
        self.r_max = r_max
        self.theta_box = theta_box
        self.n_r = n_r
        self.n_theta = n_theta
        self.weight_sign = weight_sign
        self.W = W
        self.q = q
        self.K = K
        self.band = band
        self.slope_floor = slope_floor
        self.workers = workers
        self.chunk = chunk

    def get_params(self) -> dict:
        return dict(vars(self)) if not hasattr(self, "report_") else {
            k: v for k, v in vars(self).items() if not k.endswith("_")}

    def set_params(self, **params) -> "CarlemanSweep":
        for key, value in params.items():
            if not hasattr(self, key):
                raise ValueError(f"unknown parameter {key!r}")
            setattr(self, key, value)
        return self

    def _config(self) -> SweepConfig:
        box = None if self.theta_box is None else tuple(tuple(map(float, p)) for p in self.theta_box)
        return SweepConfig(self.estimate, self.f_spec, self.r_max, box, 2 if box is None else len(box),
                           self.n_r, self.n_theta, self.weight_sign, self.W, self.q, self.K)

    def fit(self, h_list, family: TestFunctionFamily | None = None, eps_list=None) -> "CarlemanSweep":
        family = family or TestFunctionFamily()
        h_list = [float(h) for h in h_list]
        if any(b >= a for a, b in zip(h_list, h_list[1:])):
            raise ValueError("h_list must be strictly decreasing")
        eps_values = [float(e) for e in (eps_list or [self.eps])]
        config = self._config()
        jobs = []
        for eps in eps_values:
            for h in h_list:
                for start in range(0, family.count, self.chunk):
                    jobs.append((config, family, h, eps, tuple(range(start, min(family.count, start + self.chunk)))))
        rows = []
        if self.workers > 1:
            with ProcessPoolExecutor(max_workers=self.workers) as pool:
                for part in pool.map(_run_job, jobs):
                    rows.extend(part)
        else:
            for job in jobs:
                rows.extend(_run_job(job))
        self.report_ = SweepReport(rows, self.band, self.slope_floor)
        return self


def sweep(estimate_id: str, domain=None, spec_options: dict | None = None,
          family: TestFunctionFamily | None = None, h_list=(0.4, 0.2, 0.1, 0.05), eps_list=(0.25,),
          workers: int = 1) -> SweepReport:
    """Functional wrapper around :class:`CarlemanSweep`."""
    options = dict(spec_options or {})
    if domain is not None:
        options.setdefault("r_max", domain.r_max)
        options.setdefault("theta_box", domain.theta_box)
    est = CarlemanSweep(estimate_id, eps=eps_list[0], workers=workers, **options)
    return est.fit(h_list, family, eps_list).report_
