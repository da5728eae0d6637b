import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from carleman_lab.carleman import (ESTIMATES, CarlemanSweep, SweepReport, TestFunctionFamily,
                                   carleman_ratio, rng_for, split_ratio, sweep)
from carleman_lab.discretization import Field, make_grid, norm
from carleman_lab.errors import ZeroRHS
from carleman_lab.joperators import CutoffParams
from carleman_lab.operators import OperatorSpec

SMALL = dict(n_r=20, n_theta=16)


@pytest.fixture(scope="module")
def grid():
    return make_grid(0.2, n_r=24, n_theta=16)


def test_rng_substreams_are_reproducible_and_distinct():
    a = rng_for(3, 5).standard_normal(4)
    assert np.array_equal(a, rng_for(3, 5).standard_normal(4))
    assert not np.array_equal(a, rng_for(3, 6).standard_normal(4))
    assert not np.array_equal(a, rng_for(4, 5).standard_normal(4))


def test_family_members_are_normalized_and_vanish_at_edges(grid):
    family = TestFunctionFamily(count=4, seed=1)
    for i in range(family.count):
        w = family.generate(grid, i)
        assert norm(w) == pytest.approx(1.0)
        assert np.max(np.abs(w.samples[[0, -1]])) == 0.0
        assert np.max(np.abs(w.samples[:, [0, -1]])) == 0.0
    env_a = np.abs(family.generate(grid, 2).samples)
    other = make_grid(0.1, n_r=24, n_theta=16)
    env_b = np.abs(family.generate(other, 2).samples)
    np.testing.assert_allclose(env_a, env_b, atol=1e-12)


def test_zero_test_function_raises(grid):
    spec = OperatorSpec("L_phi_eps", grid, eps=0.25)
    with pytest.raises(ZeroRHS):
        carleman_ratio(spec, Field(np.zeros(grid.shape), grid), estimate="dksu")


@settings(max_examples=10, deadline=None)
@given(st.floats(0.1, 10), st.floats(0, 2 * math.pi), st.sampled_from(sorted(ESTIMATES)))
def test_ratio_is_scale_invariant(scale, angle, estimate):
    grid = make_grid(0.2, n_r=16, n_theta=12)
    est = ESTIMATES[estimate]
    spec = OperatorSpec(est.kind, grid, eps=0.25, K=0.0 if est.model else None, model=est.model)
    w = TestFunctionFamily(count=1, seed=2).generate(grid, 0)
    base = carleman_ratio(spec, w, estimate=estimate)[2]
    scaled = carleman_ratio(spec, w.like(scale * np.exp(1j * angle) * w.samples), estimate=estimate)[2]
    assert scaled == pytest.approx(base, rel=1e-10)


def test_ratio_sides(grid):
    spec = OperatorSpec("L_phi_eps", grid, eps=0.25)
    w = TestFunctionFamily(count=1).generate(grid, 0)
    lhs, rhs, ratio = carleman_ratio(spec, w, estimate="dksu")
    assert lhs == pytest.approx(grid.h * norm(w, "H1") / 0.5)
    assert ratio == pytest.approx(lhs / rhs)


def test_split_ratio_positive(grid):
    spec = OperatorSpec("L_tilde_sigma", grid, eps=0.25, model=True, K=0.0)
    w = TestFunctionFamily(count=1).generate(grid, 0)
    small, large = split_ratio(spec, w, CutoffParams(K=0.0))
    assert small > 0 and large > 0


def test_small_sweep_is_bounded():
    est = CarlemanSweep("dksu", **SMALL).fit([0.4, 0.2, 0.1], TestFunctionFamily(count=4, seed=0))
    report = est.report_
    assert report.h_values == [0.4, 0.2, 0.1]
    assert len(report.rows) == 12 and report.excluded() == 0
    assert report.verdict()
    header, *rows = report.to_csv_rows()
    assert header[0] == "estimate_id" and len(rows) == 12


def test_sweep_is_deterministic_across_workers():
    family = TestFunctionFamily(count=4, seed=3)
    one = CarlemanSweep("simple", workers=1, chunk=2, **SMALL).fit([0.4, 0.2], family).report_.rows
    two = CarlemanSweep("simple", workers=2, chunk=2, **SMALL).fit([0.4, 0.2], family).report_.rows
    assert one == two


def test_functional_wrapper_matches_estimator():
    family = TestFunctionFamily(count=2, seed=4)
    report = sweep("flat", spec_options=SMALL, family=family, h_list=(0.4, 0.2))
    direct = CarlemanSweep("flat", **SMALL).fit([0.4, 0.2], family).report_
    assert report.rows == direct.rows


def test_report_statistics():
    rows = [("x", 0.4, 0.25, 0, 1.0, 1.0, 1.0), ("x", 0.2, 0.25, 0, 1.0, 1.0, 2.0),
            ("x", 0.2, 0.25, 1, 1.0, 0.0, math.nan)]
    report = SweepReport(rows)
    assert report.max_ratio() == {0.4: 1.0, 0.2: 2.0}
    assert report.growth() == pytest.approx(2.0)
    assert report.slope() == pytest.approx(-1.0)
    assert report.excluded() == 1
    assert not report.verdict()


def test_params_roundtrip():
    est = CarlemanSweep("main", eps=0.5)
    params = est.get_params()
    assert params["estimate"] == "main" and params["eps"] == 0.5
    est.set_params(eps=0.3)
    assert est.get_params()["eps"] == 0.3
    with pytest.raises(ValueError):
        est.set_params(bogus=1)
    with pytest.raises(ValueError):
        CarlemanSweep("nope")
    with pytest.raises(ValueError):
        est.fit([0.1, 0.2])
    est.set_params(**SMALL).fit([0.4], TestFunctionFamily(count=1))
    assert "report_" not in est.get_params()
