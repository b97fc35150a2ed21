import math

import mpmath
import numpy as np
import pytest

from clusteriv.data import ClusteredDesign
from clusteriv.exceptions import SingularMomentCovariance, UnsupportedDimension
from clusteriv.inference import (
    METHODS, ConfidenceSet, critical_value, invert_confidence_set, make_grid, run_test,
    shifted_chi2_pvalue,
)
from clusteriv.jackknife import variance_bundle, ar_statistic

from conftest import random_design


def chi2_quantile(k, q):
    """Independent chi-square quantile: solve the regularized lower gamma."""
    mpmath.mp.dps = 30
    f = lambda x: mpmath.gammainc(k / 2, 0, x / 2, regularized=True) - q
    return float(mpmath.findroot(f, k + math.sqrt(2 * k) * 1.6449))


@pytest.mark.parametrize("k", [1, 2, 5, 10, 100])
def test_critical_value_oracle(k):
    want = (chi2_quantile(k, 0.95) - k) / math.sqrt(2 * k)
    assert critical_value(k, 0.05) == pytest.approx(want, abs=1e-6)


def test_critical_value_normal_limit():
    assert abs(critical_value(10 ** 6, 0.05) - 1.6449) < 1e-2
    assert critical_value(1, 0.05) == pytest.approx((3.841458820694124 - 1) / math.sqrt(2))


def test_critical_value_checks():
    with pytest.raises(ValueError):
        critical_value(0, 0.05)
    with pytest.raises(ValueError):
        critical_value(3, 1.5)


@pytest.mark.parametrize("k", [1, 4, 30])
def test_pvalue_at_threshold_is_alpha(k):
    assert shifted_chi2_pvalue(critical_value(k, 0.1), k) == pytest.approx(0.1, rel=1e-10)
    assert shifted_chi2_pvalue(-1e6, k) == 1.0


@pytest.mark.parametrize("method", METHODS)
def test_run_test_outcome_fields(rng, method):
    d = random_design(rng, G=20, k=3, lo=2, hi=4)
    out = run_test(d, [1.0], method)
    assert out.method == method and out.k == 3 and out.G == 20
    assert 0 <= out.p_value <= 1
    assert out.reject == (out.p_value < out.alpha) or method == "clj-score"
    assert set(out.to_dict()) >= {"statistic", "threshold", "p_value", "reject", "beta"}


def test_clj_reject_matches_statistic(rng):
    d = random_design(rng, G=20, k=3)
    out = run_test(d, [-0.5], "clj-ar")
    t = ar_statistic(d, [-0.5]) / math.sqrt(variance_bundle(d, [-0.5]).v_ar)
    assert out.statistic == pytest.approx(t)
    assert out.reject == (t > critical_value(3, 0.05))


def test_score_multi_regressor_is_wald(rng):
    d = random_design(rng, G=20, k=4, p=2)
    out = run_test(d, [1.0, 1.0], "clj-score")
    assert out.statistic >= 0 and out.threshold == pytest.approx(5.991464547107979)


def test_unknown_method(rng):
    with pytest.raises(ValueError):
        run_test(random_design(rng), [0.0], "wald")


def test_cluster_ar_singular(rng):
    d = random_design(rng, G=3, k=4)
    with pytest.raises(SingularMomentCovariance):
        run_test(d, [0.0], "cluster-ar")


def test_make_grid():
    g = make_grid(-1, 1, 0.1)
    assert g.size == 21 and g[0] == -1 and g[-1] == 1
    assert make_grid(0, 1, 0.3)[-1] == 1
    with pytest.raises(ValueError):
        make_grid(1, 0, 0.1)


def strong_design(rng, beta=0.5, G=40):
    d = random_design(rng, G=G, k=2, lo=2, hi=3)
    x = d.Z @ [1.0, 1.0] + 0.3 * rng.standard_normal(d.n)
    y = beta * x + rng.standard_normal(d.n)
    return ClusteredDesign(y=y, X=x, Z=d.Z, blocks=d.blocks)


def test_confidence_set_matches_pointwise_tests(rng):
    d = strong_design(rng)
    cs = invert_confidence_set(d, "clj-ar", grid=(-1, 2, 0.05), refine=False)
    assert isinstance(cs, ConfidenceSet) and not cs.is_empty
    for pt in cs.points:
        assert pt["reject"] == run_test(d, [pt["beta"]], "clj-ar").reject
        assert cs.contains(pt["beta"]) != pt["reject"]


def test_confidence_set_refinement(rng):
    d = strong_design(rng)
    coarse = invert_confidence_set(d, "cluster-ar", grid=(-1, 2, 0.1), refine=False)
    fine = invert_confidence_set(d, "cluster-ar", grid=(-1, 2, 0.1), refine=True, tol=1e-6)
    (lo_c, hi_c), (lo_f, hi_f) = coarse.intervals[0], fine.intervals[0]
    assert lo_f <= lo_c and hi_f >= hi_c
    assert not run_test(d, [lo_f], "cluster-ar").reject
    assert run_test(d, [lo_f - 2e-6], "cluster-ar").reject
    assert not any(u for pair in fine.unbounded for u in pair)


def test_confidence_set_empty_and_unbounded(rng):
    d = strong_design(rng, beta=0.5)
    empty = invert_confidence_set(d, "cluster-ar", grid=(5, 6, 0.5))
    assert empty.is_empty and empty.to_dict()["empty"]
    wide = invert_confidence_set(d, "cluster-ar", grid=(0.45, 0.55, 0.05))
    assert wide.unbounded == [(True, True)]


def test_confidence_set_needs_scalar(rng):
    with pytest.raises(UnsupportedDimension):
        invert_confidence_set(random_design(rng, p=2))
