import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from clusteriv.data import ClusteredDesign
from clusteriv.estimators import (
    ClusterAR, ClusterJackknifeAR, ClusterJackknifeScore, ClusterManyInstrumentAR,
)
from clusteriv.inference import run_test


def make_data(rng, n=90, G=30):
    g = rng.integers(0, G, size=n)
    g[:G] = np.arange(G)
    Z = rng.standard_normal((n, 3))
    x = Z @ [1.0, 0.5, 0.0] + rng.standard_normal(n)
    y = 0.5 * x + rng.standard_normal(n)
    return x, y, Z, g


@pytest.mark.parametrize(
    "cls, method",
    [(ClusterAR, "cluster-ar"), (ClusterJackknifeAR, "clj-ar"),
     (ClusterJackknifeScore, "clj-score"), (ClusterManyInstrumentAR, "clmi-ar")],
)
def test_wrappers_match_functional_api(rng, cls, method):
    x, y, Z, g = make_data(rng)
    est = cls(alpha=0.1).fit(x, y, Z=Z, clusters=g)
    d = ClusteredDesign.from_arrays(y, x, Z, list(g))
    assert est.test(0.2).statistic == pytest.approx(run_test(d, [0.2], method, 0.1).statistic)
    assert clone(est).get_params() == est.get_params()


def test_params_and_unfitted(rng):
    est = ClusterJackknifeAR(kernel="symmetric", estimator="cross-fit")
    assert est.get_params() == {"alpha": 0.05, "kernel": "symmetric", "estimator": "cross-fit"}
    with pytest.raises(NotFittedError):
        est.test(0.0)


def test_controls_partialled_or_kept(rng):
    x, y, Z, g = make_data(rng)
    W = rng.standard_normal((len(y), 2))
    plain = ClusterJackknifeAR().fit(x, y, Z=Z, clusters=g, W=W)
    assert plain.design_.controls_partialled and plain.design_.W is None
    many = ClusterJackknifeAR(kernel="many-controls").fit(x, y, Z=Z, clusters=g, W=W)
    assert many.design_.W is not None
    assert np.isfinite(many.test(0.5).statistic)


def test_fit_validation(rng):
    x, y, Z, g = make_data(rng)
    with pytest.raises(ValueError):
        ClusterAR().fit(x[:-1], y, Z=Z, clusters=g)
    y_bad = y.copy()
    y_bad[0] = np.nan
    with pytest.raises(ValueError):
        ClusterAR().fit(x, y_bad, Z=Z, clusters=g)


def test_confidence_set_contains_truth(rng):
    x, y, Z, g = make_data(rng, n=300, G=60)
    cs = ClusterJackknifeAR().fit(x, y, Z=Z, clusters=g).confidence_set(grid=(-1, 2, 0.05))
    assert cs.contains(0.5)
