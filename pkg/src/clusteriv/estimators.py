"""Estimator-style wrappers around the tests.

Each class stores its options in ``__init__`` and, once fitted to data,
tests hypotheses about ``beta`` and inverts the test into a confidence set::

    est = ClusterJackknifeAR(alpha=0.05).fit(X, y, Z=Z, clusters=g)
    est.test(0.0).reject
    est.confidence_set(grid=(-1, 1, 0.01)).intervals
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_consistent_length, check_is_fitted

from .data import ClusteredDesign, partial_out_controls, validate
from .inference import invert_confidence_set, run_test
from .jackknife import Estimator, KernelChoice


class _ClusterIVTest(BaseEstimator):
    method: str = ""

    def _options(self) -> dict:
        return {}

    def fit(self, X, y, *, Z, clusters, W=None):
        """Store the validated design.

        Parameters
        ----------
        X : array-like of shape (n, p)
            Endogenous regressors.
        y : array-like of shape (n,)
        Z : array-like of shape (n, k)
            Instruments.
        clusters : array-like of shape (n,)
            Cluster labels; rows are regrouped by label.
        W : array-like of shape (n, l), optional
            Exogenous controls. They are partialled out unless the
            many-controls kernel is selected.
        """
        X = check_array(X, ensure_2d=False)
        X = X[:, None] if X.ndim == 1 else X
        y = check_array(y, ensure_2d=False)
        Z = check_array(Z, ensure_2d=False)
        Z = Z[:, None] if Z.ndim == 1 else Z
        arrays = [X, y, Z, np.asarray(clusters)]
        if W is not None:
            W = check_array(W, ensure_2d=False)
            W = W[:, None] if W.ndim == 1 else W
            arrays.append(W)
        check_consistent_length(*arrays)
        design = ClusteredDesign.from_arrays(y, X, Z, list(clusters), W=W)
        self.validation_ = validate(design)
        if design.W is not None and self._options().get("kernel") != KernelChoice.MANY_CONTROLS:
            design = partial_out_controls(design)
        self.design_ = design
        self.n_features_in_ = X.shape[1]
        return self

    def test(self, beta):
        """Test ``H0: beta = beta``; returns a :class:`TestOutcome`."""
        check_is_fitted(self, "design_")
        return run_test(self.design_, beta, self.method, self.alpha, **self._options())

    def confidence_set(self, grid=(-2.0, 2.0, 0.005), refine=True):
        """Invert the test over ``grid = (lo, hi, step)``."""
        check_is_fitted(self, "design_")
        return invert_confidence_set(
            self.design_, self.method, self.alpha, grid, refine, **self._options()
        )


class ClusterAR(_ClusterIVTest):
    """AR test with cluster-robust weighting and chi-square critical values."""

    method = "cluster-ar"

    def __init__(self, alpha=0.05):
        self.alpha = alpha


class _Jackknife(_ClusterIVTest):
    def __init__(self, alpha=0.05, kernel="plain", estimator="plain"):
        self.alpha = alpha
        self.kernel = kernel
        self.estimator = estimator

    def _options(self):
        return {"kernel": KernelChoice(self.kernel), "estimator": Estimator(self.estimator)}


class ClusterJackknifeAR(_Jackknife):
    """Cluster jackknife AR test with the shifted chi-square critical value."""

    method = "clj-ar"


class ClusterJackknifeScore(_Jackknife):
    """Cluster jackknife score test."""

    method = "clj-score"


class ClusterManyInstrumentAR(_ClusterIVTest):
    """Cluster many-instrument AR test (needs ``k < G``)."""

    method = "clmi-ar"

    def __init__(self, alpha=0.05):
        self.alpha = alpha
