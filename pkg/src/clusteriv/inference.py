"""Hypothesis tests on the coefficients of the endogenous regressors.

The jackknife AR and many-instrument AR statistics are compared with the
shifted and scaled chi-square critical value ``(chi2_{k,1-a} - k) / sqrt(2k)``,
which matches chi-square calibration for small ``k`` and tends to the normal
quantile as ``k`` grows. All decisions use a strict inequality: a statistic
equal to the threshold does not reject.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.special
from scipy import stats

from .data import ClusteredDesign
from .exceptions import (
    ClusterIVError,
    SingularMomentCovariance,
    SingularScoreVariance,
    SingularWeight,
    UnsupportedDimension,
)
from .jackknife import (
    Estimator,
    KernelChoice,
    ar_statistic,
    score_statistic,
    variance_bundle,
)
from .miar import clmi_statistic, cluster_moments, moment_projection

METHODS = ("cluster-ar", "clj-ar", "clj-score", "clmi-ar")


def critical_value(k: int, alpha: float) -> float:
    """``(chi2_{k, 1-alpha} - k) / sqrt(2k)``."""
    if k < 1 or int(k) != k:
        raise ValueError(f"k must be a positive integer, got {k}.")
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}.")
    q = scipy.special.chdtri(k, alpha)
    return float((q - k) / math.sqrt(2 * k))


def shifted_chi2_pvalue(t: float, k: int) -> float:
    """Upper tail of ``chi2_k`` at ``k + sqrt(2k) t``."""
    x = k + math.sqrt(2 * k) * t
    if x <= 0:
        return 1.0
    return float(scipy.special.chdtrc(k, x))


@dataclass
class TestOutcome:
    """Result of one hypothesis test.

    ``p_value`` is the p-value on which the decision is based;
    ``p_value_normal`` is the standard normal upper tail of the statistic,
    reported for the jackknife and many-instrument AR tests only.
    """

    __test__ = False  # keep pytest from collecting this class

    method: str
    beta: list
    statistic: float
    threshold: float
    p_value: float
    reject: bool
    alpha: float
    k: int
    G: int
    n: int
    kernel: str | None = None
    estimator: str | None = None
    variance: float | None = None
    p_value_normal: float | None = None
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "method": self.method, "kernel": self.kernel, "estimator": self.estimator,
            "beta": list(self.beta), "statistic": self.statistic,
            "threshold": self.threshold, "p_value": self.p_value,
            "p_value_normal": self.p_value_normal, "reject": bool(self.reject),
            "alpha": self.alpha, "variance": self.variance,
            "k": self.k, "G": self.G, "n": self.n, "warnings": list(self.warnings),
        }


def _beta(design, beta):
    b = np.atleast_1d(np.asarray(beta, dtype=float))
    design.residuals(b)  # dimension check
    return [float(v) for v in b]


def _outcome(design, method, beta, alpha, **kw):
    return TestOutcome(
        method=method, beta=_beta(design, beta), alpha=alpha,
        k=design.k, G=design.G, n=design.n, **kw,
    )


def cluster_ar_test(design: ClusteredDesign, beta, alpha: float = 0.05) -> TestOutcome:
    """AR test with the cluster-robust covariance of the moments, against ``chi2_k``.

    The statistic is ``e'Z V^{-1} Z'e / n`` with ``V = sum_g Z_g'e_g e_g'Z_g / n``.

    Raises
    ------
    SingularMomentCovariance
        If ``V`` is singular, e.g. when ``k > G`` or all residuals vanish.
    """
    M = cluster_moments(design, beta)
    try:
        P = moment_projection(M)
    except SingularWeight as exc:
        raise SingularMomentCovariance(str(exc)) from None
    stat = float(P.sum())
    k = design.k
    threshold = float(scipy.special.chdtri(k, alpha))
    return _outcome(
        design, "cluster-ar", beta, alpha, statistic=stat, threshold=threshold,
        p_value=float(scipy.special.chdtrc(k, stat)), reject=stat > threshold,
    )


def clj_test(
    design: ClusteredDesign,
    beta,
    alpha: float = 0.05,
    choice=KernelChoice.PLAIN,
    estimator=Estimator.PLAIN,
) -> TestOutcome:
    """Cluster jackknife AR test.

    Rejects when ``AR / sqrt(V_AR)`` exceeds :func:`critical_value`. A variance
    estimate that is zero (after clamping a negative cross-fit value) gives a
    non-rejection with a warning.
    """
    choice = KernelChoice(choice)
    estimator = Estimator(estimator)
    k = design.k
    threshold = critical_value(k, alpha)
    ar = ar_statistic(design, beta, choice)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        bundle = variance_bundle(design, beta, choice, estimator, clamp=True)
    notes = []
    if bundle.v_ar <= 0:
        notes.append("AR variance estimate is zero; not rejecting.")
        t, p, pn, reject = 0.0, 1.0, 0.5, False
    else:
        t = ar / math.sqrt(bundle.v_ar)
        p = shifted_chi2_pvalue(t, k)
        pn = float(stats.norm.sf(t))
        reject = t > threshold
    if bundle.clamped:
        notes.insert(0, "Negative AR variance estimate clamped to zero.")
    return _outcome(
        design, "clj-ar", beta, alpha, kernel=choice.value, estimator=estimator.value,
        statistic=float(t), threshold=threshold, p_value=p, p_value_normal=pn,
        reject=bool(reject), variance=bundle.v_ar, warnings=notes,
    )


def clj_score_test(
    design: ClusteredDesign,
    beta,
    alpha: float = 0.05,
    choice=KernelChoice.PLAIN,
    estimator=Estimator.PLAIN,
) -> TestOutcome:
    """Cluster jackknife score test.

    With one regressor this is a two-sided normal test on ``S / sqrt(V_S)``;
    with several it is the Wald form ``S' V_S^{-1} S`` against ``chi2_p``.

    Raises
    ------
    SingularScoreVariance
    """
    choice = KernelChoice(choice)
    estimator = Estimator(estimator)
    S = score_statistic(design, beta, choice)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        bundle = variance_bundle(design, beta, choice, estimator, clamp=True)
    V = bundle.v_s
    p = design.p
    common = dict(kernel=choice.value, estimator=estimator.value)
    if p == 1:
        v = float(V[0, 0])
        if not v > 0:
            raise SingularScoreVariance("Score variance estimate is not positive.")
        t = float(S[0] / math.sqrt(v))
        threshold = float(stats.norm.isf(alpha / 2))
        return _outcome(
            design, "clj-score", beta, alpha, statistic=t, threshold=threshold,
            p_value=float(2 * stats.norm.sf(abs(t))), reject=abs(t) > threshold,
            variance=v, **common,
        )
    try:
        L = np.linalg.cholesky(V)
    except np.linalg.LinAlgError:
        raise SingularScoreVariance("Score variance estimate is not positive definite.") from None
    w = np.linalg.solve(L, S)
    stat = float(w @ w)
    threshold = float(scipy.special.chdtri(p, alpha))
    return _outcome(
        design, "clj-score", beta, alpha, statistic=stat, threshold=threshold,
        p_value=float(scipy.special.chdtrc(p, stat)), reject=stat > threshold, **common,
    )


def clmi_test(design: ClusteredDesign, beta, alpha: float = 0.05) -> TestOutcome:
    """Cluster many-instrument AR test with the shifted chi-square rule."""
    stat, variance = clmi_statistic(design, beta)
    k = design.k
    threshold = critical_value(k, alpha)
    return _outcome(
        design, "clmi-ar", beta, alpha, statistic=stat, threshold=threshold,
        p_value=shifted_chi2_pvalue(stat, k), p_value_normal=float(stats.norm.sf(stat)),
        reject=stat > threshold, variance=variance,
    )


def run_test(design, beta, method, alpha=0.05, kernel=KernelChoice.PLAIN,
             estimator=Estimator.PLAIN) -> TestOutcome:
    """Dispatch on a method name from :data:`METHODS`."""
    if method == "cluster-ar":
        return cluster_ar_test(design, beta, alpha)
    if method == "clj-ar":
        return clj_test(design, beta, alpha, kernel, estimator)
    if method == "clj-score":
        return clj_score_test(design, beta, alpha, kernel, estimator)
    if method == "clmi-ar":
        return clmi_test(design, beta, alpha)
    raise ValueError(f"Unknown method {method!r}; choose from {METHODS}.")


@dataclass
class ConfidenceSet:
    """Union of disjoint intervals of non-rejected values of a scalar ``beta``.

    Attributes
    ----------
    intervals : list of (float, float)
        Sorted, disjoint.
    unbounded : list of (bool, bool)
        Per interval, whether the lower / upper end hit the edge of the grid,
        so the true set may extend beyond it.
    grid : (lo, hi, step)
    points : list of dict
        Per grid point: ``beta``, ``statistic``, ``p_value``, ``reject``.
    """

    alpha: float
    method: str
    intervals: list
    unbounded: list
    grid: tuple
    refined: bool
    kernel: str | None = None
    estimator: str | None = None
    warnings: list = field(default_factory=list)
    points: list = field(default_factory=list, repr=False)

    @property
    def is_empty(self) -> bool:
        return not self.intervals

    def contains(self, beta: float) -> bool:
        return any(lo <= beta <= hi for lo, hi in self.intervals)

    def to_dict(self) -> dict:
        return {
            "method": self.method, "kernel": self.kernel, "estimator": self.estimator,
            "alpha": self.alpha,
            "intervals": [[lo, hi] for lo, hi in self.intervals],
            "unbounded": [{"lower": a, "upper": b} for a, b in self.unbounded],
            "grid": {"lo": self.grid[0], "hi": self.grid[1], "step": self.grid[2]},
            "refined": self.refined, "empty": self.is_empty,
            "warnings": list(self.warnings),
        }


def make_grid(lo: float, hi: float, step: float) -> np.ndarray:
    """Points ``lo, lo + step, ...`` up to and including ``hi`` (within rounding)."""
    if not hi > lo:
        raise ValueError(f"Need lo < hi, got {lo}, {hi}.")
    if not step > 0:
        raise ValueError(f"Need step > 0, got {step}.")
    m = int(math.floor((hi - lo) / step + 1e-9))
    pts = lo + step * np.arange(m + 1)
    if hi - pts[-1] > 1e-9 * max(1.0, abs(hi)):
        pts = np.append(pts, hi)
    return np.round(pts, 12)


def invert_confidence_set(
    design: ClusteredDesign,
    method: str = "clj-ar",
    alpha: float = 0.05,
    grid: tuple = (-2.0, 2.0, 0.005),
    refine: bool = True,
    kernel=KernelChoice.PLAIN,
    estimator=Estimator.PLAIN,
    tol: float = 1e-4,
) -> ConfidenceSet:
    """Confidence set for a scalar ``beta`` by inverting a test over a grid.

    Maximal runs of non-rejected grid points become intervals. With
    ``refine``, each interior boundary is bisected between the adjacent
    non-rejected and rejected grid points until the bracket is at most
    ``tol`` wide; the non-rejected end of the bracket is reported. A grid
    point where the test raises counts as rejected and adds a warning.

    Raises
    ------
    UnsupportedDimension
        If there is more than one endogenous regressor.
    """
    if design.p != 1:
        raise UnsupportedDimension("Confidence sets are only built for a scalar beta.")
    lo, hi, step = (float(v) for v in grid)
    pts = make_grid(lo, hi, step)
    notes = []

    def evaluate(b):
        try:
            out = run_test(design, [b], method, alpha, kernel, estimator)
        except (ClusterIVError, np.linalg.LinAlgError) as exc:
            notes.append(f"beta={b:.6g}: {type(exc).__name__}: {exc}")
            return None
        notes.extend(f"beta={b:.6g}: {w}" for w in out.warnings)
        return out

    points = []
    accept = np.zeros(pts.size, dtype=bool)
    for i, b in enumerate(pts):
        out = evaluate(float(b))
        accept[i] = out is not None and not out.reject
        points.append({
            "beta": float(b),
            "statistic": None if out is None else out.statistic,
            "p_value": None if out is None else out.p_value,
            "reject": not accept[i],
        })

    def bisect(inside, outside):
        while abs(outside - inside) > tol:
            mid = (inside + outside) / 2
            out = evaluate(mid)
            if out is not None and not out.reject:
                inside = mid
            else:
                outside = mid
        return inside

    intervals, unbounded = [], []
    i = 0
    while i < pts.size:
        if not accept[i]:
            i += 1
            continue
        j = i
        while j + 1 < pts.size and accept[j + 1]:
            j += 1
        a, b = float(pts[i]), float(pts[j])
        if refine and i > 0:
            a = bisect(a, float(pts[i - 1]))
        if refine and j < pts.size - 1:
            b = bisect(b, float(pts[j + 1]))
        intervals.append((a, b))
        unbounded.append((i == 0, j == pts.size - 1))
        i = j + 1
    if not intervals:
        notes.append("Empty confidence set: the test rejects at every grid point.")
    elif any(u for pair in unbounded for u in pair):
        notes.append("Confidence set reaches the edge of the grid; it may be unbounded.")
    return ConfidenceSet(
        alpha=alpha, method=method, intervals=intervals, unbounded=unbounded,
        grid=(lo, hi, step), refined=refine,
        kernel=KernelChoice(kernel).value if method in ("clj-ar", "clj-score") else None,
        estimator=Estimator(estimator).value if method in ("clj-ar", "clj-score") else None,
        warnings=notes, points=points,
    )
