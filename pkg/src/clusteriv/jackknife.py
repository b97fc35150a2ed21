"""Cluster jackknife AR and score statistics and their variance estimators.

Every quantity here is a sum over ordered pairs of distinct clusters of
products like ``v[g]' K[g, h] w[h]``, where ``K`` is a symmetric weighting
kernel whose within-cluster blocks are zero. Collecting those terms in the
``G x G`` matrix ``B_v' K B_w`` (see :meth:`Kernel.cross`) turns all the
double and triple sums into small dense matrix operations.
"""

from __future__ import annotations

import enum
import math
import warnings
import weakref
from dataclasses import dataclass

import numpy as np

from .blocks import (
    ClusterBlocks,
    many_controls_kernel,
    orthonormal_basis,
    symmetric_jackknife_matrix,
)
from .data import ClusteredDesign
from .exceptions import (
    DimensionMismatch,
    NegativeVariance,
    RankDeficientAfterDrop,
    SingularJointVariance,
    UnsupportedDimension,
)

NEGATIVE_VARIANCE_SLACK = 1e-12


class KernelChoice(str, enum.Enum):
    """Which zero-block-diagonal weighting matrix to use."""

    PLAIN = "plain"
    SYMMETRIC = "symmetric"
    MANY_CONTROLS = "many-controls"


class Estimator(str, enum.Enum):
    PLAIN = "plain"
    CROSS_FIT = "cross-fit"


class Kernel:
    """A symmetric ``n x n`` weighting matrix with zero within-cluster blocks.

    The plain kernel is stored as an orthonormal basis ``Q`` of the
    instruments (``K = QQ'`` with the blocks removed) and is only
    materialized on request. The other kernels are dense.

    Attributes
    ----------
    choice : KernelChoice
    blocks : ClusterBlocks
    k : int
        Number of instruments, used to scale the AR statistic.
    residual : float
        Largest within-cluster entry before the blocks were set to zero.
    """

    def __init__(self, choice, blocks, k, basis=None, dense=None, residual=0.0):
        self.choice = KernelChoice(choice)
        self.blocks = blocks
        self.k = int(k)
        self._basis = basis
        self._dense = dense
        self.residual = float(residual)
        self._slices = blocks.slices()

    @property
    def matrix(self) -> np.ndarray:
        if self._dense is None:
            K = self._basis @ self._basis.T
            K = (K + K.T) / 2
            for sl in self._slices:
                K[sl, sl] = 0.0
            K.setflags(write=False)
            self._dense = K
        return self._dense

    def _factor(self, v):
        # rows: clusters; B_v' Q
        return self.blocks.cluster_sum(v[:, None] * self._basis, axis=0)

    def cross(self, v, w) -> np.ndarray:
        """``G x G`` matrix with entry ``(g, h)`` equal to ``v[g]' K[g, h] w[h]``."""
        v = np.asarray(v, dtype=float)
        w = np.asarray(w, dtype=float)
        if self._basis is not None and self._dense is None:
            Fv = self._factor(v)
            Fw = Fv if w is v else self._factor(w)
            out = Fv @ Fw.T
            np.fill_diagonal(out, 0.0)
            return out
        return self.blocks.cluster_sum(v[:, None] * self.columns(w), axis=0)

    def columns(self, w) -> np.ndarray:
        """``n x G`` matrix ``K B_w``: column ``h`` is ``K[:, h] w[h]``."""
        w = np.asarray(w, dtype=float)
        if self._basis is not None and self._dense is None:
            Fw = self._factor(w)
            out = self._basis @ Fw.T
            for h, sl in enumerate(self._slices):
                Qh = self._basis[sl]
                out[sl, h] -= Qh @ (Qh.T @ w[sl])
            return out
        return self.blocks.cluster_sum(self.matrix * w[None, :], axis=1)


_kernel_cache: "weakref.WeakKeyDictionary[ClusteredDesign, dict]" = weakref.WeakKeyDictionary()


def build_kernel(design: ClusteredDesign, choice=KernelChoice.PLAIN) -> Kernel:
    """Construct (or fetch from the per-design cache) the requested kernel.

    Raises
    ------
    ValueError
        If the design still carries controls and the kernel is not the
        many-controls kernel, or if the many-controls kernel is requested on a
        design whose controls were already partialled out.
    RankDeficient, SingularClusterBlock, SingularKhatriRaoSystem
        From the underlying constructions.
    """
    choice = KernelChoice(choice)
    cache = _kernel_cache.setdefault(design, {})
    if choice in cache:
        return cache[choice]
    blocks = design.blocks
    if choice is KernelChoice.MANY_CONTROLS:
        if design.controls_partialled:
            raise ValueError(
                "Controls were already partialled out naively; the many-controls "
                "kernel needs the original controls."
            )
        K, res = many_controls_kernel(design.Z, design.W, blocks, return_residual=True)
        kern = Kernel(choice, blocks, design.k, dense=K, residual=res)
    else:
        if design.W is not None:
            raise ValueError(
                "The design has controls that were not partialled out. Call "
                "partial_out_controls first or use the many-controls kernel."
            )
        if choice is KernelChoice.PLAIN:
            Q = orthonormal_basis(design.Z)
            # blocks are removed by construction, so nothing to report
            kern = Kernel(choice, blocks, design.k, basis=Q, residual=0.0)
        else:
            Pt, res = symmetric_jackknife_matrix(design.Z, blocks, return_residual=True)
            K = (Pt + Pt.T) / 2
            kern = Kernel(choice, blocks, design.k, dense=K, residual=res)
    cache[choice] = kern
    return kern


def kernel_matrix(design: ClusteredDesign, choice=KernelChoice.PLAIN) -> np.ndarray:
    """Dense kernel matrix for ``design``; symmetric with zero diagonal blocks."""
    return np.array(build_kernel(design, choice).matrix)


def residuals(design: ClusteredDesign, beta) -> np.ndarray:
    """``y - X beta``."""
    return design.residuals(beta)


def ar_statistic(design: ClusteredDesign, beta, choice=KernelChoice.PLAIN) -> float:
    """Unstudentized cluster jackknife AR statistic ``e' K e / sqrt(k)``."""
    kern = build_kernel(design, choice)
    e = design.residuals(beta)
    return float(kern.cross(e, e).sum() / math.sqrt(design.k))


def score_statistic(design: ClusteredDesign, beta, choice=KernelChoice.PLAIN) -> np.ndarray:
    """Cluster jackknife score ``X' K e / sqrt(n)``, one entry per regressor."""
    kern = build_kernel(design, choice)
    e = design.residuals(beta)
    return np.array(
        [kern.cross(design.X[:, i], e).sum() for i in range(design.p)]
    ) / math.sqrt(design.n)


@dataclass(frozen=True)
class VarianceBundle:
    """Variance of the AR statistic, variance of the score and their covariance.

    Attributes
    ----------
    v_ar : float
    v_s : np.ndarray of shape (p, p)
    c : np.ndarray of shape (p,)
    estimator : Estimator
    clamped : bool
        True if a small negative ``v_ar`` was set to zero.
    """

    v_ar: float
    v_s: np.ndarray
    c: np.ndarray
    estimator: Estimator = Estimator.PLAIN
    clamped: bool = False

    def joint(self) -> np.ndarray:
        """The ``(p + 1) x (p + 1)`` covariance of ``(AR, S')'``."""
        p = self.c.shape[0]
        V = np.empty((p + 1, p + 1))
        V[0, 0] = self.v_ar
        V[0, 1:] = V[1:, 0] = self.c
        V[1:, 1:] = self.v_s
        return V


@dataclass
class _Products:
    e: np.ndarray
    E: np.ndarray  # e_g' K_gh e_h
    A: list  # A[i][g, h] = X_ig' K_gh e_h


def _products(design, kern, beta):
    e = design.residuals(beta)
    E = kern.cross(e, e)
    A = [kern.cross(design.X[:, i], e) for i in range(design.p)]
    return _Products(e, E, A)


def _clamp(v_ar, clamp):
    if v_ar < -NEGATIVE_VARIANCE_SLACK and not clamp:
        raise NegativeVariance(v_ar)
    return max(v_ar, 0.0), v_ar < 0


def _plain_bundle(design, kern, pr):
    n, k, p = design.n, design.k, design.p
    E, A = pr.E, pr.A
    v_ar = 2.0 / k * float(np.sum(E * E.T))
    colsum = [a.sum(axis=0) for a in A]
    v_s = np.empty((p, p))
    c = np.empty(p)
    for i in range(p):
        c[i] = 2.0 / math.sqrt(n * k) * float(np.sum(A[i] * E))
        for j in range(p):
            v_s[i, j] = (colsum[i] @ colsum[j] + np.sum(A[i] * A[j].T)) / n
    return v_ar, (v_s + v_s.T) / 2, c


class _CrossFitter:
    """Leave-one- and leave-two-clusters-out fitted values of ``e`` on ``Z``."""

    def __init__(self, Z, blocks, e):
        self.Z = Z
        self.slices = blocks.slices()
        self.GZ = Z.T @ Z
        self.m = Z.T @ e
        self.Gg = [Z[sl].T @ Z[sl] for sl in self.slices]
        self.mg = [Z[sl].T @ e[sl] for sl in self.slices]
        self.k = Z.shape[1]

    def _coef(self, drop):
        Gm = self.GZ - sum(self.Gg[g] for g in drop)
        mm = self.m - sum(self.mg[g] for g in drop)
        eig = np.linalg.eigvalsh(Gm)
        if eig[0] <= 1e-12 * max(eig[-1], 1e-300):
            rank = int(np.sum(eig > 1e-12 * max(eig[-1], 1e-300)))
            raise RankDeficientAfterDrop(drop, rank, self.k)
        return np.linalg.solve(Gm, mm)

    def fitted(self, drop, g):
        """Fitted values on the rows of cluster ``g`` leaving out ``drop``."""
        return self.Z[self.slices[g]] @ self._coef(drop)


def _cross_fit_bundle(design, kern, pr):
    n, k, p, G = design.n, design.k, design.p, design.G
    sl = design.blocks.slices()
    e, E, A = pr.e, pr.E, pr.A
    fitter = _CrossFitter(design.Z, design.blocks, e)
    KE = kern.columns(e)
    KX = [kern.columns(design.X[:, i]) for i in range(p)]
    XX_rowsum = [kx.sum(axis=1) for kx in KX]  # (K X_i) as an n-vector

    # triple-sum term: u_h = e_h - fitted(leave h out)_h
    eh_tilde = [fitter.fitted((h,), h) for h in range(G)]
    a_u = np.empty((p, G))
    colsum = np.array([a.sum(axis=0) for a in A])  # (KX_i)_h' e_h
    for i in range(p):
        for h in range(G):
            a_u[i, h] = colsum[i, h] - XX_rowsum[i][sl[h]] @ eh_tilde[h]
    v_s = a_u @ colsum.T

    v_ar = 0.0
    c = np.zeros(p)
    for g in range(G):
        for h in range(g + 1, G):
            coef = fitter._coef((g, h))
            tg = design.Z[sl[g]] @ coef
            th = design.Z[sl[h]] @ coef
            # u_g' K_gh e_h and u_h' K_hg e_g
            d_gh = E[g, h] - tg @ KE[sl[g], h]
            d_hg = E[h, g] - th @ KE[sl[h], g]
            v_ar += 2 * d_gh * d_hg
            for i in range(p):
                # X_g' K_gh u_h and X_h' K_hg u_g
                x_gh = A[i][g, h] - th @ KX[i][sl[h], g]
                x_hg = A[i][h, g] - tg @ KX[i][sl[g], h]
                c[i] += x_gh * d_gh + x_hg * d_hg
                for j in range(p):
                    # X_g'K_gh e_h (u_g'K_gh X_h) + same with g, h swapped
                    v_s[i, j] += A[i][g, h] * (A[j][h, g] - tg @ KX[j][sl[g], h])
                    v_s[i, j] += A[i][h, g] * (A[j][g, h] - th @ KX[j][sl[h], g])
    v_ar *= 2.0 / k
    c *= 2.0 / math.sqrt(n * k)
    v_s /= n
    return v_ar, (v_s + v_s.T) / 2, c


def variance_bundle(
    design: ClusteredDesign,
    beta,
    choice=KernelChoice.PLAIN,
    estimator=Estimator.PLAIN,
    clamp: bool = False,
) -> VarianceBundle:
    """Estimate the variances and covariance of the AR and score statistics.

    The plain estimator evaluates the squared cross-cluster terms at the
    residuals ``y - X beta``. The cross-fit estimator replaces one residual
    factor in each term with the residual minus its leave-two-clusters-out
    (or, in the triple sum of the score variance, leave-one-cluster-out)
    fitted value on ``Z``, which removes the bias far from the true value.

    A negative AR variance above ``-1e-12`` is set to zero with a warning;
    with ``clamp=True`` any negative value is. Only the cross-fit estimator
    can produce a negative value.

    Raises
    ------
    NegativeVariance
        If the AR variance is below ``-1e-12`` and ``clamp`` is False.
    RankDeficientAfterDrop
        Cross-fit only, if dropping a pair of clusters makes ``Z`` rank deficient.
    """
    estimator = Estimator(estimator)
    kern = build_kernel(design, choice)
    pr = _products(design, kern, beta)
    if estimator is Estimator.PLAIN:
        v_ar, v_s, c = _plain_bundle(design, kern, pr)
    else:
        v_ar, v_s, c = _cross_fit_bundle(design, kern, pr)
    v_ar, clamped = _clamp(v_ar, clamp)
    if clamped:
        warnings.warn("Negative AR variance estimate clamped to zero.", RuntimeWarning)
    return VarianceBundle(v_ar, v_s, c, estimator, clamped)


@dataclass
class AnalyticVarianceInputs:
    """Conditional second moments of the errors, per cluster.

    Attributes
    ----------
    sigma_blocks : list of np.ndarray
        ``E(e_g e_g' | Z)``, one ``n_g x n_g`` matrix per cluster.
    omega_blocks : list of np.ndarray, optional
        ``E(eta_(i),g eta_(j),g' | Z)``, one ``(p, p, n_g, n_g)`` array per cluster.
    xi_blocks : list of np.ndarray, optional
        ``E(eta_(i),g e_g' | Z)``, one ``(p, n_g, n_g)`` array per cluster.
    signal : np.ndarray of shape (n, p), optional
        The first-stage mean ``Z Pi``.
    """

    sigma_blocks: list
    omega_blocks: list | None = None
    xi_blocks: list | None = None
    signal: np.ndarray | None = None


def _block_diag(blocks_list, blocks):
    n = blocks.n
    out = np.zeros((n, n))
    for sl, S in zip(blocks.slices(), blocks_list):
        S = np.asarray(S, dtype=float)
        if S.shape != (sl.stop - sl.start,) * 2:
            raise DimensionMismatch(f"Block of shape {S.shape} does not fit cluster {sl}.")
        out[sl, sl] = S
    return out


def analytic_variances(inputs: AnalyticVarianceInputs, kernel, blocks: ClusterBlocks, k: int):
    """Population variances of the AR and score statistics given the error moments.

    Parameters
    ----------
    inputs : AnalyticVarianceInputs
    kernel : array_like of shape (n, n)
        Symmetric kernel with zero within-cluster blocks.
    blocks : ClusterBlocks
    k : int

    Returns
    -------
    v_ar : float
        ``(2/k) sum_{g != h} tr(S_g K_gh S_h K_hg)``.
    v_s : np.ndarray or None
        Needs ``omega_blocks``, ``xi_blocks`` and ``signal``.
    c : np.ndarray or None
        Needs ``xi_blocks``.
    """
    K = np.asarray(kernel, dtype=float)
    if K.shape != (blocks.n, blocks.n):
        raise DimensionMismatch(f"Kernel must be {blocks.n} x {blocks.n}.")
    if len(inputs.sigma_blocks) != blocks.G:
        raise DimensionMismatch("Need one covariance block per cluster.")
    n = blocks.n
    S = _block_diag(inputs.sigma_blocks, blocks)
    KSK = K @ S @ K
    v_ar = 2.0 / k * float(np.sum(S * KSK.T))
    c = v_s = None
    if inputs.xi_blocks is not None:
        p = np.asarray(inputs.xi_blocks[0]).shape[0]
        Xi = [_block_diag([xb[i] for xb in inputs.xi_blocks], blocks) for i in range(p)]
        c = np.array([2.0 / math.sqrt(n * k) * float(np.sum(Xi[i] * KSK)) for i in range(p)])
        if inputs.omega_blocks is not None and inputs.signal is not None:
            s = np.asarray(inputs.signal, dtype=float).reshape(n, p)
            v_s = np.empty((p, p))
            for i in range(p):
                KXiK = K @ Xi[i].T @ K
                for j in range(p):
                    Om = _block_diag([ob[i, j] for ob in inputs.omega_blocks], blocks)
                    v_s[i, j] = (
                        s[:, i] @ KSK @ s[:, j]
                        + np.sum(Om * KSK)
                        + np.sum(KXiK * Xi[j])
                    ) / n
            v_s = (v_s + v_s.T) / 2
    return v_ar, v_s, c


def _inverse_sqrt(V):
    lam, U = np.linalg.eigh((V + V.T) / 2)
    lam = np.maximum(lam, 1e-12 * lam[-1])
    return (U / np.sqrt(lam)) @ U.T


def joint_standardized(
    design: ClusteredDesign, beta, choice=KernelChoice.PLAIN, estimator=Estimator.PLAIN
) -> np.ndarray:
    """``V^{-1/2} (AR, S')'`` with ``V`` the estimated joint covariance.

    Raises
    ------
    SingularJointVariance
        If the AR and score statistics are (numerically) perfectly correlated
        or a variance is zero.
    """
    bundle = variance_bundle(design, beta, choice, estimator)
    V = bundle.joint()
    d = np.diag(V)
    if np.any(d <= 0):
        raise SingularJointVariance("A variance in the joint covariance is zero.")
    corr = V / np.sqrt(np.outer(d, d))
    if np.linalg.eigvalsh(corr)[0] <= 1e-10:
        raise SingularJointVariance(
            "The AR and score statistics are perfectly correlated at this beta."
        )
    stats = np.concatenate(
        [[ar_statistic(design, beta, choice)], score_statistic(design, beta, choice)]
    )
    return _inverse_sqrt(V) @ stats


def clc_estimators(design: ClusteredDesign, beta) -> dict:
    """Variance and covariance estimators for a conditional linear combination test.

    Single endogenous regressor only, plain kernel, ``1/k`` scaling. Returns a
    dict with keys ``phi1``, ``phi12``, ``phi13``, ``psi`` and ``upsilon``.

    Raises
    ------
    UnsupportedDimension
        If there is more than one endogenous regressor.
    """
    if design.p != 1:
        raise UnsupportedDimension("clc_estimators needs a single endogenous regressor.")
    kern = build_kernel(design, KernelChoice.PLAIN)
    k = design.k
    e = design.residuals(beta)
    x = design.X[:, 0]
    E = kern.cross(e, e)
    A = kern.cross(x, e)
    XX = kern.cross(x, x)
    phi1 = 2.0 / k * float(np.sum(E * E.T))
    phi12 = (float(np.sum(A * E.T)) + float(np.sum(A.T * E.T))) / k
    phi13 = 2.0 / k * float(np.sum(E * XX))
    # sum over distinct (g, h, i) of A[g, h] XX[h, i]
    triple = float(A.sum(axis=0) @ XX.sum(axis=1) - np.sum(A * XX.T))
    psi = (triple + float(np.sum(A * XX))) / k
    upsilon = 2.0 / k * float(np.sum(XX * XX.T))
    return {"phi1": phi1, "phi12": phi12, "phi13": phi13, "psi": psi, "upsilon": upsilon}
