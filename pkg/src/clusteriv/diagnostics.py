"""First-stage strength diagnostics under clustering."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .blocks import numerical_rank, orthonormal_basis
from .data import ClusteredDesign
from .exceptions import SingularW2, UnsupportedDimension


class Flavor(str, enum.Enum):
    HOMOSKEDASTIC = "homoskedastic"
    ROBUST = "robust"
    EFFECTIVE = "effective"


@dataclass
class FirstStageReport:
    flavor: Flavor
    value: float
    k: int
    p: int
    G: int
    infinite: bool = False

    def to_dict(self) -> dict:
        return {
            "flavor": Flavor(self.flavor).value,
            "value": None if self.infinite else self.value,
            "infinite": self.infinite, "k": self.k, "p": self.p, "G": self.G,
        }


def cluster_robust_w2(design: ClusteredDesign) -> np.ndarray:
    """Cluster-robust covariance of ``Z'X / sqrt(n)`` (single regressor).

    ``sum_g Z_g' eta_g eta_g' Z_g / n`` with ``eta = M_Z x`` the first-stage
    residuals.
    """
    Q = orthonormal_basis(design.Z)
    x = design.X[:, 0]
    eta = x - Q @ (Q.T @ x)
    m = design.blocks.cluster_sum(design.Z * eta[:, None], axis=0)
    return m.T @ m / design.n


def first_stage_f(design: ClusteredDesign, flavor=Flavor.HOMOSKEDASTIC) -> FirstStageReport:
    """First-stage F statistic.

    * ``homoskedastic``: smallest eigenvalue of
      ``S^{-1/2} X'P_Z X S^{-1/2}`` with ``S = eta'eta / (n - k)`` and
      ``eta = M_Z X`` (Cragg-Donald form; any number of regressors).
    * ``robust``: ``X'Z W2^{-1} Z'X / (n k)``.
    * ``effective``: ``X'P_Z X / tr(W2 (Z'Z/n)^{-1})``.

    ``W2`` is :func:`cluster_robust_w2`. The last two need a single regressor.
    A first stage without noise yields ``infinite=True``.

    Raises
    ------
    UnsupportedDimension
    SingularW2
    """
    flavor = Flavor(flavor)
    n, k, p = design.n, design.k, design.p
    Q = orthonormal_basis(design.Z)
    X = design.X
    QtX = Q.T @ X
    XPX = QtX.T @ QtX
    report = lambda value, inf=False: FirstStageReport(flavor, float(value), k, p, design.G, inf)
    if flavor is Flavor.HOMOSKEDASTIC:
        eta = X - Q @ QtX
        S = eta.T @ eta / (n - k)
        lam, U = np.linalg.eigh(S)
        scale = max(float(np.max(np.diag(X.T @ X))) / n, 1e-300)
        if lam[0] <= 1e-12 * scale:
            return report(np.inf, True)
        Sih = (U / np.sqrt(lam)) @ U.T
        return report(np.linalg.eigvalsh(Sih @ XPX @ Sih)[0])
    if p != 1:
        raise UnsupportedDimension(f"The {flavor.value} F statistic needs p = 1.")
    x = X[:, 0]
    eta = x - Q @ QtX[:, 0]
    if eta @ eta <= 1e-24 * max(x @ x, 1e-300):
        return report(np.inf, True)
    W2 = cluster_robust_w2(design)
    if flavor is Flavor.ROBUST:
        rank = numerical_rank(W2)[0]
        if rank < k:
            raise SingularW2(f"W2 has rank {rank} < k={k}.")
        zx = design.Z.T @ x
        return report(zx @ np.linalg.solve(W2, zx) / (n * k))
    ZZn = design.Z.T @ design.Z / n
    denom = float(np.trace(np.linalg.solve(ZZn, W2)))
    return report(XPX[0, 0] / denom)
