"""Cluster many-instrument AR statistic.

The moments ``Z_g' e_g`` are summed within each cluster, giving a ``G x k``
matrix ``M`` of cluster moments. Weighting by their outer-product sum
``M'M`` turns the continuously updated AR objective into ``i' P i`` with
``P = M (M'M)^{-1} M'`` a ``G x G`` projection. Flipping the sign of a
cluster's residuals conjugates ``P`` by a diagonal sign matrix, which is what
makes the statistic a Rademacher quadratic form under reflection invariance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .blocks import numerical_rank
from .data import ClusteredDesign
from .exceptions import DegenerateVariance, SingularWeight, TooManyInstruments

LEVERAGE_FLAG = 1 - 1e-8


def cluster_moments(design: ClusteredDesign, beta) -> np.ndarray:
    """``G x k`` matrix whose row ``g`` is ``Z_g' e_g`` at ``beta``."""
    e = design.residuals(beta)
    return design.blocks.cluster_sum(design.Z * e[:, None], axis=0)


@dataclass(frozen=True)
class ClusterMomentProjection:
    """Projection onto the span of the summed cluster moments.

    Attributes
    ----------
    P : np.ndarray of shape (G, G)
    k : int
    moments : np.ndarray of shape (G, k)
    """

    P: np.ndarray
    k: int
    moments: np.ndarray

    @property
    def max_leverage(self) -> float:
        return float(np.max(np.diag(self.P)))

    @property
    def leverage_violation(self) -> bool:
        return self.max_leverage >= LEVERAGE_FLAG


def moment_projection(moments: np.ndarray) -> np.ndarray:
    """``M (M'M)^{-1} M'`` for a ``G x k`` moment matrix of full column rank.

    Raises
    ------
    SingularWeight
        If ``M'M`` is singular.
    """
    k = moments.shape[1]
    rank, Q, _, _ = numerical_rank(moments)
    if rank < k:
        raise SingularWeight(
            f"The cluster moment matrix has rank {rank} < k={k}; the weight "
            "Z' B_ee' Z is singular (clusters with zero residuals?)."
        )
    P = Q @ Q.T
    return (P + P.T) / 2


def cluster_moment_projection(design: ClusteredDesign, beta) -> ClusterMomentProjection:
    """Build the ``G x G`` cluster-moment projection at ``beta``.

    Raises
    ------
    TooManyInstruments
        If ``k >= G``.
    SingularWeight
    """
    if design.k >= design.G:
        raise TooManyInstruments(design.k, design.G)
    M = cluster_moments(design, beta)
    return ClusterMomentProjection(moment_projection(M), design.k, M)


def clmi_statistic(design: ClusteredDesign, beta) -> tuple:
    """Studentized cluster many-instrument AR statistic and its variance.

    Returns
    -------
    stat : float
        ``i' P0 i / sqrt(k V)`` with ``P0`` the projection with its diagonal
        removed.
    variance : float
        ``V = (2/k) sum_{g != h} P_gh^2``.

    Raises
    ------
    TooManyInstruments, SingularWeight
    DegenerateVariance
        If ``V <= 1e-14``.
    """
    proj = cluster_moment_projection(design, beta)
    P0 = proj.P.copy()
    np.fill_diagonal(P0, 0.0)
    k = design.k
    variance = 2.0 / k * float(np.sum(P0 * P0))
    if variance <= 1e-14:
        raise DegenerateVariance("All off-diagonal entries of the projection vanish.")
    return float(P0.sum() / math.sqrt(k * variance)), variance
