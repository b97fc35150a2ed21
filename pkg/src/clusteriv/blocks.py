"""Block-structured linear algebra for clustered data.

Rows are assumed to be stacked by cluster, so that cluster ``g`` occupies the
contiguous index range ``[start_g, start_g + n_g)``. For an ``n x n`` matrix
``A`` the block-diagonal part keeps the within-cluster blocks ``A[g, g]`` and
zeroes everything else; the "zeroed" matrix is ``A`` minus that part.
"""

from __future__ import annotations

import warnings

from dataclasses import dataclass
from typing import Hashable, Iterable, Sequence

import numpy as np
import scipy.linalg

from .exceptions import (
    DimensionMismatch,
    NonContiguousClusters,
    RankDeficient,
    RankDeficientAfterDrop,
    SingularClusterBlock,
    SingularKhatriRaoSystem,
)

_EPS = np.finfo(float).eps


@dataclass(frozen=True)
class ClusterBlocks:
    """Contiguous partition of ``0..n-1`` into clusters.

    Parameters
    ----------
    sizes : tuple of int
        Cluster sizes ``n_1, ..., n_G``, in stacking order.
    """

    sizes: tuple

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        if len(sizes) == 0:
            raise ValueError("Need at least one cluster.")
        if min(sizes) < 1:
            raise ValueError(f"Cluster sizes must be positive, got {sizes}.")
        object.__setattr__(self, "sizes", sizes)

    @classmethod
    def from_sizes(cls, sizes: Iterable[int]) -> "ClusterBlocks":
        return cls(tuple(sizes))

    @classmethod
    def singletons(cls, n: int) -> "ClusterBlocks":
        return cls((1,) * n)

    @property
    def G(self) -> int:
        return len(self.sizes)

    @property
    def n(self) -> int:
        return sum(self.sizes)

    @property
    def n_max(self) -> int:
        return max(self.sizes)

    @property
    def starts(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.sizes)[:-1]]).astype(np.intp)

    @property
    def boundaries(self) -> list:
        """List of ``(start, length)`` pairs."""
        return list(zip(self.starts.tolist(), self.sizes))

    def slices(self) -> list:
        return [slice(s, s + m) for s, m in self.boundaries]

    def ids(self) -> np.ndarray:
        """Cluster index ``0..G-1`` of every row."""
        return np.repeat(np.arange(self.G), self.sizes)

    def is_singleton(self) -> bool:
        return self.n_max == 1

    def cluster_sum(self, a: np.ndarray, axis: int = 0) -> np.ndarray:
        """Sum ``a`` over the rows (or columns) belonging to each cluster."""
        a = np.asarray(a, dtype=float)
        if a.shape[axis] != self.n:
            raise DimensionMismatch(
                f"Axis {axis} has length {a.shape[axis]}, expected {self.n}."
            )
        return np.add.reduceat(a, self.starts, axis=axis)

    def drop_mask(self, drop: Iterable[int]) -> np.ndarray:
        """Boolean row mask that is False on the clusters in ``drop``."""
        keep = np.ones(self.n, dtype=bool)
        for g in drop:
            sl = self.slices()[g]
            keep[sl] = False
        return keep

    def take(self, order: Sequence[int]) -> "ClusterBlocks":
        return ClusterBlocks(tuple(self.sizes[g] for g in order))


def block_partition(labels: Sequence[Hashable]) -> ClusterBlocks:
    """Partition rows into clusters from a label per row.

    Rows sharing a label must be adjacent; clusters are numbered in order of
    first appearance.

    >>> block_partition(["a", "a", "b", "b", "b"]).boundaries
    [(0, 2), (2, 3)]
    """
    labels = list(labels)
    if len(labels) == 0:
        raise ValueError("labels must be non-empty.")
    sizes = []
    seen = set()
    current = labels[0]
    count = 0
    for i, lab in enumerate(labels):
        if lab == current:
            count += 1
            continue
        seen.add(current)
        if lab in seen:
            raise NonContiguousClusters(lab, i)
        sizes.append(count)
        current, count = lab, 1
    sizes.append(count)
    return ClusterBlocks(tuple(sizes))


def _check_square(A, blocks):
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"Expected a square matrix, got shape {A.shape}.")
    if A.shape[0] != blocks.n:
        raise DimensionMismatch(
            f"Matrix has {A.shape[0]} rows but the partition covers {blocks.n}."
        )
    return A


def block_diagonal_part(A, blocks: ClusterBlocks) -> np.ndarray:
    """Copy of ``A`` with everything outside the within-cluster blocks set to 0."""
    A = _check_square(A, blocks)
    out = np.zeros_like(A)
    for sl in blocks.slices():
        out[sl, sl] = A[sl, sl]
    return out


def zero_block_diagonal(A, blocks: ClusterBlocks) -> np.ndarray:
    """Copy of ``A`` with the within-cluster blocks set to 0."""
    A = _check_square(A, blocks)
    out = A.copy()
    for sl in blocks.slices():
        out[sl, sl] = 0.0
    return out


def block_diagonal_residual(A, blocks: ClusterBlocks) -> float:
    """Largest absolute entry inside the within-cluster blocks of ``A``."""
    A = _check_square(A, blocks)
    return max(
        (float(np.max(np.abs(A[sl, sl]))) for sl in blocks.slices()), default=0.0
    )


def column_blockify(v, blocks: ClusterBlocks) -> np.ndarray:
    """``n x G`` matrix whose column ``g`` holds ``v`` on the rows of cluster ``g``."""
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.shape[0] != blocks.n:
        raise DimensionMismatch(f"Expected a vector of length {blocks.n}.")
    out = np.zeros((blocks.n, blocks.G))
    out[np.arange(blocks.n), blocks.ids()] = v
    return out


def numerical_rank(A, tol: float | None = None) -> tuple:
    """Rank of ``A`` from a column-pivoted QR factorization.

    The threshold is ``max(n, k) * eps * |R[0, 0]|`` unless ``tol`` is given.

    Returns
    -------
    rank : int
    Q : np.ndarray
        Economic Q factor (``n x k``).
    R : np.ndarray
    piv : np.ndarray
    """
    A = np.asarray(A, dtype=float)
    n, k = A.shape
    if k == 0:
        return 0, np.zeros((n, 0)), np.zeros((0, 0)), np.zeros(0, dtype=int)
    Q, R, piv = scipy.linalg.qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if tol is None:
        tol = max(n, k) * _EPS * (diag[0] if diag.size else 0.0)
    rank = int(np.sum(diag > tol))
    return rank, Q, R, piv


def orthonormal_basis(Z, what: str = "Z") -> np.ndarray:
    """Orthonormal basis of the column space of full-rank ``Z``."""
    Z = np.asarray(Z, dtype=float)
    if Z.ndim != 2:
        raise DimensionMismatch(f"{what} must be a matrix, got shape {Z.shape}.")
    rank, Q, _, _ = numerical_rank(Z)
    if rank < Z.shape[1]:
        raise RankDeficient(rank, Z.shape[1], what=what)
    return Q


def projection_pair(Z) -> tuple:
    """Projection onto the columns of ``Z`` and its orthogonal complement.

    Returns
    -------
    P : np.ndarray of shape (n, n)
    M : np.ndarray of shape (n, n)
        ``I - P``.

    Raises
    ------
    RankDeficient
        If ``Z`` does not have full column rank.
    """
    Q = orthonormal_basis(Z)
    P = Q @ Q.T
    P = (P + P.T) / 2
    return P, np.eye(P.shape[0]) - P


def khatri_rao(A, B, row_blocks: ClusterBlocks, col_blocks: ClusterBlocks) -> np.ndarray:
    """Blockwise Kronecker product.

    Block ``(h, g)`` of the result is ``kron(A[h, g], B[h, g])`` where the
    blocks of ``A`` and ``B`` are taken with respect to ``row_blocks`` and
    ``col_blocks``. The result has ``sum(n_h^2)`` rows and ``sum(n_g^2)``
    columns when ``A`` and ``B`` have the same partition.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape != B.shape or A.ndim != 2:
        raise DimensionMismatch(f"A and B must have equal shapes, got {A.shape}, {B.shape}.")
    if A.shape != (row_blocks.n, col_blocks.n):
        raise DimensionMismatch(
            f"Partitions cover {(row_blocks.n, col_blocks.n)}, matrices are {A.shape}."
        )
    rsq = np.array(row_blocks.sizes) ** 2
    csq = np.array(col_blocks.sizes) ** 2
    roff = np.concatenate([[0], np.cumsum(rsq)])
    coff = np.concatenate([[0], np.cumsum(csq)])
    out = np.empty((roff[-1], coff[-1]))
    for h, rs in enumerate(row_blocks.slices()):
        for g, cs in enumerate(col_blocks.slices()):
            out[roff[h]:roff[h + 1], coff[g]:coff[g + 1]] = np.kron(A[rs, cs], B[rs, cs])
    return out


def vecb(A, blocks: ClusterBlocks) -> np.ndarray:
    """Stacked column-major vectorizations of the diagonal blocks of ``A``."""
    A = _check_square(A, blocks)
    return np.concatenate([A[sl, sl].ravel(order="F") for sl in blocks.slices()])


def vecb_inv(v, blocks: ClusterBlocks) -> np.ndarray:
    """Block-diagonal matrix built from a :func:`vecb` vector."""
    v = np.asarray(v, dtype=float)
    total = sum(m * m for m in blocks.sizes)
    if v.ndim != 1 or v.shape[0] != total:
        raise DimensionMismatch(f"Expected a vector of length {total}, got {v.shape}.")
    out = np.zeros((blocks.n, blocks.n))
    pos = 0
    for sl, m in zip(blocks.slices(), blocks.sizes):
        out[sl, sl] = v[pos:pos + m * m].reshape((m, m), order="F")
        pos += m * m
    return out


def symmetric_jackknife_matrix(Z, blocks: ClusterBlocks, return_residual: bool = False):
    """Leave-cluster-out fitted-value operator.

    Computes ``P - B_P B_M^{-1} M`` with ``P`` the projection on ``Z``,
    ``M = I - P`` and ``B_.`` the block-diagonal part. Row block ``g`` of the
    product with a vector ``v`` equals the fitted values for cluster ``g``
    from regressing ``v`` on ``Z`` without cluster ``g``. The within-cluster
    blocks are zero in exact arithmetic and are overwritten with zeros.

    Parameters
    ----------
    Z : array_like of shape (n, k)
    blocks : ClusterBlocks
    return_residual : bool, default=False
        Also return the largest absolute within-cluster entry before zeroing.

    Raises
    ------
    RankDeficient
    SingularClusterBlock
        If ``I - P[g, g]`` is singular for some cluster ``g``.
    """
    Z = np.asarray(Z, dtype=float)
    if Z.shape[0] != blocks.n:
        raise DimensionMismatch(f"Z has {Z.shape[0]} rows, expected {blocks.n}.")
    P, M = projection_pair(Z)
    out = P.copy()
    for g, sl in enumerate(blocks.slices()):
        Mgg = M[sl, sl]
        m = Mgg.shape[0]
        eig = np.linalg.eigvalsh(Mgg)
        if eig[0] <= m * _EPS * max(1.0, eig[-1]) * 16:
            raise SingularClusterBlock(g)
        # rows of cluster g: P[g, :] - P[g, g] (M[g, g])^{-1} M[g, :]
        out[sl, :] -= P[sl, sl] @ np.linalg.solve(Mgg, M[sl, :])
    residual = block_diagonal_residual(out, blocks)
    for sl in blocks.slices():
        out[sl, sl] = 0.0
    if return_residual:
        return out, residual
    return out


def many_controls_kernel(Zbar, W, blocks: ClusterBlocks, return_residual: bool = False):
    """Jackknife kernel that stays centered after partialling out many controls.

    Returns ``P_{M_W Zbar} - M_W H M_W`` where the block-diagonal ``H`` solves
    ``vecb(P_{M_W Zbar}) = (M_W * M_W) vecb(H)`` with ``*`` the Khatri-Rao
    product over the cluster partition. The dense system has size
    ``sum(n_g^2)``, so the cost is ``O(sum(n_g^2)^3)``.

    A singular but consistent system (e.g. cluster fixed effects among the
    controls) is solved in the minimum-norm least-squares sense.

    Raises
    ------
    RankDeficient
        If ``W`` or ``M_W Zbar`` lacks full column rank.
    SingularKhatriRaoSystem
        If the Khatri-Rao system has no exact solution.
    """
    Zbar = np.asarray(Zbar, dtype=float)
    n = blocks.n
    if Zbar.shape[0] != n:
        raise DimensionMismatch(f"Zbar has {Zbar.shape[0]} rows, expected {n}.")
    if W is None or np.asarray(W).size == 0:
        MW = np.eye(n)
    else:
        W = np.asarray(W, dtype=float)
        if W.ndim == 1:
            W = W[:, None]
        if W.shape[0] != n:
            raise DimensionMismatch(f"W has {W.shape[0]} rows, expected {n}.")
        QW = orthonormal_basis(W, what="W")
        MW = np.eye(n) - QW @ QW.T
    P, _ = projection_pair(MW @ Zbar)
    target = vecb(P, blocks)
    system = khatri_rao(MW, MW, blocks, blocks)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
            lu = scipy.linalg.lu_factor(system, check_finite=False)
        rcond = np.min(np.abs(np.diag(lu[0]))) / max(np.max(np.abs(np.diag(lu[0]))), 1e-300)
        if rcond < system.shape[0] * _EPS:
            raise np.linalg.LinAlgError
        h = scipy.linalg.lu_solve(lu, target)
    except (np.linalg.LinAlgError, ValueError):
        h, *_ = scipy.linalg.lstsq(system, target, cond=system.shape[0] * _EPS)
    scale = max(float(np.max(np.abs(P))), 1.0)
    if np.max(np.abs(system @ h - target)) > 1e-8 * scale:
        raise SingularKhatriRaoSystem(
            "The Khatri-Rao system for the many-controls kernel has no solution; "
            "the cluster structure is too coarse relative to the controls."
        )
    H = vecb_inv(h, blocks)
    K = P - MW @ H @ MW
    K = (K + K.T) / 2
    residual = block_diagonal_residual(K, blocks)
    for sl in blocks.slices():
        K[sl, sl] = 0.0
    if return_residual:
        return K, residual
    return K


def leave_clusters_out_fit(Z, v, blocks: ClusterBlocks, drop: Iterable[int] = ()) -> np.ndarray:
    """Fitted values ``Z b`` with ``b`` from regressing ``v`` on ``Z`` without ``drop``.

    Raises
    ------
    RankDeficientAfterDrop
        If ``Z`` loses rank once the dropped clusters are removed.
    """
    Z = np.asarray(Z, dtype=float)
    v = np.asarray(v, dtype=float)
    drop = tuple(sorted(set(int(g) for g in drop)))
    if Z.shape[0] != blocks.n or v.shape[0] != blocks.n:
        raise DimensionMismatch("Z and v must have one row per observation.")
    keep = blocks.drop_mask(drop)
    Zk = Z[keep]
    rank, Q, R, piv = numerical_rank(Zk)
    if rank < Z.shape[1]:
        raise RankDeficientAfterDrop(drop, rank, Z.shape[1])
    coef = np.empty(Z.shape[1])
    coef[piv] = scipy.linalg.solve_triangular(R, Q.T @ v[keep])
    return Z @ coef
