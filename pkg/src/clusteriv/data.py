"""Clustered IV datasets: construction, CSV loading, checks and partialling out."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .blocks import ClusterBlocks, block_partition, numerical_rank, orthonormal_basis
from .exceptions import (
    DimensionMismatch,
    EmptyData,
    MissingColumn,
    ParseError,
    RankDeficient,
)

SMALL_G_WARNING = 10


def _as_matrix(a, name, n=None):
    a = np.array(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise DimensionMismatch(f"{name} must be a vector or matrix, got shape {a.shape}.")
    if n is not None and a.shape[0] != n:
        raise DimensionMismatch(f"{name} has {a.shape[0]} rows, expected {n}.")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains NaN or Inf.")
    return a


@dataclass(frozen=True, eq=False)
class ClusteredDesign:
    """Outcome, endogenous regressors, instruments and optional controls.

    Rows must be stacked by cluster, as described by ``blocks``. Use
    :meth:`from_arrays` to build a design from unsorted data and a cluster
    label per row.

    Attributes
    ----------
    y : np.ndarray of shape (n,)
    X : np.ndarray of shape (n, p)
    Z : np.ndarray of shape (n, k)
    W : np.ndarray of shape (n, l) or None
        Exogenous controls that have not been partialled out.
    blocks : ClusterBlocks
    cluster_labels : tuple
        Original label of each cluster, in stacking order.
    controls_partialled : bool
        True if controls were removed by :func:`partial_out_controls`. The
        many-controls kernel needs the controls, so it refuses such designs.
    """

    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    blocks: ClusterBlocks
    W: np.ndarray | None = None
    cluster_labels: tuple = ()
    controls_partialled: bool = False
    names: Mapping = field(default_factory=dict)

    def __post_init__(self):
        n = self.blocks.n
        y = np.array(self.y, dtype=float)
        if y.ndim == 2 and y.shape[1] == 1:
            y = y[:, 0]
        if y.ndim != 1 or y.shape[0] != n:
            raise DimensionMismatch(f"y must be a vector of length {n}, got {y.shape}.")
        if not np.all(np.isfinite(y)):
            raise ValueError("y contains NaN or Inf.")
        X = _as_matrix(self.X, "X", n)
        Z = _as_matrix(self.Z, "Z", n)
        W = None
        if self.W is not None and np.asarray(self.W).size > 0:
            W = _as_matrix(self.W, "W", n)
        if X.shape[1] < 1 or Z.shape[1] < 1:
            raise DimensionMismatch("Need at least one regressor and one instrument.")
        if self.blocks.G < 2:
            raise DimensionMismatch("Need at least two clusters.")
        labels = tuple(self.cluster_labels) or tuple(range(self.blocks.G))
        if len(labels) != self.blocks.G:
            raise DimensionMismatch("One label per cluster is required.")
        for name, val in (("y", y), ("X", X), ("Z", Z), ("W", W)):
            if val is not None:
                val.setflags(write=False)
            object.__setattr__(self, name, val)
        object.__setattr__(self, "cluster_labels", labels)

    @classmethod
    def from_arrays(cls, y, X, Z, clusters: Sequence, W=None, **kwargs) -> "ClusteredDesign":
        """Build a design, stably sorting rows by cluster (first-appearance order)."""
        clusters = list(clusters)
        if len(clusters) == 0:
            raise EmptyData("No observations.")
        order, labels = sort_by_cluster(clusters)
        take = lambda a: None if a is None else np.asarray(a, dtype=float)[order]
        sorted_labels = [clusters[i] for i in order]
        blocks = block_partition(sorted_labels)
        return cls(
            y=take(y), X=take(X), Z=take(Z), W=take(W), blocks=blocks,
            cluster_labels=tuple(labels), **kwargs,
        )

    @property
    def n(self) -> int:
        return self.blocks.n

    @property
    def G(self) -> int:
        return self.blocks.G

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def k(self) -> int:
        return self.Z.shape[1]

    @property
    def l(self) -> int:
        return 0 if self.W is None else self.W.shape[1]

    def residuals(self, beta) -> np.ndarray:
        beta = np.atleast_1d(np.asarray(beta, dtype=float))
        if beta.shape != (self.p,):
            raise DimensionMismatch(f"beta must have length {self.p}, got {beta.shape}.")
        return self.y - self.X @ beta

    def scaled(self, c: float) -> "ClusteredDesign":
        """Design with ``y`` and ``X`` multiplied by ``c``."""
        return replace(self, y=self.y * c, X=self.X * c)


def sort_by_cluster(labels: Sequence) -> tuple:
    """Stable ordering of rows that makes equal labels contiguous.

    Returns
    -------
    order : np.ndarray
        Row permutation.
    unique : list
        Labels in order of first appearance.
    """
    first = {}
    for i, lab in enumerate(labels):
        first.setdefault(lab, len(first))
    codes = np.array([first[lab] for lab in labels])
    order = np.argsort(codes, kind="stable")
    return order, list(first)


@dataclass
class ValidationReport:
    """Outcome of :func:`validate`.

    ``leverages`` holds the spectral norm of each within-cluster block of the
    instrument projection.
    """

    n: int
    G: int
    k: int
    p: int
    l: int
    contiguous: bool
    rank_Z: int
    rank_W: int | None
    k_less_than_G: bool
    leverages: np.ndarray
    max_leverage: float
    n_max: int
    n_max_over_G: float
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n": self.n, "G": self.G, "k": self.k, "p": self.p, "l": self.l,
            "contiguous": self.contiguous, "rank_Z": self.rank_Z, "rank_W": self.rank_W,
            "k_less_than_G": self.k_less_than_G, "max_leverage": self.max_leverage,
            "n_max": self.n_max, "n_max_over_G": self.n_max_over_G,
            "warnings": list(self.warnings),
        }


def cluster_leverages(Z, blocks: ClusterBlocks) -> np.ndarray:
    """Spectral norm of ``P_Z[g, g]`` for every cluster."""
    Q = orthonormal_basis(Z)
    out = np.empty(blocks.G)
    for g, sl in enumerate(blocks.slices()):
        Qg = Q[sl]
        # ||Q_g Q_g'||_2 = largest squared singular value of Q_g
        out[g] = np.linalg.norm(Qg, 2) ** 2 if Qg.size else 0.0
    return np.clip(out, 0.0, 1.0)


def validate(design: ClusteredDesign) -> ValidationReport:
    """Check a design against the working assumptions of the tests.

    Only rank deficiency of ``Z`` or ``W`` is fatal; everything else is
    reported as a warning.

    Raises
    ------
    RankDeficient
    """
    rank_Z = numerical_rank(design.Z)[0]
    if rank_Z < design.k:
        raise RankDeficient(rank_Z, design.k, what="Z")
    rank_W = None
    if design.W is not None:
        rank_W = numerical_rank(design.W)[0]
        if rank_W < design.l:
            raise RankDeficient(rank_W, design.l, what="W")
    lev = cluster_leverages(design.Z, design.blocks)
    warnings = []
    if design.G < SMALL_G_WARNING:
        warnings.append(f"G small ({design.G}); asymptotics are in G.")
    if design.k >= design.G:
        warnings.append("k >= G; the cluster many-instrument AR test is unavailable.")
    if lev.max() >= 1 - 1e-8:
        warnings.append("Some cluster has leverage 1; jackknife kernels are undefined.")
    return ValidationReport(
        n=design.n, G=design.G, k=design.k, p=design.p, l=design.l, contiguous=True,
        rank_Z=rank_Z, rank_W=rank_W, k_less_than_G=design.k < design.G,
        leverages=lev, max_leverage=float(lev.max()), n_max=design.blocks.n_max,
        n_max_over_G=design.blocks.n_max / design.G, warnings=warnings,
    )


def partial_out_controls(design: ClusteredDesign) -> ClusteredDesign:
    """Project the controls out of ``y``, ``X`` and ``Z`` and drop them.

    Raises
    ------
    RankDeficient
        If ``W`` or the residualized ``Z`` lose rank.
    """
    if design.W is None:
        return design
    Q = orthonormal_basis(design.W, what="W")
    resid = lambda a: a - Q @ (Q.T @ a)
    Z = resid(design.Z)
    rank = numerical_rank(Z)[0]
    if rank < design.k:
        raise RankDeficient(rank, design.k, what="M_W Z")
    return replace(
        design, y=resid(design.y), X=resid(design.X), Z=Z, W=None, controls_partialled=True
    )


@dataclass(frozen=True)
class CsvSchema:
    outcome: str
    endogenous: tuple
    instruments: tuple
    cluster: str
    controls: tuple = ()

    @classmethod
    def from_mapping(cls, m: Mapping) -> "CsvSchema":
        tup = lambda v: (v,) if isinstance(v, str) else tuple(v or ())
        return cls(
            outcome=m["outcome"], endogenous=tup(m["endogenous"]),
            instruments=tup(m["instruments"]), cluster=m["cluster"],
            controls=tup(m.get("controls", ())),
        )


def _parse_float(text, row, col):
    try:
        val = float(text)
    except (TypeError, ValueError):
        raise ParseError(row, col, text) from None
    if not math.isfinite(val):
        raise ParseError(row, col, text)
    return val


def load_csv(path, schema) -> ClusteredDesign:
    """Read a comma-separated file with a header row into a design.

    ``schema`` is a :class:`CsvSchema` or a mapping with keys ``outcome``,
    ``endogenous``, ``instruments``, ``cluster`` and optionally ``controls``.
    Rows are stably sorted by cluster label. Missing or non-numeric values
    raise :class:`ParseError` with the 1-based data row number.
    """
    if not isinstance(schema, CsvSchema):
        schema = CsvSchema.from_mapping(schema)
    path = Path(path)
    with path.open(newline="", encoding="utf-8-sig") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptyData(f"{path} is empty.") from None
        rows = [r for r in reader if any(cell.strip() for cell in r)]
    if not rows:
        raise EmptyData(f"{path} has a header but no data rows.")
    index = {name: j for j, name in enumerate(header)}
    numeric = [schema.outcome, *schema.endogenous, *schema.instruments, *schema.controls]
    for col in [*numeric, schema.cluster]:
        if col not in index:
            raise MissingColumn(col)

    def column(name):
        j = index[name]
        out = np.empty(len(rows))
        for i, r in enumerate(rows, start=1):
            out[i - 1] = _parse_float(r[j].strip() if j < len(r) else "", i, name)
        return out

    stack = lambda names: np.column_stack([column(c) for c in names])
    clusters = []
    for i, r in enumerate(rows, start=1):
        j = index[schema.cluster]
        lab = r[j].strip() if j < len(r) else ""
        if lab == "":
            raise ParseError(i, schema.cluster, lab)
        clusters.append(lab)
    W = stack(schema.controls) if schema.controls else None
    return ClusteredDesign.from_arrays(
        column(schema.outcome), stack(schema.endogenous), stack(schema.instruments),
        clusters, W=W,
        names={"outcome": schema.outcome, "endogenous": schema.endogenous,
               "instruments": schema.instruments, "controls": schema.controls},
    )
