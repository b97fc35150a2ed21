"""Exception hierarchy.

Every error derives from :class:`ClusterIVError`. Errors that signal bad input
shapes or values also derive from :class:`ValueError`; numerical breakdowns
derive from :class:`numpy.linalg.LinAlgError`.
"""

import numpy as np


class ClusterIVError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatch(ClusterIVError, ValueError):
    pass


class NonContiguousClusters(ClusterIVError, ValueError):
    def __init__(self, label, position):
        self.label = label
        self.position = position
        super().__init__(
            f"Cluster label {label!r} reappears at row {position} after a different "
            "label. Sort rows by cluster first (see clusteriv.data.sort_by_cluster)."
        )


class RankDeficient(ClusterIVError, np.linalg.LinAlgError):
    def __init__(self, observed_rank, expected_rank, what="matrix"):
        self.observed_rank = observed_rank
        self.expected_rank = expected_rank
        super().__init__(
            f"{what} has rank {observed_rank}, expected {expected_rank} "
            "(redundant columns?)."
        )


class RankDeficientAfterDrop(RankDeficient):
    def __init__(self, drop, observed_rank, expected_rank):
        self.drop = tuple(drop)
        super().__init__(
            observed_rank, expected_rank, what=f"Z without clusters {self.drop}"
        )


class SingularClusterBlock(ClusterIVError, np.linalg.LinAlgError):
    def __init__(self, cluster):
        self.cluster = cluster
        super().__init__(
            f"I - P_Z[g,g] is singular for cluster {cluster} (cluster leverage is 1)."
        )


class SingularKhatriRaoSystem(ClusterIVError, np.linalg.LinAlgError):
    pass


class NegativeVariance(ClusterIVError, ArithmeticError):
    def __init__(self, value):
        self.value = value
        super().__init__(f"Variance estimate is negative: {value:.3e}.")


class SingularJointVariance(ClusterIVError, np.linalg.LinAlgError):
    pass


class SingularScoreVariance(ClusterIVError, np.linalg.LinAlgError):
    pass


class SingularMomentCovariance(ClusterIVError, np.linalg.LinAlgError):
    pass


class SingularWeight(ClusterIVError, np.linalg.LinAlgError):
    pass


class SingularW2(ClusterIVError, np.linalg.LinAlgError):
    pass


class DegenerateVariance(ClusterIVError, ArithmeticError):
    pass


class UnsupportedDimension(ClusterIVError, ValueError):
    pass


class TooManyInstruments(ClusterIVError, ValueError):
    def __init__(self, k, G):
        self.k = k
        self.G = G
        super().__init__(f"Need k < G, got k={k} instruments and G={G} clusters.")


class InfeasibleSizes(ClusterIVError, ValueError):
    pass


class DataError(ClusterIVError, ValueError):
    """Problems with an input data file."""


class MissingColumn(DataError):
    def __init__(self, column):
        self.column = column
        super().__init__(f"Column {column!r} not found in data.")


class ParseError(DataError):
    def __init__(self, row, column, value):
        self.row = row
        self.column = column
        self.value = value
        super().__init__(
            f"Cannot parse value {value!r} in row {row}, column {column!r} as a number."
        )


class EmptyData(DataError):
    pass
