"""Identification-robust IV inference with clustered data.

Jackknife AR and score tests that remove within-cluster products, a cluster
many-instrument AR test, first-stage diagnostics and a Monte Carlo harness.
"""

__version__ = "0.1.0"

from .blocks import (
    ClusterBlocks, block_diagonal_part, block_partition, column_blockify, khatri_rao,
    leave_clusters_out_fit, many_controls_kernel, symmetric_jackknife_matrix, vecb, vecb_inv,
    zero_block_diagonal,
)
from .data import ClusteredDesign, CsvSchema, load_csv, partial_out_controls, validate
from .diagnostics import Flavor, first_stage_f
from .estimators import (
    ClusterAR, ClusterJackknifeAR, ClusterJackknifeScore, ClusterManyInstrumentAR,
)
from .exceptions import *  # noqa: F401,F403
from .inference import (
    ConfidenceSet, TestOutcome, critical_value, invert_confidence_set, run_test,
)
from .jackknife import (
    Estimator, KernelChoice, analytic_variances, ar_statistic, build_kernel,
    score_statistic, variance_bundle,
)
from .miar import clmi_statistic, cluster_moment_projection
from .montecarlo import (
    McConfig, RejectionTable, cluster_sizes, power_experiment, simulate_dataset,
    size_experiment,
)
