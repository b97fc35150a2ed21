"""Acceptance suite: one test per criterion.

Monte Carlo criteria run at desk scale with fixed seeds (base seed 0).
Criterion 10 needs the queenly-reign replication CSV; point
``CLUSTERIV_APPLICATION_CSV`` at it to run that check.
"""

import itertools
import json
import math
import os

import mpmath
import numpy as np
import pytest

from clusteriv.blocks import (
    ClusterBlocks, block_diagonal_part, leave_clusters_out_fit, symmetric_jackknife_matrix,
)
from clusteriv.cli import main
from clusteriv.data import ClusteredDesign, partial_out_controls
from clusteriv.inference import critical_value, invert_confidence_set
from clusteriv.jackknife import (
    KernelChoice, analytic_variances, ar_statistic, build_kernel, kernel_matrix,
    score_statistic, variance_bundle,
)
from clusteriv.miar import cluster_moment_projection, clmi_statistic
from clusteriv.montecarlo import McConfig, power_experiment, simulate_dataset, size_experiment


def rel(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def test_criterion_01_singleton_reduction():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(12, 51))
        k = int(rng.integers(1, 9))
        p = int(rng.integers(1, 3))
        Z = rng.standard_normal((n, k))
        X = rng.standard_normal((n, p)) + Z[:, :1]
        y = X @ rng.standard_normal(p) + rng.standard_normal(n)
        d = ClusteredDesign(y=y, X=X, Z=Z, blocks=ClusterBlocks.singletons(n))
        beta = rng.standard_normal(p)
        e = y - X @ beta
        # individual-level jackknife forms with the diagonal of P removed
        P = Z @ np.linalg.solve(Z.T @ Z, Z.T)
        Pd = P - np.diag(np.diag(P))
        Pd2 = Pd * Pd
        Xe = X * e[:, None]
        ar = e @ Pd @ e / math.sqrt(k)
        S = X.T @ Pd @ e / math.sqrt(n)
        v_ar = 2 / k * (e ** 2) @ Pd2 @ (e ** 2)
        v_s = (X.T @ Pd @ np.diag(e ** 2) @ Pd @ X + Xe.T @ Pd2 @ Xe) / n
        c = 2 / math.sqrt(n * k) * Xe.T @ Pd2 @ (e ** 2)
        b = variance_bundle(d, beta)
        worst = max(
            worst,
            rel(ar_statistic(d, beta), ar), rel(score_statistic(d, beta), S),
            rel(b.v_ar, v_ar), rel(b.v_s, v_s), rel(b.c, c),
        )
    assert worst < 1e-10, worst


def test_criterion_02_leave_cluster_out_oracle():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(50):
        G = int(rng.integers(5, 12))
        blocks = ClusterBlocks(tuple(int(s) for s in rng.integers(1, 5, size=G)))
        k = int(rng.integers(1, 4))
        Z = rng.standard_normal((blocks.n, k))
        v = rng.standard_normal(blocks.n)
        Pt = symmetric_jackknife_matrix(Z, blocks)
        sl = blocks.slices()
        for g in range(G):
            keep = blocks.drop_mask([g])
            coef = np.linalg.lstsq(Z[keep], v[keep], rcond=None)[0]
            worst = max(worst, rel((Pt @ v)[sl[g]], Z[sl[g]] @ coef))
        drop = rng.choice(G, size=2, replace=False)
        keep = blocks.drop_mask(drop)
        coef = np.linalg.lstsq(Z[keep], v[keep], rcond=None)[0]
        worst = max(worst, rel(leave_clusters_out_fit(Z, v, blocks, drop), Z @ coef))
    assert worst < 1e-8, worst


def test_criterion_03_centering_invariants():
    rng = np.random.default_rng(3)
    worst_residual = 0.0
    for trial in range(12):
        G = int(rng.integers(10, 16))
        blocks = ClusterBlocks(tuple(int(s) for s in rng.integers(1, 5, size=G)))
        n = blocks.n
        l = int(rng.integers(1, n // 3 + 1)) if trial % 3 else n // 3
        k = int(rng.integers(1, 4))
        Z = rng.standard_normal((n, k))
        W = rng.standard_normal((n, l))
        y, x = rng.standard_normal((2, n))
        d = ClusteredDesign(y=y, X=x, Z=Z, blocks=blocks, W=W)
        for choice in KernelChoice:
            dd = d if choice is KernelChoice.MANY_CONTROLS else partial_out_controls(d)
            kern = build_kernel(dd, choice)
            assert np.all(block_diagonal_part(kern.matrix, blocks) == 0), choice
            worst_residual = max(worst_residual, kern.residual)
    assert worst_residual < 1e-8, worst_residual


def test_criterion_04_variance_unbiasedness():
    cfg = McConfig(n=60, G=20, k=4)
    d0, truth = simulate_dataset(cfg, 0)
    fixed = (np.array(d0.Z), truth.z_common)
    v_ar, _, c = analytic_variances(truth.variances, kernel_matrix(d0), d0.blocks, cfg.k)
    est_v, est_c = [], []
    for r in range(1, 5001):
        d, _ = simulate_dataset(cfg, r, instruments=fixed)
        b = variance_bundle(d, [cfg.beta0])
        est_v.append(b.v_ar)
        est_c.append(b.c)
    gap_v = abs(np.mean(est_v) / v_ar - 1)
    gap_c = np.max(np.abs(np.mean(est_c, axis=0) / c - 1))
    assert gap_v < 0.05 and gap_c < 0.10, (gap_v, gap_c)


def test_criterion_05_size():
    cfg = McConfig(reps=2000)
    table = size_experiment(cfg, ["clj-ar", "clj-score", "clmi-ar"], [1, 30, 60, 90])
    failures = []
    for row in table.rows:
        lo = 0.02 if (row["method"], row["k_or_beta"]) == ("clmi-ar", 90) else 0.03
        if row["k_or_beta"] == 90 and row["method"] != "clmi-ar":
            continue
        if not lo <= row["rate"] <= 0.07:
            failures.append((row["method"], row["k_or_beta"], row["rate"]))
    naive = size_experiment(cfg, ["jar"], [30]).rows[0]["rate"]
    if not naive > 0.10:
        failures.append(("jar", 30, naive))
    assert not failures, failures


def test_criterion_06_power_ordering():
    base = McConfig(R=100, k=10, h=1, reps=500)
    t = power_experiment(base, ["clj-ar", "clj-score"], [-1.0, 0.0, 1.0])
    for m in ("clj-ar", "clj-score"):
        null = t.lookup(m, 0.0)["rate"]
        for b in (-1.0, 1.0):
            assert t.lookup(m, b)["rate"] - null >= 0.3, (m, b)
    wide = power_experiment(McConfig(R=100, k=50, h=1, reps=500), ["clj-ar", "cluster-ar"],
                            [-0.5, 0.5])
    for b in (-0.5, 0.5):
        clj, car = wide.lookup("clj-ar", b), wide.lookup("cluster-ar", b)
        se = math.sqrt(clj["se"] ** 2 + car["se"] ** 2)
        assert clj["rate"] - car["rate"] > 2 * se, (b, clj["rate"], car["rate"])


def test_criterion_07_miar_invariance():
    rng = np.random.default_rng(7)
    for _ in range(5):
        G = 8
        blocks = ClusterBlocks(tuple(int(s) for s in rng.integers(1, 5, size=G)))
        n, k = blocks.n, 3
        Z = rng.standard_normal((n, k))
        y = rng.standard_normal(n) + rng.standard_normal(G)[blocks.ids()]
        x = rng.standard_normal(n)
        d = ClusteredDesign(y=y, X=x, Z=Z, blocks=blocks)
        P = cluster_moment_projection(d, [0.0]).P
        assert rel(P @ P, P) < 1e-10 and abs(np.trace(P) - k) < 1e-10
        P0 = P - np.diag(np.diag(P))
        _, v = clmi_statistic(d, [0.0])
        for signs in itertools.product([-1.0, 1.0], repeat=G):
            r = np.array(signs)
            flipped = ClusteredDesign(y=y * r[blocks.ids()], X=x, Z=Z, blocks=blocks)
            stat, v_r = clmi_statistic(flipped, [0.0])
            assert v_r == v
            assert abs(stat - r @ P0 @ r / math.sqrt(k * v)) < 1e-10


def test_criterion_08_critical_values():
    mpmath.mp.dps = 30
    for k in (1, 2, 5, 10, 100):
        f = lambda x: mpmath.gammainc(k / 2, 0, x / 2, regularized=True) - mpmath.mpf("0.95")
        q = float(mpmath.findroot(f, k + 1.6449 * math.sqrt(2 * k)))
        assert abs(critical_value(k, 0.05) - (q - k) / math.sqrt(2 * k)) < 1e-6, k
    assert abs(critical_value(10 ** 6, 0.05) - 1.6449) < 1e-2


def test_criterion_09_coverage():
    cfg = McConfig(R=100, k=10, reps=500)
    covered = 0
    for r in range(cfg.reps):
        d, _ = simulate_dataset(cfg, r)
        cs = invert_confidence_set(d, "clj-ar", cfg.alpha, grid=(-2.0, 2.0, 0.05))
        covered += cs.contains(cfg.beta0)
    rate = covered / cfg.reps
    assert abs(rate - 0.95) <= 0.025, rate


@pytest.mark.skipif(
    not os.environ.get("CLUSTERIV_APPLICATION_CSV"),
    reason="set CLUSTERIV_APPLICATION_CSV to the replication data to run",
)
def test_criterion_10_application(tmp_path, capsys):
    env = os.environ
    argv = [
        "ci", "--data", env["CLUSTERIV_APPLICATION_CSV"],
        "--y", env.get("CLUSTERIV_APP_Y", "war"), "--x", env.get("CLUSTERIV_APP_X", "queen"),
        "--z", env.get("CLUSTERIV_APP_Z", "fbm,sis"),
        "--cluster", env.get("CLUSTERIV_APP_CLUSTER", "reign"),
        "--method", "cluster-ar", "--grid", "-2:2:0.005",
    ]
    if env.get("CLUSTERIV_APP_CONTROLS"):
        argv += ["--controls", env["CLUSTERIV_APP_CONTROLS"]]
    assert main(argv) == 0
    intervals = json.loads(capsys.readouterr().out)["result"]["intervals"]
    assert len(intervals) == 1
    lo, hi = intervals[0]
    assert abs(lo - 0.087) <= 0.005 and abs(hi - 0.827) <= 0.005, (lo, hi)
