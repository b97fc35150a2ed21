"""Simulation design and size/power experiments.

Data are generated with a single endogenous regressor. Instruments, first
stage errors and structural errors each have a cluster-common and an
idiosyncratic standard normal part; the common part of the structural error
is scaled by ``|z_cl|^h`` (the cluster-common draw of the first, informative
instrument) to create conditional heteroskedasticity.

Reproducibility: replication ``r`` draws from a PCG64 generator seeded with
``numpy.random.SeedSequence([base_seed, r])``, so it produces the same data
whether it runs alone, in a batch, or in a worker process. Normal variates
are obtained by inverting the normal CDF on uniforms, which keeps the stream
layout fixed.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import scipy.special

from .blocks import ClusterBlocks
from .data import ClusteredDesign
from .exceptions import ClusterIVError, InfeasibleSizes
from .jackknife import AnalyticVarianceInputs, Estimator, KernelChoice
from .inference import run_test

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class McConfig:
    """Parameters of the simulation design and of an experiment.

    ``gamma`` sets cluster-size imbalance (0 is balanced), ``zeta`` the share
    of cluster-common variation, ``rho`` the degree of endogeneity, ``h`` the
    degree of conditional heteroskedasticity and ``R`` the instrument
    strength, through ``Pi_1 = sqrt(R sqrt(k) / n)``.
    """

    n: int = 1000
    G: int = 100
    gamma: float = 6.0
    zeta: float = 0.3
    rho: float = 0.3
    h: float = 1.0
    R: float = 10.0
    k: int = 10
    beta0: float = 0.0
    reps: int = 2000
    base_seed: int = 0
    alpha: float = 0.05

    def __post_init__(self):
        if not (self.n >= self.G >= 2):
            raise ValueError(f"Need n >= G >= 2, got n={self.n}, G={self.G}.")
        if self.k < 1:
            raise ValueError("Need k >= 1.")
        if not 0 <= self.zeta < 1:
            raise ValueError(f"zeta must lie in [0, 1), got {self.zeta}.")
        if not 0 <= self.rho <= 1:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}.")
        if self.h < 0 or self.R < 0 or self.reps < 0:
            raise ValueError("h, R and reps must be non-negative.")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1).")

    @property
    def pi1(self) -> float:
        return math.sqrt(self.R * math.sqrt(self.k) / self.n)


def _raw_cluster_sizes(n: int, G: int, gamma: float) -> np.ndarray:
    """Real-valued sizes before flooring (weakly increasing in g for gamma > 0)."""
    g = np.arange(1, G)
    w = np.exp(gamma * g / G)
    head = np.maximum(1.0, n * w / (w.sum() + 1.0))
    tail = max(1.0, n - head.sum())
    return np.append(head, tail)


def cluster_sizes(n: int, G: int, gamma: float) -> list:
    """Cluster sizes with exponential imbalance, summing exactly to ``n``.

    Sizes ``n * exp(gamma g / G) / (sum_{g<G} exp(gamma g / G) + 1)`` for
    ``g < G`` and the remainder for the last cluster, each at least 1, are
    floored, and the first clusters are then increased by one until the
    total is ``n``. If the lower bound of 1 pushes the total above ``n``, the
    largest clusters are decreased instead.

    Raises
    ------
    InfeasibleSizes
        If ``n < G``.
    """
    if G < 1 or n < G:
        raise InfeasibleSizes(f"Cannot split n={n} observations into G={G} clusters.")
    sizes = np.floor(_raw_cluster_sizes(n, G, gamma)).astype(int)
    short = n - int(sizes.sum())
    if short > 0:
        sizes[:short] += 1
    while short < 0:
        j = int(np.argmax(sizes))
        sizes[j] -= 1
        short += 1
    return sizes.tolist()


def rep_generator(base_seed: int, rep_index: int) -> np.random.Generator:
    """Independent PCG64 stream for one replication."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([base_seed, rep_index])))


def _normals(rng, shape):
    u = rng.random(shape) + 2.0 ** -54  # strictly inside (0, 1)
    return scipy.special.ndtri(u)


@dataclass
class Truth:
    """Population quantities behind a simulated dataset."""

    beta0: float
    Pi: np.ndarray
    variances: AnalyticVarianceInputs
    z_common: np.ndarray


@dataclass(frozen=True)
class _Instruments:
    Z: np.ndarray
    z_common: np.ndarray  # (G, k)


def _draw_instruments(config, k, blocks, rng):
    zeta = config.zeta
    ids = blocks.ids()
    zc = _normals(rng, (blocks.G, k))
    zi = _normals(rng, (blocks.n, k))
    Z = math.sqrt(zeta) * zc[ids] + math.sqrt(1 - zeta) * zi
    return _Instruments(Z, zc)


def _error_moments(config, blocks, z_common):
    zeta, rho, h = config.zeta, config.rho, config.h
    a = np.abs(z_common[:, 0]) ** h
    sigma, omega, xi = [], [], []
    for g, m in enumerate(blocks.sizes):
        J, I = np.ones((m, m)), np.eye(m)
        sigma.append(zeta * a[g] ** 2 * J + (1 - zeta) * I)
        omega.append((zeta * J + (1 - zeta) * I)[None, None])
        xi.append((math.sqrt(rho) * (zeta * a[g] * J + (1 - zeta) * I))[None])
    return sigma, omega, xi


def simulate_dataset(config: McConfig, rep_index: int, instruments=None, k=None):
    """Draw one dataset.

    Parameters
    ----------
    config : McConfig
    rep_index : int
        Selects the random stream.
    instruments : tuple (Z, z_common), optional
        Keep these instruments fixed and draw only the errors, for
        experiments conditional on ``Z``.
    k : int, optional
        Overrides ``config.k``.

    Returns
    -------
    design : ClusteredDesign
    truth : Truth
    """
    k = config.k if k is None else int(k)
    if k != config.k:
        config = replace(config, k=k)
    blocks = ClusterBlocks(tuple(cluster_sizes(config.n, config.G, config.gamma)))
    rng = rep_generator(config.base_seed, rep_index)
    if instruments is None:
        inst = _draw_instruments(config, k, blocks, rng)
    else:
        inst = _Instruments(*instruments)
    ids = blocks.ids()
    n, G = blocks.n, blocks.G
    zeta, rho, h = config.zeta, config.rho, config.h
    eta_c = _normals(rng, G)
    eta_i = _normals(rng, n)
    w1 = _normals(rng, G)
    w2 = _normals(rng, n)
    eps_c = math.sqrt(rho) * eta_c + math.sqrt(1 - rho) * w1
    eps_i = math.sqrt(rho) * eta_i + math.sqrt(1 - rho) * w2
    a = np.abs(inst.z_common[:, 0]) ** h
    eta = math.sqrt(zeta) * eta_c[ids] + math.sqrt(1 - zeta) * eta_i
    eps = math.sqrt(zeta) * (a * eps_c)[ids] + math.sqrt(1 - zeta) * eps_i
    Pi = np.zeros(k)
    Pi[0] = config.pi1
    x = inst.Z @ Pi + eta
    y = x * config.beta0 + eps
    design = ClusteredDesign(y=y, X=x[:, None], Z=inst.Z, blocks=blocks)
    sigma, omega, xi = _error_moments(config, blocks, inst.z_common)
    truth = Truth(
        beta0=config.beta0, Pi=Pi, z_common=inst.z_common,
        variances=AnalyticVarianceInputs(sigma, omega, xi, signal=(inst.Z @ Pi)[:, None]),
    )
    return design, truth


def _jar_design(design):
    return ClusteredDesign(
        y=design.y, X=design.X, Z=design.Z, blocks=ClusterBlocks.singletons(design.n)
    )


def _named(method: str) -> Callable:
    """Turn a method name into ``f(design, beta, alpha) -> bool``."""
    cf = Estimator.CROSS_FIT
    table = {
        "cluster-ar": lambda d, b, a: run_test(d, b, "cluster-ar", a).reject,
        "clj-ar": lambda d, b, a: run_test(d, b, "clj-ar", a).reject,
        "clj-score": lambda d, b, a: run_test(d, b, "clj-score", a).reject,
        "clmi-ar": lambda d, b, a: run_test(d, b, "clmi-ar", a).reject,
        "clj-ar-cf": lambda d, b, a: run_test(d, b, "clj-ar", a, estimator=cf).reject,
        "clj-score-cf": lambda d, b, a: run_test(d, b, "clj-score", a, estimator=cf).reject,
        "clj-ar-sym": lambda d, b, a: run_test(
            d, b, "clj-ar", a, kernel=KernelChoice.SYMMETRIC).reject,
        "jar": lambda d, b, a: run_test(_jar_design(d), b, "clj-ar", a).reject,
        "always-reject": lambda d, b, a: True,
    }
    if method not in table:
        raise ValueError(f"Unknown method {method!r}; choose from {sorted(table)}.")
    return table[method]


METHOD_NAMES = (
    "cluster-ar", "clj-ar", "clj-score", "clmi-ar", "clj-ar-cf", "clj-score-cf",
    "clj-ar-sym", "jar", "always-reject",
)


def _method_fns(methods):
    fns = []
    for m in methods:
        fns.append((m, _named(m)) if isinstance(m, str) else (getattr(m, "__name__", repr(m)), m))
    return fns


def _one_rep(config, k, rep, methods, betas):
    """Per-method, per-beta outcomes: 1 reject, 0 accept, -1 error."""
    design, _ = simulate_dataset(config, rep, k=k)
    fns = _method_fns(methods)
    out = np.zeros((len(fns), len(betas)), dtype=np.int8)
    for i, (_, fn) in enumerate(fns):
        for j, b in enumerate(betas):
            try:
                out[i, j] = 1 if fn(design, [b], config.alpha) else 0
            except (ClusterIVError, np.linalg.LinAlgError, ArithmeticError):
                out[i, j] = -1
    return out


def _chunk(args):
    config, k, reps, methods, betas = args
    return np.stack([_one_rep(config, k, r, methods, betas) for r in reps])


def _run(config, k, methods, betas, threads):
    reps = list(range(config.reps))
    if config.reps == 0:
        return np.zeros((0, len(methods), len(betas)), dtype=np.int8)
    if threads <= 1:
        return _chunk((config, k, reps, methods, betas))
    size = max(1, math.ceil(len(reps) / (4 * threads)))
    chunks = [reps[i:i + size] for i in range(0, len(reps), size)]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(_chunk, [(config, k, c, methods, betas) for c in chunks]))
    return np.concatenate(parts)


@dataclass
class RejectionTable:
    """Rejection frequencies of tests across replications.

    Each row is a dict with keys ``method``, ``k_or_beta``, ``rate``, ``se``,
    ``reps`` (replications without errors) and ``errors``.
    """

    kind: str
    config: McConfig
    rows: list = field(default_factory=list)

    COLUMNS = ("method", "k_or_beta", "rate", "se", "reps", "errors")

    def lookup(self, method, key) -> dict:
        for r in self.rows:
            if r["method"] == method and r["k_or_beta"] == key:
                return r
        raise KeyError((method, key))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.rows:
            w.writerow([
                r["method"], f"{r['k_or_beta']:.10g}", f"{r['rate']:.10g}",
                f"{r['se']:.10g}", r["reps"], r["errors"],
            ])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION, "kind": self.kind,
            "config": asdict(self.config), "rows": [dict(r) for r in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _rows(outcomes, names, keys):
    rows = []
    for i, m in enumerate(names):
        for j, key in enumerate(keys):
            col = outcomes[:, i, j]
            valid = int(np.sum(col >= 0))
            rate = float(np.sum(col == 1) / valid) if valid else float("nan")
            se = math.sqrt(rate * (1 - rate) / valid) if valid else float("nan")
            rows.append({
                "method": m, "k_or_beta": key, "rate": rate, "se": se,
                "reps": valid, "errors": int(np.sum(col < 0)),
            })
    return rows


def size_experiment(
    config: McConfig, methods: Sequence, k_list: Sequence[int], threads: int = 1
) -> RejectionTable:
    """Rejection rates of ``H0: beta = beta0`` for every method and ``k``.

    ``methods`` holds names from :data:`METHOD_NAMES` or callables
    ``f(design, beta, alpha) -> bool``. Replications where a test raises are
    counted in the ``errors`` column and left out of the rate.
    """
    names = [m if isinstance(m, str) else getattr(m, "__name__", repr(m)) for m in methods]
    table = RejectionTable("size", config)
    for k in k_list:
        out = _run(replace(config, k=int(k)), int(k), list(methods), [config.beta0], threads)
        rows = _rows(out, names, [int(k)])
        table.rows.extend(rows)
    table.rows.sort(key=lambda r: (names.index(r["method"]), r["k_or_beta"]))
    return table


def power_experiment(
    config: McConfig, methods: Sequence, beta_grid: Sequence[float], threads: int = 1
) -> RejectionTable:
    """Rejection rates of ``H0: beta = b`` for each ``b`` in ``beta_grid``.

    Data are generated at ``config.beta0`` with ``config.k`` instruments; each
    replication's dataset is reused across the grid.
    """
    names = [m if isinstance(m, str) else getattr(m, "__name__", repr(m)) for m in methods]
    betas = [float(b) for b in beta_grid]
    out = _run(config, config.k, list(methods), betas, threads)
    return RejectionTable("power", config, _rows(out, names, betas))
