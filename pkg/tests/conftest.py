import numpy as np
import pytest

from clusteriv.blocks import ClusterBlocks
from clusteriv.data import ClusteredDesign


def random_sizes(rng, G, lo=1, hi=4):
    return tuple(int(s) for s in rng.integers(lo, hi + 1, size=G))


def random_design(rng, G=8, k=3, p=1, lo=1, hi=4, l=0, sizes=None):
    """Clustered design with normal data and cluster-correlated errors."""
    blocks = ClusterBlocks(sizes or random_sizes(rng, G, lo, hi))
    n = blocks.n
    ids = blocks.ids()
    Z = rng.standard_normal((n, k))
    common = rng.standard_normal(blocks.G)[ids]
    X = Z @ rng.standard_normal((k, p)) * 0.5 + rng.standard_normal((n, p)) + common[:, None]
    y = X @ np.ones(p) + rng.standard_normal(n) + common
    W = rng.standard_normal((n, l)) if l else None
    return ClusteredDesign(y=y, X=X, Z=Z, blocks=blocks, W=W)


@pytest.fixture
def rng():
    return np.random.default_rng(20240501)
