import numpy as np
import pytest
from scipy.spatial.distance import pdist, squareform

from refined.dataio import FeatureTable
from refined.distances import DistanceMatrix
from refined import instrument


def labels(p):
    return [f"f{j:03d}" for j in range(p)]


def table_from_values(values, response=None, ids=None):
    values = np.asarray(values, dtype=float)
    n, p = values.shape
    if response is None:
        response = np.arange(n, dtype=float)
    if ids is None:
        ids = [f"s{i:03d}" for i in range(n)]
    return FeatureTable(ids, labels(p), values, response)


def random_table(n, p, seed=0):
    rng = np.random.default_rng(seed)
    return table_from_values(rng.normal(size=(n, p)), rng.normal(size=n))


def realizable_distances(p, seed=0, dim=2, scale=1.0):
    """Distances of random points in R^dim: Euclidean-realizable by design."""
    rng = np.random.default_rng(seed)
    points = rng.uniform(size=(p, dim)) * scale
    return DistanceMatrix(labels(p), squareform(pdist(points))), points


def random_symmetric_distances(p, seed=0, low=0.1, high=2.0):
    rng = np.random.default_rng(seed)
    m = rng.uniform(low, high, size=(p, p))
    d = (m + m.T) / 2.0
    np.fill_diagonal(d, 0.0)
    return DistanceMatrix(labels(p), d)


@pytest.fixture(autouse=True)
def _reset_counters():
    instrument.counters.reset()
    yield
    instrument.counters.reset()
