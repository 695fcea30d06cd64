import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def make_blobs(n_per_class, centers, noise, rng):
    """Tiny labeled 2-D clusters for optimizer and pipeline tests."""
    points, labels = [], []
    for cls, center in enumerate(centers):
        points.append(np.asarray(center) + rng.normal(0.0, noise, (n_per_class, 2)))
        labels.append(np.full(n_per_class, cls, dtype=np.int64))
    return np.concatenate(points), np.concatenate(labels)


def random_simplex(k, rng, concentration=1.0):
    return rng.dirichlet(np.full(k, concentration))
