import numpy as np
import pytest

from intensity_rl import instances
from intensity_rl.model import Constant, NetworkInstance, Segment, SegmentedMNL


@pytest.fixture(scope="session")
def small_net():
    return instances.small_network()


@pytest.fixture(scope="session")
def airline_net():
    return instances.airline_network()


@pytest.fixture(scope="session")
def bursty_net():
    return instances.bursty_network()


@pytest.fixture(scope="session")
def queue_inst():
    return instances.admission_queue()


def random_instance(rng, m=None, n=None, n_segments=None, T=None):
    """Small random problem instance with a segmented MNL model."""
    m = m or int(rng.integers(1, 4))
    n = n or int(rng.integers(1, 7))
    n_segments = n_segments or int(rng.integers(1, min(3, n) + 1))
    A = np.zeros((m, n), dtype=int)
    for j in range(n):
        A[rng.integers(0, m), j] = 1
        extra = rng.integers(0, m, size=rng.integers(0, 2))
        for i in extra:
            A[i, j] += 1
    p = rng.uniform(0.5, 5.0, size=n)
    c = rng.integers(1, 5, size=m)
    labels = rng.integers(0, n_segments, size=n)
    labels[:n_segments] = np.arange(n_segments)  # every segment nonempty
    shares = rng.uniform(0.2, 1.0, size=n_segments)
    shares /= shares.sum()
    segs = []
    for l in range(n_segments):
        prods = tuple(int(j) for j in np.nonzero(labels == l)[0])
        segs.append(Segment(float(shares[l]), prods, tuple(float(w) for w in rng.uniform(0.5, 10.0, size=len(prods))), float(rng.uniform(0.5, 10.0))))
    return NetworkInstance(A, p, c, T=T or float(rng.uniform(2.0, 10.0)), arrival=Constant(float(rng.uniform(0.3, 1.5))), choice=SegmentedMNL(segs))
