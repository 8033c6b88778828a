import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def brute_nn(xy):
    """O(n^2) nearest-neighbour distances, same arithmetic as the library."""
    dx = xy[:, None, 0] - xy[None, :, 0]
    dy = xy[:, None, 1] - xy[None, :, 1]
    d = np.sqrt(dx * dx + dy * dy)
    np.fill_diagonal(d, np.inf)
    return d.min(axis=1)


def rel_l2(a, b):
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


def interior(a, frac=0.8):
    nr, nc = a.shape
    mr = int(round(nr * (1 - frac) / 2))
    mc = int(round(nc * (1 - frac) / 2))
    return a[mr:nr - mr, mc:nc - mc]
