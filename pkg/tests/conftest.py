import numpy as np
import pytest

from frcnn.kernels import available_backends


@pytest.fixture(params=available_backends())
def backend(request):
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_boxes(rng, n, lo=0.0, hi=500.0, min_side=1.0, max_side=200.0):
    xy = rng.uniform(lo, hi, (n, 2))
    wh = rng.uniform(min_side, max_side, (n, 2))
    return np.concatenate([xy, xy + wh], axis=1)
