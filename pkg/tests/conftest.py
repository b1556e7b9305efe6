from __future__ import annotations

import numpy as np
import pytest

from sgsplat.raster import Camera


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def random_unit(rng, n=None):
    return unit(rng.normal(size=(3,) if n is None else (n, 3)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_cam():
    return Camera.look_at([0.3, 0.2, -3.0], [0.0, 0.0, 0.0], fx=40.0, width=40, height=32)
