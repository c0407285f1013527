import logging

import numpy as np
import pytest
from scipy import ndimage

from models.volume_model import BinaryMask, Volume


def blob_data(dims=(16, 16, 16), center=(7.5, 7.5, 7.5), sigma=3.0) -> np.ndarray:
    axes = [np.arange(n, dtype=np.float64) for n in dims]
    x, y, z = np.meshgrid(*axes, indexing="ij")
    radius2 = (x - center[0]) ** 2 + (y - center[1]) ** 2 + (z - center[2]) ** 2
    return np.exp(-radius2 / (2.0 * sigma**2)) + 0.02 * x


def texture_data(dims=(18, 18, 18), seed=0, sigma=1.5) -> np.ndarray:
    rng = np.random.default_rng(seed)
    data = ndimage.gaussian_filter(rng.standard_normal(dims), sigma, mode="mirror")
    return (data - data.min()) / (data.max() - data.min())


@pytest.fixture(autouse=True)
def quiet_logging():
    logging.getLogger().setLevel(logging.WARNING)
    yield


@pytest.fixture
def blob() -> Volume:
    return Volume.from_array(blob_data())


@pytest.fixture
def shifted_blob() -> Volume:
    """The blob moved by +1 mm along x"""
    return Volume.from_array(blob_data(center=(8.5, 7.5, 7.5)) - 0.02)


@pytest.fixture
def texture() -> Volume:
    return Volume.from_array(texture_data())


@pytest.fixture
def moved_texture() -> Volume:
    """Texture resampled at x + 0.6 mm"""
    data = texture_data()
    return Volume.from_array(ndimage.shift(data, (-0.6, 0.0, 0.0), order=3, mode="mirror"))


@pytest.fixture
def box_masks():
    """Two overlapping 8^3 boxes on a 20^3 grid"""
    a = np.zeros((20, 20, 20), dtype=bool)
    b = np.zeros((20, 20, 20), dtype=bool)
    a[4:12, 4:12, 4:12] = True
    b[8:16, 4:12, 4:12] = True
    grid = Volume.from_array(np.zeros((20, 20, 20))).grid
    return BinaryMask(a, grid), BinaryMask(b, grid)
