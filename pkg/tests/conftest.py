"""Shared test fixtures and independent oracle helpers."""

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter


def blurred_noise(seed: int, h: int, w: int, sigma: float = 1.5) -> np.ndarray:
    """Band-limited random texture, independent of the package's generator."""
    rng = np.random.default_rng(seed)
    img = gaussian_filter(rng.random((h, w)), sigma=sigma)
    img -= img.min()
    img /= img.max()
    return np.round(img * 255).astype(np.uint8)


@pytest.fixture
def texture128():
    return blurred_noise(0, 128, 128)
