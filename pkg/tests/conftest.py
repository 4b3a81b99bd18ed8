import numpy as np
import pytest


def natural(name: str, top: int = 0, left: int = 0, size: int = 128) -> np.ndarray:
    """Unit-interval HWC crop of a bundled photographic sample image."""
    from skimage import data
    img = getattr(data, name)()
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    crop = img[top:top + size, left:left + size, :3]
    assert crop.shape[:2] == (size, size), f"{name} too small for {size} at ({top},{left})"
    return (crop / 255.0).astype(np.float32)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
