import numpy as np
import pytest

from catnet import tensor as T
from catnet.data import generate_synthetic_dataset


@pytest.fixture(autouse=True)
def _reset_warnings():
    T.warnings.clear()
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_ds():
    """10 classes x 5 samples at 32x32; divides into 5 folds of 2 test classes."""
    return generate_synthetic_dataset(seed=3, n_classes=10, samples_per_class=5, image_size=32)
