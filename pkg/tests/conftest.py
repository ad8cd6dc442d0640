import numpy as np
import pytest

from hordecl.datastream import DatasetSpec, gen_synthetic_dataset
from hordecl.harness import TrainProtocol


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset():
    """8 classes of 4x4 images; small enough for whole-stream tests."""
    return gen_synthetic_dataset(DatasetSpec(num_classes=8, samples_per_class=30,
                                             input_shape=(4, 4, 1), seed=3))


@pytest.fixture
def quick_protocol():
    return TrainProtocol(base_lr=0.05, batch_size=32, max_epochs=3, patience=2)
