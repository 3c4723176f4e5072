import pytest
import torch

from fedshield import ArchitectureConfig, make_synthetic_splits

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_splits():
    return make_synthetic_splits(n_train=64, n_test=32, image_shape=(3, 16, 16),
                                 num_classes=4, seed=0)


@pytest.fixture(scope="session")
def tiny_arch(tiny_splits):
    train = tiny_splits["train"]
    return ArchitectureConfig(input_shape=train.image_shape,
                              num_classes=train.num_classes)
