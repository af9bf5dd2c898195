import numpy as np
import pytest

from smckit.data import Dataset


def synthetic_images(n, num_classes=4, size=8, channels=3, seed=0, split="train"):
    """Noisy class-dependent blobs; learnable but not trivially so."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, size=n)
    protos = np.random.default_rng(1234).uniform(40, 215, size=(num_classes, size, size, channels))
    imgs = protos[labels] + rng.normal(0, 40, size=(n, size, size, channels))
    return Dataset(np.clip(imgs, 0, 255).astype(np.uint8), labels, num_classes, split)


@pytest.fixture
def tiny_train():
    return synthetic_images(64, seed=0)


@pytest.fixture
def tiny_val(tiny_train):
    val = synthetic_images(32, seed=1, split="val")
    return val.with_stats(tiny_train.mean, tiny_train.std)
