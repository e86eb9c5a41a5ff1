"""Shared small fixtures; everything here stays tiny so unit tests run fast."""

import numpy as np
import pytest

from unpoison.data import Dataset, generate_shapes_dataset, split
from unpoison.models import TrainConfig, logistic, mlp1, train


@pytest.fixture(scope="session")
def small_shapes():
    """180 grayscale 16x16 shapes over 3 classes."""
    return generate_shapes_dataset(3, 60, side=16, noise=0.05, seed=11)


@pytest.fixture(scope="session")
def small_split(small_shapes):
    return split(small_shapes, [2 / 3, 1 / 3], seed=1, tags=["train", "test"])


@pytest.fixture(scope="session")
def color_shapes():
    return generate_shapes_dataset(3, 20, side=16, noise=0.05, seed=13, channels=3)


@pytest.fixture(scope="session")
def separable_logistic():
    """Linearly separated 2-class blobs rendered into 1x4x4 'images'."""
    g = np.random.default_rng(5)
    n = 120
    labels = np.repeat(np.arange(2), n // 2)
    base = np.where(labels[:, None] == 0, 0.2, 0.8)
    images = np.clip(base + g.normal(0, 0.05, size=(n, 16)), 0, 1)
    images = images.reshape(n, 1, 4, 4)
    ds = Dataset(images, labels, np.arange(n, dtype=np.int64), 2)
    arch = logistic((1, 4, 4), 2)
    ckpt = train(arch, ds, TrainConfig(epochs=40, batch_size=30,
                                       learning_rate=0.5, seed=0))
    return arch, ds, ckpt


@pytest.fixture(scope="session")
def tiny_mlp_fit(small_split):
    train_set, _ = small_split
    arch = mlp1((1, 16, 16), 3, hidden=8)
    cfg = TrainConfig(epochs=12, batch_size=32, learning_rate=0.05, seed=2)
    return arch, train_set, train(arch, train_set, cfg)
