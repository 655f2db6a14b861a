import numpy as np
import pytest

from sinkhorn_tsp import EncoderConfig, SinkhornConfig, TrainConfig


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def micro_train_config(**overrides):
    """Config small enough that train() finishes in well under a second."""
    defaults = dict(
        n=6,
        epochs=2,
        batches_per_epoch=2,
        batch_size=8,
        baseline_val_size=16,
        seed=5,
        precision="float64",
        encoder=EncoderConfig(d=8, layers=1, heads=1),
        sinkhorn=SinkhornConfig(lam=2.0, iterations=1),
    )
    defaults.update(overrides)
    return TrainConfig(**defaults)


@pytest.fixture
def micro_config():
    return micro_train_config()
