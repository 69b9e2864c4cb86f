import numpy as np
import pytest
import torch

from idswap.core import TrainConfig, validate_config
from idswap.data import synthesize_dataset


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_cfg():
    """Smallest config that exercises every code path quickly."""
    return validate_config(
        TrainConfig(
            n_id_blocks=1,
            n_discriminators=1,
            batch_size=2,
            image_size=16,
            embed_dim=8,
            steps=4,
            checkpoint_every=2,
            fm_start_layer=4,
            seed=7,
        )
    )


@pytest.fixture(scope="session")
def tiny_dataset():
    return synthesize_dataset(3, 6, image_size=16, seed=3)


@pytest.fixture(scope="session")
def small_dataset():
    """A few identities at full resolution for embedder/evaluation tests."""
    return synthesize_dataset(4, 30, image_size=64, seed=5)
