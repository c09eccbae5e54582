import numpy as np
import pytest
import torch

torch.set_num_threads(1)  # tiny tensors; oversubscription dominates runtime

from painsynth.core import ConditionBundle, Rng
from painsynth.data import DataGenConfig, generate_dataset
from painsynth.net import BatchedConditions, NetConfig, TemporalUnet

TINY_CONFIG = NetConfig(latent_dim=8, stack=4, widths=(16,), heads=4, cond_dim=16, emb_dim=16)


@pytest.fixture(scope="session")
def tiny_net():
    return TemporalUnet(TINY_CONFIG, seed=7)


@pytest.fixture()
def tiny_inputs():
    rng = Rng(11, 0)
    z = torch.tensor(rng.normal((2, 6, 4, 8)), dtype=torch.float32)
    labels = torch.tensor(rng.normal((2, 6)), dtype=torch.float32)
    bundles = [
        ConditionBundle(np.linspace(0.0, 4.0, 24), 1.2, 0.4),
        ConditionBundle(np.linspace(4.0, 0.0, 24), 0.5, -0.8),
    ]
    cond = BatchedConditions.from_bundles(bundles)
    return z, labels, cond, bundles


@pytest.fixture(scope="session")
def small_dataset():
    cfg = DataGenConfig(n_train=6, n_val=2, latent_dim=8, frames=240, stack=4)
    return generate_dataset(cfg, seed=123)
