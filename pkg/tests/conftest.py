import dataclasses

import numpy as np
import pytest

from pcmu.config import (AttackerSection, DataSection, PrivacySection,
                         RunConfig, TrainSection)
from pcmu.data import SynthGenConfig
from pcmu.env import EnvConfig
from pcmu.nn import backend


@pytest.fixture(params=backend.available())
def nn_backend(request):
    """Run a test under every importable kernel backend."""
    previous = backend.name()
    backend.use(request.param)
    yield request.param
    backend.use(previous)


def tiny_run_config(episodes: int = 30, n_data: int = 24, seed: int = 1,
                    lam: float = 0.5, privacy_backend: str = "flatness",
                    horizon: int = 24, **privacy_kw) -> RunConfig:
    """Small, fast configuration for training-path tests."""
    cfg = RunConfig(
        env=EnvConfig(horizon_t=horizon),
        train=TrainSection(episodes=episodes, seed=seed, lambda_weight=lam,
                           batch_size=32, buffer_capacity=2000,
                           sync_every=120, train_every=8, hidden_width=24),
        privacy=PrivacySection(backend=privacy_backend, n_bins=16,
                               hnet_lstm_width=12, hnet_hidden_width=24,
                               refresh_batches=4, episode_batch_size=16,
                               step_batch_size=32, **privacy_kw),
        attacker=AttackerSection(epochs=8, patience=3),
        data=DataSection(synthetic=SynthGenConfig(seed=seed,
                                                  n_episodes=n_data)),
    )
    return cfg


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def replace_section(cfg: RunConfig, **sections) -> RunConfig:
    return dataclasses.replace(cfg, **sections)
