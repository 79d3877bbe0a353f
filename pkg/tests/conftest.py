"""Shared fixtures"""
import numpy as np
import pytest

from src.config.settings import ModelConfig
from src.learning.svae import SVAE
from src.tools import rng as rng_streams
from src.utils.metrics import metrics


@pytest.fixture
def gen() -> np.random.Generator:
    return rng_streams.stream(1234, "tests")


@pytest.fixture(autouse=True)
def _reset_metrics():
    metrics.reset()
    yield
    metrics.reset()


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig(kind="slds", obs_dim=3, latent_dim=2, states=2, hidden=[4], activation="tanh",
                       layer_norm=False)


@pytest.fixture
def tiny_model(tiny_config) -> SVAE:
    return SVAE(tiny_config)


@pytest.fixture
def tiny_params(tiny_model):
    return tiny_model.init_params(rng_streams.stream(7, "init"))

