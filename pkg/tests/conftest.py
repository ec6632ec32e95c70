import numpy as np
import pytest

from ssm_ptq.harness import make_outlier_model, random_model
from ssm_ptq.model import ModelConfig


def toy_config(**overrides) -> ModelConfig:
    base = dict(
        n_layers=2, d_model=16, d_state=4, d_conv=4, dt_rank=2, vocab_size=64
    )
    base.update(overrides)
    return ModelConfig(**base)


def toy_model(seed=0, **overrides):
    return random_model(toy_config(**overrides), seed)


def outlier_model(channels, magnitude=50.0, seed=0, **overrides):
    return make_outlier_model(toy_config(**overrides), channels, magnitude, seed)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
