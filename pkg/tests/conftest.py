import numpy as np
import pytest

from rulcast.model import ModelConfig, init_state


def tiny_config(**overrides) -> ModelConfig:
    """The small configuration used throughout: N = (9-3)//2 + 2 = 5 patches."""
    base = dict(
        feature_dim=2,
        lookback=9,
        horizon=4,
        hidden=8,
        blocks=2,
        heads=2,
        patch=3,
        patch_stride=2,
        dropout=0.0,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def config():
    return tiny_config()


@pytest.fixture
def state(config):
    return init_state(config, seed=1)


@pytest.fixture
def data(config):
    """A small synthetic regression set whose labels depend on the windows."""
    rng = np.random.default_rng(0)
    n = 24
    xs = rng.normal(size=(n, config.lookback, config.feature_dim))
    trend = xs.mean(axis=(1, 2))[:, None]
    ys = 0.5 + 0.3 * trend * np.linspace(1.0, 0.4, config.horizon)
    return xs, ys
