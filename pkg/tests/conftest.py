import numpy as np
import pytest

from cachetrack import Aggregator, AggregatorConfig, TokenMatrix


def random_tokens(rng, frame_id, num_patch, num_register, d_k, grid=None):
    data = rng.standard_normal((num_patch + num_register, d_k)).astype(np.float32)
    return TokenMatrix(frame_id, data, num_patch, num_register, grid)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_config():
    return AggregatorConfig(num_layers=4, d_k=16, patch_size=14, num_register_tokens=2, seed=9)


@pytest.fixture
def small_aggregator(small_config):
    return Aggregator(small_config)
