"""
Shared fixtures: seeded generators, the tiny model configuration and 64-bit mode.
"""

import numpy as np
import pytest

from brain.config import ModelConfig
from brain.model import build_model
from tensor import verification_mode


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def float64():
    """Run the test body with float64 tensors."""
    with verification_mode():
        yield


@pytest.fixture
def tiny_cfg():
    return ModelConfig.tiny()


@pytest.fixture
def tiny_model(tiny_cfg):
    return build_model(tiny_cfg, seed=3)
