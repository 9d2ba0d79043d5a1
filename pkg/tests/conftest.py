"""
Shared fixtures for the WarpSR test suite
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# Modules live flat under src/
sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from models import DegradationSpec, LossWeights, ModelVariant, TrainConfig  # noqa: E402
from sr_networks import create_profile  # noqa: E402
from tensor_autodiff import float64_mode  # noqa: E402


@pytest.fixture
def rng():
    """Seeded generator for reproducible test data."""
    return np.random.default_rng(42)


@pytest.fixture
def float64():
    """Run the test with 64-bit tensors."""
    with float64_mode():
        yield


@pytest.fixture
def micro_config():
    """Smallest model profile (4×4 -> 8×8)."""
    return create_profile('micro')


@pytest.fixture
def tiny_config():
    """Desk-scale model profile (8×8 -> 32×32)."""
    return create_profile('tiny')


@pytest.fixture
def tiny_spec(tiny_config):
    """Degradation protocol matching the tiny profile."""
    return tiny_config.degradation()


@pytest.fixture
def small_spec():
    """32 -> 8 degradation used by data tests."""
    return DegradationSpec(hr_size=32, lr_size=8, blur_sigma=1.2)


@pytest.fixture
def pixel_train_config():
    """Micro f1 run with the pixel loss only (no feature taps on 8×8 images)."""
    return TrainConfig(variant=ModelVariant.parse('f1'), profile='micro', loss_mode='pixel',
                       loss_weights=LossWeights.from_mode('pixel'),
                       lr=1e-3, epochs=2, batch_size=2, seed=3)
