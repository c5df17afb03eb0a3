import numpy as np
import pytest

from Network import NetConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    """Small two-stage network that trains in seconds."""
    return NetConfig(modalities=2, num_classes=3, stem_width=4, widths=(4, 8), blocks=(1, 1),
                     expansion=1, seed=5)
