import numpy as np
import pytest
import torch

from models.schemas import InfoConfig, LossConfig, NetConfig
from services.backbone_service import VGGBackbone, random_backbone
from services.dataset_service import make_synthetic_pair


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


@pytest.fixture(scope="session")
def backbone():
    return VGGBackbone(random_backbone(seed=0, depth=2), depth=2)


@pytest.fixture(scope="session")
def backbone_deep():
    return VGGBackbone(random_backbone(seed=0, depth=4), depth=4)


@pytest.fixture
def pair():
    return make_synthetic_pair(64, 64, seed=3)


@pytest.fixture
def small_pair():
    return make_synthetic_pair(32, 32, seed=1)


@pytest.fixture
def info_cfg():
    return InfoConfig()


@pytest.fixture
def loss_cfg():
    return LossConfig()


@pytest.fixture
def tiny_net_cfg():
    return NetConfig(base_channels=8, reduction=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def grid_image(rng, height, width):
    """Random image on the 8-bit grid so quantisation is exact"""
    return rng.integers(0, 256, size=(height, width)).astype(np.float64) / 255.0
