import pytest
import torch

from relocgan.data import from_uint8, render_domain
from relocgan.networks import ArchConfig
from relocgan.training import pretrain

# 4->8 generator small enough to train for a handful of steps inside a unit test.
TINY = ArchConfig(d_z=8, d_w=8, resolutions=(4, 8), channels=(16, 16))


@pytest.fixture(scope="session")
def tiny_arch():
    return TINY


@pytest.fixture(scope="session")
def toy_arch():
    """The documented toy configuration: 4 blocks, 11 style rows of width 64."""
    return ArchConfig()


@pytest.fixture(scope="session")
def tiny_source_images():
    return from_uint8(render_domain("source", 64, seed=5, resolution=8))


@pytest.fixture(scope="session")
def tiny_target_images():
    return from_uint8(render_domain("sketch", 10, seed=6, resolution=8))


@pytest.fixture(scope="session")
def tiny_source(tiny_source_images):
    """A briefly pretrained tiny source checkpoint shared across tests."""
    return pretrain(tiny_source_images, TINY, budget_kimg=0.16, seed=0, batch_size=8, log_every=0)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(0)
