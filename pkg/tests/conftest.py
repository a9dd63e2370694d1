"""
Shared fixtures: seeded generators and a tiny float64 architecture small
enough for finite-difference checks and few-step training runs.
"""

import numpy as np
import pytest

from dual_branch_sam.config import ModelConfig


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """ViT 32 px / patch 8 (4x4 grid), conv 16 px, width 16, no regularization."""
    return ModelConfig(
        image_size_vit=32,
        patch_size=8,
        embed_dim=16,
        num_heads=2,
        depth=2,
        num_stages=2,
        se_reduction=4,
        mlp_ratio=2,
        image_size_conv=16,
        deform_heads=2,
        deform_points=2,
        decoder_heads=2,
        drop_rate=0.0,
        drop_path_rate=0.0,
        lr0=1e-3,
        epochs=1,
        batch_size=2,
        max_shift=4.0,
        dtype="float64",
    ).validate()


@pytest.fixture
def tiny_samples():
    from dual_branch_sam.data.synthetic import generate_sample

    gen = np.random.default_rng(7)
    return [generate_sample(i, 32, gen).validate() for i in range(4)]
