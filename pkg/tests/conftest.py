import numpy as np
import pytest
import torch

from multiref.config import ModelConfig
from multiref.data.synthetic import SyntheticSpec, generate_synthetic
from multiref.model.generator import ReenactmentModel

torch.set_num_threads(1)


def tiny_config(**kw) -> ModelConfig:
    base = dict(
        resolution=16, block_expansion=2, num_down_blocks=2, num_bottleneck_blocks=1, num_kp=3,
        kp_block_expansion=4, kp_max_features=16, kp_num_blocks=2,
        dm_block_expansion=4, dm_max_features=16, dm_num_blocks=2,
        disc_block_expansion=4, disc_num_blocks=2, disc_max_features=16,
    )
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def tiny_model(tiny_cfg):
    torch.manual_seed(0)
    return ReenactmentModel(tiny_cfg).eval()


@pytest.fixture(scope="session")
def small_dataset():
    spec = SyntheticSpec(subjects=2, frames_per_sequence=7, resolution=16, illumination_variants=1,
                         single_illumination_subjects=(), supersample=1)
    return generate_synthetic(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
