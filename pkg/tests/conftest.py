import numpy as np
import pytest

from covcaps.config import RunConfig
from covcaps.data import PhantomConfig, generate_phantom
from covcaps.pipeline import Stage1Config, Stage2Config

# Small enough that a forward/backward pass takes milliseconds.
TINY_STAGE1 = Stage1Config(input_side=8, conv_channels=(2, 2, 4, 4), pool_window=2,
                           primary_dim=4, capsule_layers=((3, 4), (3, 4), (2, 4)))
TINY_STAGE2 = Stage2Config(input_side=8, candidate_count=3, conv_channels=(2, 2, 4),
                           pool_window=2, primary_dim=4, capsule_layers=((3, 4), (3, 4)))

SMALL_RUN = {
    "k": 2,
    "phantom": {"patients_per_class": 4, "slices_per_patient": 12, "side": 32,
                "candidate_count": 4, "blob_sigma": [1.0, 2.0],
                "consolidation_radius": [3.0, 4.0]},
    "stage1": {"input_side": 16, "pool_window": 4, "conv_channels": [4, 4, 8, 8]},
    "stage2": {"input_side": 16, "pool_window": 4, "candidate_count": 4},
    "stage1_training": {"epochs": 2, "learning_rate": 1e-3},
    "stage2_training": {"epochs": 2, "learning_rate": 1e-3},
    "fusion_training": {"epochs": 3, "learning_rate": 1e-3},
}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_run_config() -> RunConfig:
    return RunConfig.from_dict(SMALL_RUN)


@pytest.fixture(scope="session")
def small_phantom(small_run_config):
    return generate_phantom(small_run_config.phantom)


@pytest.fixture(scope="session")
def small_phantom_dir(tmp_path_factory, small_run_config):
    root = tmp_path_factory.mktemp("phantom")
    generate_phantom(small_run_config.phantom, root)
    return root


@pytest.fixture(scope="session")
def tiny_phantom():
    return generate_phantom(PhantomConfig(patients_per_class=2, slices_per_patient=10, side=32,
                                          blob_sigma=(1.0, 2.0),
                                          consolidation_radius=(3.0, 4.0)))
