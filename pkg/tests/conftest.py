import os

# No log files from test runs
os.environ["CLOTH_LOG_DIR"] = ""

import pytest

from helpers import make_sample, resting
from src.utils.gnn import GnnConfig
from src.utils.mesh import make_template
from src.utils.observation import ObservationConfig
from src.utils.sim import SimParams


@pytest.fixture
def template5():
    return make_template(5, 5, 0.3)


@pytest.fixture
def template9():
    return make_template(9, 9, 0.3)


@pytest.fixture
def sim_params():
    return SimParams()


@pytest.fixture
def obs_config():
    return ObservationConfig(resolution=32, silhouette_resolution=16, max_points=256)


@pytest.fixture
def tiny_gnn():
    return GnnConfig(encoder_channels=(4, 8), vertex_dim=8, edge_dim=8, hidden_dim=8, iterations=2)


@pytest.fixture
def flat_sample(template5, obs_config):
    sample, _ = make_sample(template5, resting(template5), obs_config)
    return sample
