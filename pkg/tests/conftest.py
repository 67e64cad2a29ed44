import numpy as np
import pytest
import torch

from sefgan.config import CondNetConfig, FlowConfig, config_from_mapping

torch.set_num_threads(2)


def tiny_flow_cfg(**overrides) -> FlowConfig:
    """A minimal flow config used across the unit tests."""
    base = dict(
        n_blocks=2,
        squeeze_factor=2,
        subnet_layers=2,
        subnet_channels=8,
        subnet_kernel=3,
        cond_channels=6,
        early_output_every=0,
        early_output_channels=0,
    )
    base.update(overrides)
    return FlowConfig(**base)


def tiny_cond_cfg(**overrides) -> CondNetConfig:
    base = dict(channel_growth=4, kernel_size=5)
    base.update(overrides)
    return CondNetConfig(**base)


# Small model that trains in seconds on CPU; used by training/acceptance tests.
DESK_CONFIG = {
    "model": {
        "flow": {
            "n_blocks": 6,
            "squeeze_factor": 8,
            "subnet_layers": 4,
            "subnet_channels": 32,
            "cond_channels": 48,
            "early_output_every": 2,
            "early_output_channels": 2,
        },
        "cond": {"channel_growth": 8, "kernel_size": 9},
        "disc": {"mpd_channels": 4, "msd_channels": 16, "max_channels": 128},
    },
    "train": {"batch_size": 8, "seed": 0},
    "data": {"segment_samples": 2048, "segment_hop": 2048},
}


def desk_config():
    return config_from_mapping(DESK_CONFIG)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
