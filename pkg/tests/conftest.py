import json

import pytest
import torch
from django.conf import settings as django_settings

from av_colearn.nets import ArchConfig, ModelState
from av_colearn.settings import load_settings
from av_colearn.synthworld import WorldConfig
from av_colearn.tfspace import StftConfig

# 512-sample clips at 4 kHz on a 32x32 network grid
TINY_OVERRIDES = {
    "world": {
        "num_classes": 5,
        "feature_dim": 8,
        "f0_low": 110.0,
        "f0_high": 880.0,
        "bases": {"train": 20, "val": 10, "test": 10},
        "sizes": {"train": 8, "val": 4, "test": 4},
    },
    "stft": {
        "sample_rate": 4000,
        "window_length": 62,
        "hop_length": 16,
        "frames": 32,
        "net_freq": 32,
        "net_time": 32,
    },
    "model": {
        "embed_dim": 16,
        "object_hidden": 16,
        "audio_widths": [4, 8],
        "grounder_widths": [16, 8],
        "unet_base": 4,
        "unet_levels": 5,
        "sep_channels": 4,
    },
    "train": {"batch_size": 4, "epochs_per_stage": 2, "val_max_samples": 2},
    "eval": {"filter_len": 16},
}


def pytest_configure(config):
    if not django_settings.configured:
        django_settings.configure()


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY_OVERRIDES))
    return path


@pytest.fixture
def tiny_settings(tiny_config_file, tmp_path):
    settings = load_settings(str(tiny_config_file), environ={})
    settings["output_dir"] = str(tmp_path / "out")
    return settings


@pytest.fixture
def stft_cfg(tiny_settings):
    return StftConfig.from_settings(tiny_settings)


@pytest.fixture
def world(tiny_settings):
    return WorldConfig.from_settings(tiny_settings)


@pytest.fixture
def arch(tiny_settings):
    return ArchConfig.from_settings(tiny_settings)


@pytest.fixture
def model(arch, stft_cfg):
    return ModelState.fresh(arch, stft_cfg, seed=0).model.eval()


@pytest.fixture
def model64(arch, stft_cfg):
    return ModelState.fresh(arch, stft_cfg, seed=0, dtype=torch.float64).model.eval()


@pytest.fixture
def fixed_grounder():
    """Grounder whose g[0] is the first coordinate of each object embedding."""

    def grounder(f_s, objects):
        g0 = objects[..., :1]
        return torch.cat([g0, 1.0 - g0], dim=-1)

    return grounder
