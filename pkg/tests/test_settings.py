import json

import pytest

from av_colearn.exceptions import ConfigurationError
from av_colearn.settings import DEFAULTS, load_settings, parse_override, settings_hash


def test_defaults_are_desk_scale():
    settings = load_settings(environ={})
    assert settings["world"]["sizes"] == {"train": 2000, "val": 100, "test": 100}
    assert settings["train"]["epochs_per_stage"] == 20
    assert settings == DEFAULTS


def test_full_scale_profile():
    settings = load_settings(full_scale=True, environ={})
    assert settings["world"]["sizes"] == {"train": 18720, "val": 260, "test": 260}
    assert settings["train"]["batch_size"] == 48
    assert settings["train"]["epochs_per_stage"] == 60


def test_precedence(tmp_path):
    config = tmp_path / "c.json"
    config.write_text(json.dumps({"train": {"batch_size": 8}, "output_dir": "from-file"}))
    settings = load_settings(
        str(config),
        overrides=["train.batch_size=4"],
        environ={"AV_COLEARN_OUTPUT_DIR": "from-env", "AV_COLEARN_WORKERS": "3"},
    )
    assert settings["train"]["batch_size"] == 4
    assert settings["output_dir"] == "from-env"
    assert settings["workers"] == 3


def test_override_values_parse_as_json():
    assert parse_override("train.lr_milestones=[5,8]") == {"train": {"lr_milestones": [5, 8]}}
    assert parse_override("output_dir=runs/a") == {"output_dir": "runs/a"}
    settings = load_settings(overrides=["stft.log_compress=true", "eval.max_samples=3"], environ={})
    assert settings["stft"]["log_compress"] is True
    assert settings["eval"]["max_samples"] == 3


@pytest.mark.parametrize(
    "override",
    [
        "train.nope=1",
        "train.batch_size=1.5",
        "train.batch_size=true",
        "stft.distance=median",
        "train.mode=sop",
        "train.lr_milestones=[30]",
        "world=3",
        "missing-equals",
    ],
)
def test_invalid_overrides_are_rejected(override):
    with pytest.raises(ConfigurationError):
        load_settings(overrides=[override], environ={})


def test_bad_environment_worker_count():
    with pytest.raises(ConfigurationError):
        load_settings(environ={"AV_COLEARN_WORKERS": "many"})


def test_missing_and_malformed_config_files(tmp_path):
    with pytest.raises(ConfigurationError):
        load_settings(str(tmp_path / "absent.json"), environ={})
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    with pytest.raises(ConfigurationError):
        load_settings(str(broken), environ={})


def test_hash_tracks_content():
    a = load_settings(environ={})
    b = load_settings(environ={})
    assert settings_hash(a) == settings_hash(b)
    b["train"]["seed"] = 1
    assert settings_hash(a) != settings_hash(b)
