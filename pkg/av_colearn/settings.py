"""Run configuration: built-in defaults, JSON config files, dotted overrides.

Precedence is defaults < config file < ``--set`` overrides < environment knobs. Every
override is checked against the defaults schema before any work starts.
"""

import copy
import hashlib
import json
import os
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

from .exceptions import ConfigurationError
from .logger import get_logger

logger = get_logger(__name__)

ENV_OUTPUT_DIR = "AV_COLEARN_OUTPUT_DIR"
ENV_WORKERS = "AV_COLEARN_WORKERS"

DEFAULTS: Dict[str, Any] = {
    "output_dir": "runs",
    "workers": 0,
    "world": {
        "world_seed": 1234,
        "num_classes": 11,
        "feature_dim": 64,
        "feature_noise": 0.3,
        "objects_per_base": 1,
        "mode": "solo",
        "duet_audible_prob": 0.5,
        "f0_low": 110.0,
        "f0_high": 1760.0,
        "source_peak": 0.25,
        "bases": {"train": 220, "val": 22, "test": 22},
        "sizes": {"train": 2000, "val": 100, "test": 100},
    },
    "stft": {
        "sample_rate": 11025,
        "window_length": 1022,
        "hop_length": 256,
        "frames": 256,
        "net_freq": 256,
        "net_time": 256,
        "warp": "log",
        "warp_base": 21.0,
        "log_compress": False,
        "distance": "mean",
    },
    "model": {
        "embed_dim": 128,
        "object_hidden": 128,
        "audio_widths": [16, 32, 64],
        "grounder_widths": [128, 64],
        "unet_base": 16,
        "unet_levels": 5,
        "sep_channels": 32,
    },
    "train": {
        "mode": "ccol",
        "batch_size": 16,
        "epochs_per_stage": 20,
        "base_lr": 1e-4,
        "lr_milestones": None,
        "lr_factor": 0.1,
        "betas": [0.9, 0.999],
        "adam_eps": 1e-8,
        "epsilon": 0.1,
        "seed": 0,
        "val_max_samples": 50,
        "log_every": 10,
    },
    "eval": {
        "filter_len": 512,
        "energy_threshold": 20.0,
        "floor_amplitude": 1e-10,
        "inf_cap_db": 300.0,
        "max_samples": None,
    },
}

FULL_SCALE: Dict[str, Any] = {
    "world": {
        "bases": {"train": 468, "val": 26, "test": 26},
        "sizes": {"train": 18720, "val": 260, "test": 260},
    },
    "train": {"batch_size": 48, "epochs_per_stage": 60},
}

# Keys whose default is None accept these types.
_NULLABLE = {
    "train.lr_milestones": (list,),
    "eval.max_samples": (int,),
}


def _merge(base: Dict[str, Any], other: Dict[str, Any], prefix: str = "") -> None:
    for key, value in other.items():
        dotted = f"{prefix}{key}"
        if key not in base:
            raise ConfigurationError(f"Unknown configuration key '{dotted}'")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigurationError(f"'{dotted}' must be a section, got {value!r}")
            _merge(base[key], value, prefix=f"{dotted}.")
        else:
            base[key] = _check_type(dotted, base[key], value)


def _check_type(dotted: str, default: Any, value: Any) -> Any:
    if value is None:
        if default is None or dotted in _NULLABLE:
            return None
        raise ConfigurationError(f"'{dotted}' may not be null")

    if default is None:
        allowed = _NULLABLE.get(dotted, ())
        if allowed and not isinstance(value, allowed):
            raise ConfigurationError(f"'{dotted}' expects {allowed[0].__name__}, got {value!r}")
        return value

    # bool is an int subclass, keep them apart
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"'{dotted}' expects true/false, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"'{dotted}' expects a number, got {value!r}")
        return float(value)
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"'{dotted}' expects an integer, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigurationError(f"'{dotted}' expects a list, got {value!r}")
        return value
    if not isinstance(value, type(default)):
        raise ConfigurationError(
            f"'{dotted}' expects {type(default).__name__}, got {value!r}"
        )
    return value


def parse_override(text: str) -> Dict[str, Any]:
    """Turn ``a.b.c=value`` into a nested dictionary. Values are read as JSON when
    possible and as plain strings otherwise."""
    if "=" not in text:
        raise ConfigurationError(f"Override '{text}' is not of the form key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigurationError(f"Override '{text}' has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw

    nested: Dict[str, Any] = {}
    cursor = nested
    parts = key.split(".")
    for part in parts[:-1]:
        cursor = cursor.setdefault(part, {})
    cursor[parts[-1]] = value
    return nested


def load_settings(
    config_path: Optional[str] = None,
    overrides: Iterable[str] = (),
    full_scale: bool = False,
    environ: Optional[Dict[str, str]] = None,
) -> Dict[str, Any]:
    settings = copy.deepcopy(DEFAULTS)

    if full_scale:
        _merge(settings, copy.deepcopy(FULL_SCALE))

    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigurationError(f"Config file {path} does not exist")
        try:
            with path.open("r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"Config file {path} is not valid JSON: {e}")
        if not isinstance(data, dict):
            raise ConfigurationError(f"Config file {path} must hold a JSON object")
        _merge(settings, data)

    for override in overrides:
        _merge(settings, parse_override(override))

    environ = os.environ if environ is None else environ
    if environ.get(ENV_OUTPUT_DIR):
        settings["output_dir"] = environ[ENV_OUTPUT_DIR]
    if environ.get(ENV_WORKERS):
        try:
            settings["workers"] = int(environ[ENV_WORKERS])
        except ValueError:
            raise ConfigurationError(
                f"{ENV_WORKERS} must be an integer, got {environ[ENV_WORKERS]!r}"
            )

    validate(settings)
    return settings


def validate(settings: Dict[str, Any]) -> None:
    world = settings["world"]
    if world["num_classes"] < 2:
        raise ConfigurationError("world.num_classes must be at least 2")
    if world["mode"] not in ("solo", "duet"):
        raise ConfigurationError(f"world.mode must be solo or duet, got {world['mode']!r}")
    if world["objects_per_base"] < 1:
        raise ConfigurationError("world.objects_per_base must be at least 1")
    for split in ("train", "val", "test"):
        if split not in world["sizes"] or split not in world["bases"]:
            raise ConfigurationError(f"world.sizes and world.bases need a '{split}' entry")

    train = settings["train"]
    if train["mode"] not in ("grounding_only", "random_obj", "col", "ccol", "oracle"):
        raise ConfigurationError(f"Unknown train.mode {train['mode']!r}")
    if train["batch_size"] < 1 or train["epochs_per_stage"] < 1:
        raise ConfigurationError("train.batch_size and train.epochs_per_stage must be positive")
    milestones = train["lr_milestones"]
    if milestones is not None and any(m >= train["epochs_per_stage"] for m in milestones):
        raise ConfigurationError("train.lr_milestones must lie below train.epochs_per_stage")

    if settings["stft"]["distance"] not in ("mean", "sum"):
        raise ConfigurationError("stft.distance must be 'mean' or 'sum'")
    if settings["stft"]["warp"] not in ("log", "linear"):
        raise ConfigurationError("stft.warp must be 'log' or 'linear'")
    if settings["workers"] < 0:
        raise ConfigurationError("workers must not be negative")


def settings_hash(settings: Dict[str, Any]) -> str:
    canonical = json.dumps(settings, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
