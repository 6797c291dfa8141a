"""Time-frequency transforms, the network grid warp and mask application.

Spectrograms are ``[freq, time]`` arrays. The full-resolution STFT has
``window_length // 2 + 1`` bins and exactly ``frames`` columns for a clip of
``hop_length * frames`` samples; frame ``t`` is centred on sample ``t * hop_length``.
Networks see magnitudes resampled onto ``net_grid`` with a log-frequency warp.
"""

from dataclasses import asdict, dataclass
from typing import Any, Dict, Tuple

import numpy as np
from scipy.signal import get_window

from .exceptions import ConfigurationError, ContractViolation, InputError
from .logger import get_logger
from .models import AudioClip

logger = get_logger(__name__)

_WINDOW_FLOOR = 1e-10


@dataclass(frozen=True)
class StftConfig:
    sample_rate: int = 11025
    window_length: int = 1022
    hop_length: int = 256
    frames: int = 256
    net_freq: int = 256
    net_time: int = 256
    warp: str = "log"
    warp_base: float = 21.0
    log_compress: bool = False
    distance: str = "mean"

    def __post_init__(self):
        if self.window_length < 2 or self.window_length % 2:
            raise ConfigurationError("stft.window_length must be an even number >= 2")
        if self.hop_length < 1 or self.frames < 2:
            raise ConfigurationError("stft.hop_length must be >= 1 and stft.frames >= 2")
        # every sample must be covered by at least two frames for the inverse
        if self.hop_length > self.window_length // 2:
            raise ConfigurationError("stft.hop_length may not exceed half the window length")
        if not (2 <= self.net_freq <= self.freq_bins and 2 <= self.net_time <= self.frames):
            raise ConfigurationError(
                f"net grid {self.net_grid} must fit inside ({self.freq_bins}, {self.frames})"
            )
        if self.warp == "log" and self.warp_base <= 1.0:
            raise ConfigurationError("stft.warp_base must be greater than 1")

    @property
    def freq_bins(self) -> int:
        return self.window_length // 2 + 1

    @property
    def clip_length(self) -> int:
        return self.hop_length * self.frames

    @property
    def net_grid(self) -> Tuple[int, int]:
        return (self.net_freq, self.net_time)

    @property
    def duration(self) -> float:
        return self.clip_length / self.sample_rate

    def bin_frequency(self, k: float) -> float:
        return k * self.sample_rate / self.window_length

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_settings(cls, settings: Dict[str, Any]) -> "StftConfig":
        return cls(**settings["stft"])


@dataclass
class ComplexSpec:
    values: np.ndarray
    config: StftConfig

    def __post_init__(self):
        expected = (self.config.freq_bins, self.config.frames)
        if self.values.shape != expected:
            raise InputError(f"Spectrogram shape {self.values.shape} != {expected}")
        if not np.all(np.isfinite(self.values)):
            raise InputError("Spectrogram contains non-finite entries")

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.values)


@dataclass
class MagSpec:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if np.any(self.values < 0):
            raise ContractViolation("Magnitude spectrogram has negative entries")

    @property
    def shape(self):
        return self.values.shape


@dataclass
class Mask:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if np.any(self.values < 0.0) or np.any(self.values > 1.0):
            raise ContractViolation("Mask entries must lie in [0, 1]")

    @property
    def shape(self):
        return self.values.shape


def _window(cfg: StftConfig) -> np.ndarray:
    # periodic Hann
    return get_window("hann", cfg.window_length, fftbins=True)


def _padded_length(cfg: StftConfig) -> int:
    return (cfg.frames - 1) * cfg.hop_length + cfg.window_length


def stft(clip: AudioClip, cfg: StftConfig) -> ComplexSpec:
    x = np.asarray(clip.samples, dtype=np.float64)
    if x.shape[0] != cfg.clip_length:
        raise InputError(
            f"Clip has {x.shape[0]} samples, the STFT contract needs {cfg.clip_length}"
        )

    half = cfg.window_length // 2
    padded = np.zeros(_padded_length(cfg), dtype=np.float64)
    padded[half : half + x.shape[0]] = x

    frames = np.lib.stride_tricks.sliding_window_view(padded, cfg.window_length)
    frames = frames[:: cfg.hop_length][: cfg.frames] * _window(cfg)
    values = np.fft.rfft(frames, n=cfg.window_length, axis=1).T
    return ComplexSpec(np.ascontiguousarray(values), cfg)


def istft(spec: ComplexSpec, cfg: StftConfig) -> AudioClip:
    expected = (cfg.freq_bins, cfg.frames)
    if spec.values.shape != expected:
        raise InputError(f"Spectrogram shape {spec.values.shape} != {expected}")

    window = _window(cfg)
    frames = np.fft.irfft(spec.values.T, n=cfg.window_length, axis=1) * window

    length = _padded_length(cfg)
    signal = np.zeros(length, dtype=np.float64)
    norm = np.zeros(length, dtype=np.float64)
    for t in range(cfg.frames):
        start = t * cfg.hop_length
        signal[start : start + cfg.window_length] += frames[t]
        norm[start : start + cfg.window_length] += window**2

    signal = np.where(norm > _WINDOW_FLOOR, signal / np.maximum(norm, _WINDOW_FLOOR), 0.0)
    half = cfg.window_length // 2
    return AudioClip(signal[half : half + cfg.clip_length], cfg.sample_rate)


# Grid warp


def grid_positions(cfg: StftConfig) -> np.ndarray:
    """Fractional full-resolution bin index sampled by every network grid row."""
    u = np.linspace(0.0, 1.0, cfg.net_freq)
    if cfg.warp == "log":
        pos = (np.power(cfg.warp_base, u) - 1.0) / (cfg.warp_base - 1.0)
    else:
        pos = u
    return _snap(pos * (cfg.freq_bins - 1))


def warp_row_for_bin(k, cfg: StftConfig) -> np.ndarray:
    """Inverse of :func:`grid_positions`: fractional grid row for a full-resolution bin."""
    r = np.asarray(k, dtype=np.float64) / (cfg.freq_bins - 1)
    if cfg.warp == "log":
        u = np.log1p(r * (cfg.warp_base - 1.0)) / np.log(cfg.warp_base)
    else:
        u = r
    return _snap(u * (cfg.net_freq - 1))


def _snap(pos: np.ndarray) -> np.ndarray:
    rounded = np.round(pos)
    return np.where(np.abs(pos - rounded) < 1e-9, rounded, pos)


def _interp_axis(values: np.ndarray, pos: np.ndarray, axis: int) -> np.ndarray:
    n = values.shape[axis]
    lo = np.clip(np.floor(pos).astype(np.int64), 0, n - 1)
    hi = np.minimum(lo + 1, n - 1)
    frac = pos - lo
    shape = [1] * values.ndim
    shape[axis] = -1
    frac = frac.reshape(shape)
    a = np.take(values, lo, axis=axis)
    b = np.take(values, hi, axis=axis)
    # a + frac * (b - a) keeps constants exact
    return a + frac * (b - a)


def _time_positions(n_out: int, n_in: int) -> np.ndarray:
    return _snap(np.linspace(0.0, 1.0, n_out) * (n_in - 1))


def resample_magnitude(mag: np.ndarray, cfg: StftConfig) -> np.ndarray:
    out = _interp_axis(mag, grid_positions(cfg), axis=0)
    if cfg.net_time != cfg.frames:
        out = _interp_axis(out, _time_positions(cfg.net_time, cfg.frames), axis=1)
    return np.maximum(out, 0.0).astype(np.float32)


def upsample_mask(mask: np.ndarray, cfg: StftConfig) -> np.ndarray:
    rows = warp_row_for_bin(np.arange(cfg.freq_bins), cfg)
    full = _interp_axis(np.asarray(mask, dtype=np.float64), rows, axis=0)
    if cfg.net_time != cfg.frames:
        full = _interp_axis(full, _time_positions(cfg.frames, cfg.net_time), axis=1)
    return np.clip(full, 0.0, 1.0)


def magnitude_resample(spec: ComplexSpec, cfg: StftConfig) -> MagSpec:
    return MagSpec(resample_magnitude(spec.magnitude, cfg))


def clip_to_magspec(clip: AudioClip, cfg: StftConfig) -> MagSpec:
    return magnitude_resample(stft(clip, cfg), cfg)


def apply_mask(mixture: ComplexSpec, mask: Mask, cfg: StftConfig) -> ComplexSpec:
    """Scale the mixture magnitude by the upsampled mask, keeping the mixture phase."""
    if not isinstance(mask, Mask):
        mask = Mask(mask)
    if mask.shape != cfg.net_grid:
        raise InputError(f"Mask shape {mask.shape} != net grid {cfg.net_grid}")
    full = upsample_mask(mask.values, cfg)
    return ComplexSpec(mixture.values * full, cfg)


def spec_l1_distance(a, b, mode: str = "mean"):
    """L1 distance between two magnitude spectrograms.

    ``mode="mean"`` averages over entries so thresholds stay on a per-bin scale.
    Works on :class:`MagSpec`, numpy arrays and torch tensors alike.
    """
    a = a.values if isinstance(a, MagSpec) else a
    b = b.values if isinstance(b, MagSpec) else b
    if tuple(a.shape) != tuple(b.shape):
        raise InputError(f"Cannot compare spectrograms of shape {tuple(a.shape)} and {tuple(b.shape)}")
    diff = abs(a - b)
    if mode == "mean":
        return diff.mean()
    if mode == "sum":
        return diff.sum()
    raise ConfigurationError(f"Unknown distance mode {mode!r}")
