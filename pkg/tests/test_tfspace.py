import numpy as np
import pytest
import torch

from av_colearn.exceptions import ConfigurationError, ContractViolation, InputError
from av_colearn.models import AudioClip
from av_colearn.tfspace import (
    ComplexSpec,
    MagSpec,
    Mask,
    StftConfig,
    apply_mask,
    clip_to_magspec,
    grid_positions,
    istft,
    magnitude_resample,
    spec_l1_distance,
    stft,
    upsample_mask,
    warp_row_for_bin,
)


def _random_clip(cfg, seed):
    rng = np.random.default_rng(seed)
    return AudioClip(rng.uniform(-0.5, 0.5, cfg.clip_length), cfg.sample_rate)


def test_default_contract_shape():
    cfg = StftConfig()
    assert (cfg.freq_bins, cfg.frames) == (512, 256)
    assert cfg.clip_length == 65536
    assert cfg.duration == pytest.approx(5.944, abs=1e-3)
    spec = stft(AudioClip.silence(cfg.clip_length, cfg.sample_rate), cfg)
    assert spec.values.shape == (512, 256)
    assert not np.any(spec.values)


def test_roundtrip_error(stft_cfg):
    for seed in range(100):
        x = _random_clip(stft_cfg, seed)
        y = istft(stft(x, stft_cfg), stft_cfg)
        error = np.linalg.norm(y.samples - x.samples) / np.linalg.norm(x.samples)
        assert error <= 1e-3


def test_zero_spectrogram_inverts_to_silence(stft_cfg):
    spec = ComplexSpec(np.zeros((stft_cfg.freq_bins, stft_cfg.frames), dtype=complex), stft_cfg)
    assert not np.any(istft(spec, stft_cfg).samples)


def test_bin_centered_sinusoid_peaks_at_its_bin(stft_cfg):
    k = 9
    t = np.arange(stft_cfg.clip_length) / stft_cfg.sample_rate
    clip = AudioClip(0.5 * np.sin(2 * np.pi * stft_cfg.bin_frequency(k) * t), stft_cfg.sample_rate)
    mag = stft(clip, stft_cfg).magnitude
    interior = mag[:, 2:-2]
    assert np.all(np.argmax(interior, axis=0) == k)


def test_length_and_shape_errors(stft_cfg):
    with pytest.raises(InputError):
        stft(AudioClip(np.zeros(stft_cfg.clip_length - 1), stft_cfg.sample_rate), stft_cfg)
    with pytest.raises(InputError):
        ComplexSpec(np.zeros((3, 3), dtype=complex), stft_cfg)


def test_invalid_configurations():
    with pytest.raises(ConfigurationError):
        StftConfig(window_length=1021)
    with pytest.raises(ConfigurationError):
        StftConfig(hop_length=600)
    with pytest.raises(ConfigurationError):
        StftConfig(net_freq=1024)
    with pytest.raises(ConfigurationError):
        StftConfig(warp_base=1.0)


def test_log_grid_spans_the_full_band(stft_cfg):
    pos = grid_positions(stft_cfg)
    assert pos[0] == 0.0
    assert pos[-1] == stft_cfg.freq_bins - 1
    assert np.all(np.diff(pos) > 0)
    # denser rows at low frequencies
    assert np.diff(pos)[0] < np.diff(pos)[-1]
    assert np.allclose(warp_row_for_bin(pos, stft_cfg), np.arange(stft_cfg.net_freq))


def test_resampling_preserves_constants(stft_cfg):
    ones = np.ones((stft_cfg.freq_bins, stft_cfg.frames))
    spec = ComplexSpec(ones.astype(complex), stft_cfg)
    mag = magnitude_resample(spec, stft_cfg)
    assert mag.shape == stft_cfg.net_grid
    assert np.allclose(mag.values, 1.0)
    assert np.allclose(upsample_mask(np.full(stft_cfg.net_grid, 0.25), stft_cfg), 0.25)


def test_magnitudes_are_never_negative(stft_cfg):
    assert np.all(clip_to_magspec(_random_clip(stft_cfg, 3), stft_cfg).values >= 0)
    with pytest.raises(ContractViolation):
        MagSpec(np.array([[-1.0]]))


def test_mask_application(stft_cfg):
    spec = stft(_random_clip(stft_cfg, 5), stft_cfg)
    ones = apply_mask(spec, Mask(np.ones(stft_cfg.net_grid)), stft_cfg)
    assert np.array_equal(ones.values, spec.values)

    zeros = apply_mask(spec, Mask(np.zeros(stft_cfg.net_grid)), stft_cfg)
    assert not np.any(zeros.values)
    assert not np.any(istft(zeros, stft_cfg).samples)

    half = apply_mask(spec, np.full(stft_cfg.net_grid, 0.5), stft_cfg)
    assert np.allclose(np.abs(half.values), 0.5 * np.abs(spec.values))
    nonzero = np.abs(spec.values) > 1e-9
    assert np.allclose(np.angle(half.values[nonzero]), np.angle(spec.values[nonzero]))


def test_mask_range_and_shape(stft_cfg):
    spec = stft(_random_clip(stft_cfg, 6), stft_cfg)
    with pytest.raises(ContractViolation):
        apply_mask(spec, np.full(stft_cfg.net_grid, 1.5), stft_cfg)
    with pytest.raises(InputError):
        apply_mask(spec, Mask(np.ones((4, 4))), stft_cfg)


def test_masking_never_amplifies(stft_cfg):
    spec = stft(_random_clip(stft_cfg, 7), stft_cfg)
    rng = np.random.default_rng(8)
    for _ in range(20):
        masked = apply_mask(spec, Mask(rng.uniform(0.0, 1.0, stft_cfg.net_grid)), stft_cfg)
        assert np.all(np.abs(masked.values) <= np.abs(spec.values) * (1 + 1e-12))


def test_l1_distance():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert spec_l1_distance(a, np.zeros((2, 2))) == pytest.approx(2.5)
    assert spec_l1_distance(a, a) == 0.0
    assert spec_l1_distance(MagSpec(a), MagSpec(np.zeros((2, 2))), mode="sum") == pytest.approx(10.0)
    t = torch.tensor(a)
    assert float(spec_l1_distance(t, torch.zeros(2, 2))) == pytest.approx(2.5)
    with pytest.raises(InputError):
        spec_l1_distance(a, np.zeros((3, 2)))
    with pytest.raises(ConfigurationError):
        spec_l1_distance(a, a, mode="median")


def test_l1_distance_is_a_metric_on_random_triples():
    rng = np.random.default_rng(9)
    for _ in range(200):
        shape = tuple(rng.integers(1, 9, size=2))
        a, b, c = (np.abs(rng.standard_normal(shape)) for _ in range(3))
        for mode in ("mean", "sum"):
            ab = spec_l1_distance(a, b, mode)
            assert ab == spec_l1_distance(b, a, mode)
            assert ab <= spec_l1_distance(a, c, mode) + spec_l1_distance(c, b, mode) + 1e-12
