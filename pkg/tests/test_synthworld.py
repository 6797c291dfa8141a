import json
from dataclasses import replace

import numpy as np
import pytest

from av_colearn.exceptions import ConfigurationError, IngestionError, InputError
from av_colearn.models import AudioClip, Manifest
from av_colearn.settings import load_settings
from av_colearn.synthworld import (
    CompositeDataset,
    SourceClass,
    WorldConfig,
    base_video,
    build_dataset,
    build_split,
    check_class_overlap,
    compose_sample,
    ingest_external,
    materialize,
    prototype,
    source_classes,
    synth_object,
    synth_source,
)
from av_colearn.tfspace import StftConfig
from av_colearn.utils import write_wav


def _peak_frequency(clip: AudioClip) -> float:
    spectrum = np.abs(np.fft.rfft(clip.samples.astype(np.float64)))
    return float(np.argmax(spectrum)) * clip.sample_rate / len(clip)


def test_fixed_fundamental_peaks_at_440(stft_cfg):
    source = SourceClass(0, (440.0, 440.0), 0.5, 0.0, "sustained")
    clip = synth_source(source, stft_cfg.frames, seed=0, stft=stft_cfg)
    assert len(clip) == stft_cfg.clip_length
    resolution = stft_cfg.sample_rate / len(clip)
    assert abs(_peak_frequency(clip) - 440.0) <= resolution


def test_source_is_deterministic(world, stft_cfg):
    source = source_classes(world)[2]
    a = synth_source(source, stft_cfg.frames, seed=11, stft=stft_cfg)
    b = synth_source(source, stft_cfg.frames, seed=11, stft=stft_cfg)
    assert a.samples.tobytes() == b.samples.tobytes()
    assert np.max(np.abs(a.samples)) == pytest.approx(world.source_peak, rel=1e-5)


def test_seeds_vary_the_fundamental_inside_the_class_range(world):
    stft = StftConfig()
    source = source_classes(world)[0]
    lo, hi = source.fundamental_range
    peaks = [_peak_frequency(synth_source(source, stft.frames, seed=s, stft=stft)) for s in (0, 1)]
    assert peaks[0] != peaks[1]
    for f in peaks:
        assert lo * 0.99 <= f <= hi * 1.01


def test_fundamental_above_nyquist_is_a_configuration_error(stft_cfg):
    source = SourceClass(0, (2500.0, 2600.0), 0.5, 5.0, "sustained")
    with pytest.raises(ConfigurationError):
        synth_source(source, stft_cfg.frames, seed=0, stft=stft_cfg)


def test_invalid_class_parameters():
    with pytest.raises(ConfigurationError):
        SourceClass(0, (440.0, 220.0), 0.5, 5.0, "sustained")
    with pytest.raises(ConfigurationError):
        SourceClass(0, (220.0, 440.0), 1.5, 5.0, "sustained")
    with pytest.raises(ConfigurationError):
        SourceClass(0, (220.0, 440.0), 0.5, 5.0, "plucked")


def test_overlapping_classes_are_rejected():
    a = SourceClass(0, (200.0, 300.0), 0.5, 5.0, "sustained")
    b = SourceClass(1, (240.0, 340.0), 0.5, 5.0, "sustained")
    with pytest.raises(ConfigurationError):
        check_class_overlap([a, b])


def test_class_table_keeps_classes_apart(world):
    classes = source_classes(world)
    assert len(classes) == world.num_classes
    check_class_overlap(classes)


def test_object_features(world):
    a = synth_object(3, 7, world)
    b = synth_object(3, 7, world)
    assert np.array_equal(a.raw_feature, b.raw_feature)
    assert a.is_audible_gt is None

    noiseless = replace(world, feature_noise=0.0)
    assert np.allclose(synth_object(3, 7, noiseless).raw_feature, prototype(3, noiseless))


def test_object_features_center_on_the_prototype(world):
    features = np.stack([synth_object(1, seed, world).raw_feature for seed in range(1000)])
    bound = 4.5 * world.feature_noise / np.sqrt(1000)
    assert np.all(np.abs(features.mean(axis=0) - prototype(1, world)) < bound)


def test_object_class_out_of_range(world):
    with pytest.raises(InputError):
        synth_object(world.num_classes, 0, world)


def _bases(world, stft, ids=(0, 1, 2, 3)):
    return [base_video(b, world, stft) for b in ids]


def test_solo_composition(world, stft_cfg):
    bases = _bases(world, stft_cfg)
    sample = compose_sample(bases, "solo")
    assert [len(v) for v in sample.videos] == [2, 2]
    assert [o.is_audible_gt for o in sample.video1_objects] == [True, False]
    assert [o.is_audible_gt for o in sample.video2_objects] == [True, False]
    assert np.allclose(sample.sound1.samples, bases[0].audio.samples)
    assert np.allclose(sample.mixture.samples, bases[0].audio.samples + bases[2].audio.samples)
    silent_id = sample.video1_objects[1].object_id
    assert not np.any(sample.object_sounds[silent_id].samples)


def test_degenerate_duet_matches_solo(world, stft_cfg):
    bases = _bases(world, stft_cfg)
    solo = compose_sample(bases, "solo")
    duet = compose_sample(bases, "duet", audible=(True, False, True, False))
    assert np.array_equal(solo.mixture.samples, duet.mixture.samples)
    assert [o.is_audible_gt for o in duet.video1_objects] == [True, False]


def test_duet_partner_adds_to_its_video(world, stft_cfg):
    bases = _bases(world, stft_cfg)
    duet = compose_sample(bases, "duet", audible=(True, True, True, False))
    assert [o.is_audible_gt for o in duet.video1_objects] == [True, True]
    assert np.allclose(duet.sound1.samples, bases[0].audio.samples + bases[1].audio.samples, atol=1e-6)


def test_composition_errors(world, stft_cfg):
    bases = _bases(world, stft_cfg)
    with pytest.raises(InputError):
        compose_sample(bases[:3])
    short = replace(bases[1], audio=AudioClip(bases[1].audio.samples[:100], stft_cfg.sample_rate))
    with pytest.raises(InputError):
        compose_sample([bases[0], short, bases[2], bases[3]])
    with pytest.raises(InputError):
        compose_sample(bases, "duet", audible=(False, True, True, False))


def test_dataset_sizes_and_disjoint_splits(world):
    manifests = build_dataset(world)
    assert {s: len(m) for s, m in manifests.items()} == {"train": 8, "val": 4, "test": 4}
    train, val, test = (manifests[s].base_ids() for s in ("train", "val", "test"))
    assert not (train & val) and not (train & test) and not (val & test)
    for entry in manifests["train"].entries:
        classes = {b % world.num_classes for b in entry.base_ids}
        assert len(classes) == 4


def test_manifests_are_byte_identical_across_builds(world, tmp_path):
    for attempt in ("a", "b"):
        for split, manifest in build_dataset(world).items():
            manifest.write(tmp_path / attempt / f"{split}.jsonl")
    for split in ("train", "val", "test"):
        assert (tmp_path / "a" / f"{split}.jsonl").read_bytes() == (tmp_path / "b" / f"{split}.jsonl").read_bytes()


def test_manifest_round_trip_reproduces_waveforms(world, stft_cfg, tmp_path):
    manifest = build_split("val", world)
    manifest.write(tmp_path / "val.jsonl")
    reread = Manifest.read(tmp_path / "val.jsonl")
    a = materialize(manifest.entries[0], world, stft_cfg)
    b = materialize(reread.entries[0], world, stft_cfg)
    assert a.mixture.samples.tobytes() == b.mixture.samples.tobytes()


def test_world_seed_mismatch_is_refused(world, stft_cfg):
    entry = build_split("test", world).entries[0]
    with pytest.raises(ConfigurationError):
        materialize(entry, replace(world, world_seed=world.world_seed + 1), stft_cfg)


def test_size_beyond_capacity(world):
    crowded = replace(world, sizes=(("train", 8), ("val", 10**6), ("test", 4)))
    with pytest.raises(ConfigurationError):
        build_split("val", crowded)


def test_full_scale_sizes():
    world = WorldConfig.from_settings(load_settings(full_scale=True, environ={}))
    assert [world.size(s) for s in ("train", "val", "test")] == [18720, 260, 260]


def _external_video(tmp_path, stft, name, audible, rate=None, dim=8):
    audio_dir, feature_dir = tmp_path / "audio", tmp_path / "features"
    feature_dir.mkdir(parents=True, exist_ok=True)
    t = np.arange(stft.clip_length) / stft.sample_rate
    write_wav(audio_dir / f"{name}.wav", 0.1 * np.sin(2 * np.pi * 300 * t), rate or stft.sample_rate)
    objects = []
    for j, flag in enumerate(audible):
        (feature_dir / f"{name}-{j}.json").write_text(json.dumps([0.1 * j] * dim))
        objects.append({"object_id": f"{name}-{j}", "feature": f"{name}-{j}.json", "audible": flag})
    return {"sample_id": name, "audio": f"{name}.wav", "objects": objects}


def _write_mapping(tmp_path, records):
    path = tmp_path / "mapping.jsonl"
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return path


def test_ingest_counts_candidates(tmp_path, stft_cfg):
    mapping = _write_mapping(tmp_path, [_external_video(tmp_path, stft_cfg, "v1", [True, False])])
    manifest = ingest_external(tmp_path / "audio", tmp_path / "features", mapping, stft_cfg, 8)
    assert len(manifest) == 1
    assert len(manifest.entries[0].objects) == 2
    assert manifest.is_external


def test_ingest_empty_mapping(tmp_path, stft_cfg):
    mapping = _write_mapping(tmp_path, [])
    manifest = ingest_external(tmp_path, tmp_path, mapping, stft_cfg, 8)
    assert len(manifest) == 0


def test_ingest_rejects_wrong_rate_with_hint(tmp_path, stft_cfg):
    mapping = _write_mapping(tmp_path, [_external_video(tmp_path, stft_cfg, "v1", [True], rate=8000)])
    with pytest.raises(IngestionError, match="resample"):
        ingest_external(tmp_path / "audio", tmp_path / "features", mapping, stft_cfg, 8)


def test_ingest_names_the_entry_with_a_bad_feature(tmp_path, stft_cfg):
    mapping = _write_mapping(tmp_path, [_external_video(tmp_path, stft_cfg, "v7", [True], dim=5)])
    with pytest.raises(IngestionError, match="v7"):
        ingest_external(tmp_path / "audio", tmp_path / "features", mapping, stft_cfg, 8)


def test_external_entries_pair_into_samples(tmp_path, stft_cfg, world):
    records = [
        _external_video(tmp_path, stft_cfg, "v1", [True, False]),
        _external_video(tmp_path, stft_cfg, "v2", [True]),
        _external_video(tmp_path, stft_cfg, "v3", [True]),
    ]
    manifest = ingest_external(tmp_path / "audio", tmp_path / "features", _write_mapping(tmp_path, records), stft_cfg, 8)
    dataset = CompositeDataset(manifest, world, stft_cfg)
    assert len(dataset) == 1
    sample = dataset[0]
    assert sample.sample_id == "v1+v2"
    assert [len(v) for v in sample.videos] == [2, 1]
    assert dataset.has_labels
