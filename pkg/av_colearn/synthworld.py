"""The seeded synthetic cocktail-party world.

Base videos are pure functions of ``(world_seed, base_id)``: a harmonic source of the
base's class plus one object candidate per detected object. Composite samples combine
four base videos A, B, C, D: video 1 shows the objects of A and B, video 2 those of C
and D, and only A and C are heard (duet mode lets B and D sound with a probability).
"""

import itertools
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.signal import resample_poly
from torch.utils.data import Dataset

from .exceptions import ConfigurationError, IngestionError, InputError
from .logger import get_logger
from .models import AudioClip, CompositeSample, Manifest, ManifestEntry, ObjectCandidate
from .tfspace import StftConfig
from .utils import read_feature_record, read_jsonl, read_wav, wav_sample_rate

logger = get_logger(__name__)

SPLITS = ("train", "val", "test")
ENVELOPES = ("sustained", "decaying-strikes")

# Independent random streams derived from the world seed.
_STREAM_CLASS = 1
_STREAM_PROTOTYPE = 2
_STREAM_FEATURE = 3
_STREAM_AUDIO = 4
_STREAM_COMPOSE = 5

_MAX_PARTIALS = 16
_VIBRATO_DEPTH = 0.003


@dataclass(frozen=True)
class WorldConfig:
    world_seed: int = 1234
    num_classes: int = 11
    feature_dim: int = 64
    feature_noise: float = 0.3
    objects_per_base: int = 1
    mode: str = "solo"
    duet_audible_prob: float = 0.5
    f0_low: float = 110.0
    f0_high: float = 1760.0
    source_peak: float = 0.25
    bases: Tuple[Tuple[str, int], ...] = (("train", 220), ("val", 22), ("test", 22))
    sizes: Tuple[Tuple[str, int], ...] = (("train", 2000), ("val", 100), ("test", 100))

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigurationError("world needs at least two source classes")
        if self.world_seed < 0:
            raise ConfigurationError("world_seed must be non-negative")
        if not 0.0 < self.f0_low <= self.f0_high:
            raise ConfigurationError("world.f0_low must be positive and <= world.f0_high")
        if not 0.0 < self.source_peak <= 1.0:
            raise ConfigurationError("world.source_peak must lie in (0, 1]")
        if not 0.0 <= self.duet_audible_prob <= 1.0:
            raise ConfigurationError("world.duet_audible_prob must lie in [0, 1]")

    def base_count(self, split: str) -> int:
        return dict(self.bases)[split]

    def size(self, split: str) -> int:
        return dict(self.sizes)[split]

    def base_range(self, split: str) -> range:
        start = 0
        for name in SPLITS:
            count = self.base_count(name)
            if name == split:
                return range(start, start + count)
            start += count
        raise InputError(f"Unknown split {split!r}")

    @classmethod
    def from_settings(cls, settings: Dict[str, Any]) -> "WorldConfig":
        world = dict(settings["world"])
        world["bases"] = tuple((s, int(world["bases"][s])) for s in SPLITS)
        world["sizes"] = tuple((s, int(world["sizes"][s])) for s in SPLITS)
        return cls(**world)


@dataclass(frozen=True)
class SourceClass:
    class_id: int
    fundamental_range: Tuple[float, float]
    partial_decay: float
    vibrato_rate: float
    envelope_kind: str

    def __post_init__(self):
        lo, hi = self.fundamental_range
        if not 0.0 < lo <= hi:
            raise ConfigurationError(f"class {self.class_id}: bad fundamental range {lo}..{hi}")
        if not 0.0 < self.partial_decay < 1.0:
            raise ConfigurationError(f"class {self.class_id}: partial_decay must lie in (0, 1)")
        if self.vibrato_rate < 0.0:
            raise ConfigurationError(f"class {self.class_id}: negative vibrato rate")
        if self.envelope_kind not in ENVELOPES:
            raise ConfigurationError(f"class {self.class_id}: unknown envelope {self.envelope_kind!r}")


@dataclass
class BaseVideo:
    base_id: int
    class_id: int
    audio_seed: int
    audio: AudioClip
    objects: List[ObjectCandidate] = field(default_factory=list)


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def _range_overlap(a: Tuple[float, float], b: Tuple[float, float]) -> float:
    """Overlap of two ranges as a fraction of the narrower one."""
    overlap = min(a[1], b[1]) - max(a[0], b[0])
    if overlap < 0:
        return 0.0
    narrow = min(a[1] - a[0], b[1] - b[0])
    if narrow <= 0:
        # a point range lying inside the other one
        return 1.0
    return overlap / narrow


def check_class_overlap(classes: Sequence[SourceClass]) -> None:
    for a, b in itertools.combinations(classes, 2):
        if _range_overlap(a.fundamental_range, b.fundamental_range) >= 0.5:
            raise ConfigurationError(
                f"classes {a.class_id} and {b.class_id} overlap by 50% or more in fundamental range"
            )


@lru_cache(maxsize=16)
def _source_classes(world_seed: int, num_classes: int, f0_low: float, f0_high: float):
    rng = _rng(world_seed, _STREAM_CLASS)
    span = math.log2(f0_high / f0_low)
    spacing = span / (num_classes - 1)
    half_width = 0.3 * spacing
    centers = [f0_low * 2.0 ** (i * spacing) for i in range(num_classes)]
    order = rng.permutation(num_classes)

    classes = []
    for class_id in range(num_classes):
        center = centers[order[class_id]]
        classes.append(
            SourceClass(
                class_id=class_id,
                fundamental_range=(center * 2.0**-half_width, center * 2.0**half_width),
                partial_decay=float(rng.uniform(0.35, 0.8)),
                vibrato_rate=float(rng.uniform(3.0, 7.0)),
                envelope_kind=ENVELOPES[int(rng.integers(0, len(ENVELOPES)))],
            )
        )
    classes = tuple(classes)
    check_class_overlap(classes)
    return classes


def source_classes(world: WorldConfig) -> Tuple[SourceClass, ...]:
    return _source_classes(world.world_seed, world.num_classes, world.f0_low, world.f0_high)


def _envelope(kind: str, t: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if kind == "sustained":
        ramp = 0.05
        attack = np.clip(t / ramp, 0.0, 1.0)
        release = np.clip((t[-1] - t) / ramp, 0.0, 1.0)
        swell = 0.85 + 0.15 * np.sin(2 * np.pi * rng.uniform(0.2, 0.5) * t + rng.uniform(0, 2 * np.pi))
        return attack * release * swell
    period = rng.uniform(0.25, 0.6)
    offset = rng.uniform(0.0, period)
    phase = np.mod(t + offset, period)
    return np.exp(-phase / (0.3 * period))


def synth_source(
    source: SourceClass,
    duration_frames: int,
    seed: int,
    stft: StftConfig,
    peak: float = 0.25,
) -> AudioClip:
    if duration_frames <= 0:
        raise InputError("duration_frames must be positive")

    sr = stft.sample_rate
    n = duration_frames * stft.hop_length
    t = np.arange(n, dtype=np.float64) / sr
    rng = _rng(seed)

    lo, hi = source.fundamental_range
    f0 = float(rng.uniform(lo, hi)) if hi > lo else lo
    nyquist = sr / 2.0
    if f0 * (1 + _VIBRATO_DEPTH) >= nyquist:
        raise ConfigurationError(
            f"class {source.class_id}: fundamental {f0:.1f} Hz exceeds Nyquist at {sr} Hz"
        )

    vibrato = 1.0 + _VIBRATO_DEPTH * np.sin(
        2 * np.pi * source.vibrato_rate * t + rng.uniform(0, 2 * np.pi)
    )
    phase = 2 * np.pi * np.cumsum(f0 * vibrato) / sr

    partials = int(min(_MAX_PARTIALS, max(1, math.floor(0.9 * nyquist / (f0 * (1 + _VIBRATO_DEPTH))))))
    offsets = rng.uniform(0, 2 * np.pi, size=partials)
    x = np.zeros(n, dtype=np.float64)
    for h in range(partials):
        x += source.partial_decay**h * np.sin((h + 1) * phase + offsets[h])

    x *= _envelope(source.envelope_kind, t, rng)
    top = np.max(np.abs(x))
    if top > 0:
        x *= peak / top
    return AudioClip(x.astype(np.float32), sr)


@lru_cache(maxsize=16)
def _prototypes(world_seed: int, num_classes: int, feature_dim: int) -> np.ndarray:
    protos = _rng(world_seed, _STREAM_PROTOTYPE).standard_normal((num_classes, feature_dim))
    protos.setflags(write=False)
    return protos


def prototype(class_id: int, world: WorldConfig) -> np.ndarray:
    return _prototypes(world.world_seed, world.num_classes, world.feature_dim)[class_id]


def synth_object(class_id: int, seed: int, world: WorldConfig, object_id: str = "") -> ObjectCandidate:
    if not 0 <= class_id < world.num_classes:
        raise InputError(f"class_id {class_id} outside [0, {world.num_classes})")
    noise = _rng(seed).standard_normal(world.feature_dim)
    feature = prototype(class_id, world) + world.feature_noise * noise
    return ObjectCandidate(
        object_id=object_id or f"c{class_id}-s{seed}",
        class_id=class_id,
        raw_feature=feature.astype(np.float32),
    )


def base_class(base_id: int, world: WorldConfig) -> int:
    return base_id % world.num_classes


def base_audio_seed(base_id: int, world: WorldConfig) -> int:
    return derive_seed(world.world_seed, _STREAM_AUDIO, base_id)


def base_video(
    base_id: int,
    world: WorldConfig,
    stft: StftConfig,
    audio_seed: Optional[int] = None,
) -> BaseVideo:
    class_id = base_class(base_id, world)
    if audio_seed is None:
        audio_seed = base_audio_seed(base_id, world)
    audio = synth_source(
        source_classes(world)[class_id], stft.frames, audio_seed, stft, world.source_peak
    )

    objects = []
    distractor_rng = _rng(world.world_seed, _STREAM_FEATURE, base_id)
    for j in range(world.objects_per_base):
        if j == 0:
            obj_class = class_id
        else:
            # extra detections are silent objects of other classes
            obj_class = int((class_id + distractor_rng.integers(1, world.num_classes)) % world.num_classes)
        seed = derive_seed(world.world_seed, _STREAM_FEATURE, base_id, j)
        objects.append(synth_object(obj_class, seed, world, object_id=f"b{base_id}-o{j}"))
    return BaseVideo(base_id, class_id, audio_seed, audio, objects)


def compose_sample(
    bases: Sequence[BaseVideo],
    mode: str = "solo",
    audible: Optional[Sequence[bool]] = None,
    sample_id: str = "",
) -> CompositeSample:
    """Compose A, B, C, D into two videos and their mixture.

    ``audible`` holds one flag per base; A and C always sound. In solo mode B and D are
    silent, in duet mode their flags decide whether they add to the video's sound.
    """
    if len(bases) != 4:
        raise InputError(f"compose_sample needs four base videos, got {len(bases)}")
    if mode not in ("solo", "duet"):
        raise InputError(f"Unknown composition mode {mode!r}")
    if mode == "solo" or audible is None:
        audible = (True, False, True, False)
    audible = tuple(bool(a) for a in audible)
    if not (audible[0] and audible[2]):
        raise InputError("bases A and C always contribute audio")

    lengths = {len(b.audio) for b in bases}
    rates = {b.audio.sample_rate for b in bases}
    if len(lengths) != 1 or len(rates) != 1:
        raise InputError(f"base clips differ in length or rate: {sorted(lengths)} {sorted(rates)}")
    length, rate = lengths.pop(), rates.pop()

    videos = ([], [])
    sounds = [AudioClip.silence(length, rate), AudioClip.silence(length, rate)]
    object_sounds = {}
    for index, (base, flag) in enumerate(zip(bases, audible)):
        k = index // 2
        if flag:
            sounds[k] = sounds[k] + base.audio
        for j, obj in enumerate(base.objects):
            sounding = flag and j == 0
            videos[k].append(replace(obj, is_audible_gt=sounding))
            object_sounds[obj.object_id] = base.audio if sounding else AudioClip.silence(length, rate)

    return CompositeSample(
        sample_id=sample_id,
        video1_objects=videos[0],
        video2_objects=videos[1],
        sound1=sounds[0],
        sound2=sounds[1],
        mixture=sounds[0] + sounds[1],
        mode=mode,
        object_sounds=object_sounds,
    )


# Manifests


def _class_constraints(num_classes: int):
    if num_classes >= 4:
        return lambda c: len(set(c)) == 4
    # too few classes for four distinct ones: keep each video and the two heard sources apart
    return lambda c: c[0] != c[1] and c[2] != c[3] and c[0] != c[2]


def composition_capacity(base_ids: Sequence[int], world: WorldConfig) -> int:
    """Number of ordered (A, B, C, D) tuples of distinct bases obeying the class rule."""
    counts = [0] * world.num_classes
    for b in base_ids:
        counts[base_class(b, world)] += 1
    allowed = _class_constraints(world.num_classes)

    total = 0
    for classes in itertools.product(range(world.num_classes), repeat=4):
        if not allowed(classes):
            continue
        used = {}
        ways = 1
        for c in classes:
            ways *= counts[c] - used.get(c, 0)
            used[c] = used.get(c, 0) + 1
        total += max(ways, 0)
    return total


def _draw_tuple(rng, pool, first, world, allowed):
    for _ in range(1000):
        a = first if first is not None else int(rng.choice(pool))
        rest = [int(x) for x in rng.choice(pool, size=3, replace=False)]
        combo = (a, *rest)
        if len(set(combo)) < 4:
            continue
        if allowed(tuple(base_class(b, world) for b in combo)):
            return combo
    return None


def build_split(split: str, world: WorldConfig) -> Manifest:
    pool = list(world.base_range(split))
    size = world.size(split)
    if size == 0:
        return Manifest(split=split, entries=[], world_seed=world.world_seed)
    if len(pool) < 4:
        raise ConfigurationError(f"split {split} needs at least 4 base videos, has {len(pool)}")
    capacity = composition_capacity(pool, world)
    if size > capacity:
        raise ConfigurationError(
            f"split {split}: {size} samples requested but only {capacity} distinct compositions exist"
        )

    allowed = _class_constraints(world.num_classes)
    split_index = SPLITS.index(split)
    seen = set()
    entries = []
    for i in range(size):
        rng = _rng(world.world_seed, _STREAM_COMPOSE, split_index, i)
        combo = None
        # each base leads as A equally often, falling back to a free draw once exhausted
        for first in (pool[i % len(pool)], None, None, None):
            candidate = _draw_tuple(rng, pool, first, world, allowed)
            if candidate is not None and candidate not in seen:
                combo = candidate
                break
        if combo is None:
            raise ConfigurationError(
                f"split {split}: could not draw a fresh composition for sample {i}; "
                f"lower world.sizes.{split} or add base videos"
            )
        seen.add(combo)

        if world.mode == "duet":
            flags = [True, bool(rng.random() < world.duet_audible_prob), True,
                     bool(rng.random() < world.duet_audible_prob)]
        else:
            flags = [True, False, True, False]

        entries.append(
            ManifestEntry(
                sample_id=f"{split}-{i:06d}",
                split=split,
                mode=world.mode,
                base_ids=list(combo),
                seeds=[base_audio_seed(b, world) for b in combo],
                audible=flags,
                world_seed=world.world_seed,
            )
        )
    logger.info(f"Composed {len(entries)} {split} samples from {len(pool)} base videos")
    return Manifest(split=split, entries=entries, world_seed=world.world_seed)


def build_dataset(world: WorldConfig) -> Dict[str, Manifest]:
    source_classes(world)
    return {split: build_split(split, world) for split in SPLITS}


def materialize(entry: ManifestEntry, world: WorldConfig, stft: StftConfig) -> CompositeSample:
    if entry.kind != "synthetic":
        raise InputError(f"{entry.sample_id}: external entries are materialized in pairs")
    if entry.world_seed is not None and entry.world_seed != world.world_seed:
        raise ConfigurationError(
            f"{entry.sample_id} was built with world_seed {entry.world_seed}, "
            f"config has {world.world_seed}"
        )
    seeds = entry.seeds or [None] * len(entry.base_ids)
    bases = [base_video(b, world, stft, audio_seed=s) for b, s in zip(entry.base_ids, seeds)]
    return compose_sample(bases, entry.mode, entry.audible, sample_id=entry.sample_id)


# External data


def ingest_external(
    audio_dir,
    feature_dir,
    mapping_file,
    stft: StftConfig,
    feature_dim: int,
    split: str = "test",
) -> Manifest:
    """Build a manifest over on-disk WAVs and per-object feature records.

    The mapping file is JSON-lines, one video per line::

        {"sample_id": "v1", "audio": "v1.wav",
         "objects": [{"object_id": "v1-a", "feature": "v1-a.json", "audible": true}]}

    ``audible`` is optional. Paths are relative to ``audio_dir`` and ``feature_dir``.
    """
    audio_dir, feature_dir = Path(audio_dir), Path(feature_dir)
    mapping_file = Path(mapping_file)
    if not mapping_file.is_file():
        raise IngestionError(f"mapping file {mapping_file} does not exist")
    try:
        records = read_jsonl(mapping_file)
    except ValueError as e:
        raise IngestionError(f"mapping file {mapping_file} is not valid JSON-lines: {e}")

    entries = []
    for index, record in enumerate(records):
        sample_id = record.get("sample_id", f"{split}-{index:06d}")
        if "audio" not in record:
            raise IngestionError("mapping record has no 'audio' field", entry=sample_id)
        audio_path = (audio_dir / record["audio"]).resolve()
        rate = wav_sample_rate(audio_path, entry=sample_id)
        if rate != stft.sample_rate:
            raise IngestionError(
                f"{audio_path.name} is sampled at {rate} Hz, expected {stft.sample_rate} Hz; "
                f"resample it first (e.g. sox in.wav -r {stft.sample_rate} out.wav)",
                entry=sample_id,
            )
        read_wav(audio_path, entry=sample_id)

        objects = []
        for j, obj in enumerate(record.get("objects", [])):
            if "feature" not in obj:
                raise IngestionError(f"object {j} has no 'feature' field", entry=sample_id)
            feature_path = (feature_dir / obj["feature"]).resolve()
            read_feature_record(feature_path, feature_dim, entry=sample_id)
            described = {"object_id": obj.get("object_id", f"{sample_id}-o{j}"), "feature_path": str(feature_path)}
            if obj.get("audible") is not None:
                described["audible"] = bool(obj["audible"])
            objects.append(described)
        if not objects:
            raise IngestionError("entry lists no object candidates", entry=sample_id)

        entries.append(
            ManifestEntry(
                sample_id=sample_id,
                split=split,
                mode="solo",
                kind="external",
                audio_path=str(audio_path),
                objects=objects,
            )
        )
    logger.info(f"Ingested {len(entries)} external videos from {mapping_file}")
    return Manifest(split=split, entries=entries, world_seed=None)


def fit_to_contract(samples: np.ndarray, sample_rate: int, stft: StftConfig, entry=None) -> np.ndarray:
    if sample_rate != stft.sample_rate:
        logger.warning(f"{entry or 'audio'}: resampling {sample_rate} Hz to {stft.sample_rate} Hz")
        g = math.gcd(int(sample_rate), int(stft.sample_rate))
        samples = resample_poly(samples, stft.sample_rate // g, sample_rate // g).astype(np.float32)
    n = stft.clip_length
    if samples.shape[0] != n:
        logger.warning(f"{entry or 'audio'}: fitting {samples.shape[0]} samples to {n}")
        out = np.zeros(n, dtype=np.float32)
        out[: min(n, samples.shape[0])] = samples[:n]
        samples = out
    return np.clip(samples, -1.0, 1.0)


def load_external_video(entry: ManifestEntry, stft: StftConfig, feature_dim: int):
    samples, rate = read_wav(entry.audio_path, entry=entry.sample_id)
    clip = AudioClip(fit_to_contract(samples, rate, stft, entry=entry.sample_id), stft.sample_rate)
    objects = [
        ObjectCandidate(
            object_id=obj["object_id"],
            class_id=-1,
            raw_feature=read_feature_record(obj["feature_path"], feature_dim, entry=entry.sample_id),
            is_audible_gt=obj.get("audible"),
        )
        for obj in entry.objects
    ]
    return clip, objects


def pair_external(first: ManifestEntry, second: ManifestEntry, stft: StftConfig, feature_dim: int) -> CompositeSample:
    clip1, objects1 = load_external_video(first, stft, feature_dim)
    clip2, objects2 = load_external_video(second, stft, feature_dim)
    return CompositeSample(
        sample_id=f"{first.sample_id}+{second.sample_id}",
        video1_objects=objects1,
        video2_objects=objects2,
        sound1=clip1,
        sound2=clip2,
        mixture=clip1 + clip2,
        mode="solo",
    )


class CompositeDataset(Dataset):
    """Composite samples of one manifest, generated on access.

    External manifests pair consecutive entries (0 with 1, 2 with 3, ...) into
    mix-and-separate samples.
    """

    def __init__(self, manifest: Manifest, world: WorldConfig, stft: StftConfig, limit: Optional[int] = None):
        self.manifest = manifest
        self.world = world
        self.stft = stft
        self.external = manifest.is_external
        count = len(manifest.entries) // 2 if self.external else len(manifest.entries)
        self.count = count if limit is None else min(count, limit)

    def __len__(self):
        return self.count

    def __getitem__(self, index: int) -> CompositeSample:
        if not 0 <= index < self.count:
            raise IndexError(index)
        if self.external:
            entries = self.manifest.entries
            return pair_external(entries[2 * index], entries[2 * index + 1], self.stft, self.world.feature_dim)
        return materialize(self.manifest.entries[index], self.world, self.stft)

    @property
    def has_labels(self) -> bool:
        if not self.external:
            return True
        return all("audible" in o for e in self.manifest.entries for o in e.objects)
