import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .exceptions import InputError


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1:
            raise InputError(f"AudioClip must be mono, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise InputError("AudioClip contains non-finite samples")

    def __len__(self):
        return self.samples.shape[0]

    def __add__(self, other: "AudioClip") -> "AudioClip":
        if other.sample_rate != self.sample_rate:
            raise InputError(
                f"Cannot add clips at {self.sample_rate} Hz and {other.sample_rate} Hz"
            )
        if len(other) != len(self):
            raise InputError(f"Clip lengths differ: {len(self)} vs {len(other)}")
        return AudioClip(self.samples + other.samples, self.sample_rate)

    @classmethod
    def silence(cls, length: int, sample_rate: int) -> "AudioClip":
        return cls(np.zeros(length, dtype=np.float32), sample_rate)


@dataclass
class ObjectCandidate:
    object_id: str
    class_id: int
    raw_feature: np.ndarray
    # Ground truth. Evaluation and the oracle ablation read it, losses and mining never do.
    is_audible_gt: Optional[bool] = None

    def __post_init__(self):
        self.raw_feature = np.asarray(self.raw_feature, dtype=np.float32)


@dataclass
class CompositeSample:
    sample_id: str
    video1_objects: List[ObjectCandidate]
    video2_objects: List[ObjectCandidate]
    sound1: AudioClip
    sound2: AudioClip
    mixture: AudioClip
    mode: str = "solo"
    # Per-object waveforms keyed by object_id, zero for silent objects. Only synthetic
    # samples carry them; the silent-subset evaluation scores against them.
    object_sounds: Dict[str, AudioClip] = field(default_factory=dict)

    def __post_init__(self):
        if not self.video1_objects or not self.video2_objects:
            raise InputError(f"{self.sample_id}: both videos need at least one object")

    @property
    def videos(self) -> Tuple[List[ObjectCandidate], List[ObjectCandidate]]:
        return self.video1_objects, self.video2_objects

    @property
    def sounds(self) -> Tuple[AudioClip, AudioClip]:
        return self.sound1, self.sound2

    @property
    def has_labels(self) -> bool:
        return all(o.is_audible_gt is not None for o in self.video1_objects + self.video2_objects)


@dataclass
class ManifestEntry:
    sample_id: str
    split: str
    mode: str
    kind: str = "synthetic"
    base_ids: List[int] = field(default_factory=list)
    seeds: List[int] = field(default_factory=list)
    audible: List[bool] = field(default_factory=list)
    world_seed: Optional[int] = None
    # External entries: one WAV plus one feature record per object candidate.
    audio_path: Optional[str] = None
    objects: List[Dict[str, Any]] = field(default_factory=list)

    def to_json(self) -> str:
        if self.kind == "synthetic":
            record = {
                "sample_id": self.sample_id,
                "split": self.split,
                "mode": self.mode,
                "kind": self.kind,
                "base_ids": self.base_ids,
                "seeds": self.seeds,
                "audible": self.audible,
                "world_seed": self.world_seed,
            }
        else:
            record = {
                "sample_id": self.sample_id,
                "split": self.split,
                "mode": self.mode,
                "kind": self.kind,
                "audio_path": self.audio_path,
                "objects": self.objects,
            }
        return json.dumps(record, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ManifestEntry":
        try:
            return cls(
                sample_id=data["sample_id"],
                split=data["split"],
                mode=data.get("mode", "solo"),
                kind=data.get("kind", "synthetic"),
                base_ids=list(data.get("base_ids", [])),
                seeds=list(data.get("seeds", [])),
                audible=list(data.get("audible", [])),
                world_seed=data.get("world_seed"),
                audio_path=data.get("audio_path"),
                objects=list(data.get("objects", [])),
            )
        except KeyError as e:
            raise InputError(f"Manifest record is missing field {e}")


@dataclass
class Manifest:
    split: str
    entries: List[ManifestEntry]
    world_seed: Optional[int] = None

    @property
    def counts(self) -> Dict[str, int]:
        return {self.split: len(self.entries)}

    @property
    def is_external(self) -> bool:
        return any(e.kind == "external" for e in self.entries)

    def __len__(self):
        return len(self.entries)

    def base_ids(self) -> set:
        return {b for e in self.entries for b in e.base_ids}

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="\n") as f:
            for entry in self.entries:
                f.write(entry.to_json())
                f.write("\n")

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        if not path.is_file():
            raise InputError(f"Manifest {path} does not exist")
        entries = []
        with path.open("r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    entries.append(ManifestEntry.from_dict(json.loads(line)))
                except json.JSONDecodeError as e:
                    raise InputError(f"{path}:{lineno} is not valid JSON: {e}")
        split = entries[0].split if entries else path.stem
        world_seed = entries[0].world_seed if entries else None
        return cls(split=split, entries=entries, world_seed=world_seed)
