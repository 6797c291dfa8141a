import csv
import json
import math
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence

import numpy as np
import soundfile as sf

from .exceptions import IngestionError


def read_wav(path, entry=None):
    """Read a mono WAV as float32 in [-1, 1]. Returns ``(samples, sample_rate)``."""
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"audio file {path} does not exist", entry=entry)
    try:
        samples, sample_rate = sf.read(str(path), dtype="float32", always_2d=True)
    except RuntimeError as e:
        raise IngestionError(f"cannot read WAV {path}: {e}", entry=entry)
    if samples.shape[1] != 1:
        raise IngestionError(
            f"{path} has {samples.shape[1]} channels, only mono audio is supported",
            entry=entry,
        )
    return samples[:, 0], int(sample_rate)


def wav_sample_rate(path, entry=None) -> int:
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"audio file {path} does not exist", entry=entry)
    try:
        return int(sf.info(str(path)).samplerate)
    except RuntimeError as e:
        raise IngestionError(f"cannot read WAV {path}: {e}", entry=entry)


def write_wav(path, samples: np.ndarray, sample_rate: int) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        sf.write(str(path), np.asarray(samples, dtype=np.float32), sample_rate, subtype="FLOAT")
    except RuntimeError as e:
        raise IOError(f"Failed to write WAV file to {path}: {e}")


def read_feature_record(path, dim: int, entry=None) -> np.ndarray:
    """Feature records are JSON arrays (``.json``) or flat little-endian float32 files."""
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"feature file {path} does not exist", entry=entry)
    if path.suffix == ".json":
        try:
            with path.open("r", encoding="utf-8") as f:
                values = np.asarray(json.load(f), dtype=np.float32)
        except (json.JSONDecodeError, ValueError, TypeError) as e:
            raise IngestionError(f"cannot parse feature record {path}: {e}", entry=entry)
    else:
        values = np.fromfile(str(path), dtype="<f4")
    if values.ndim != 1 or values.shape[0] != dim:
        raise IngestionError(
            f"feature record {path} has dimension {values.size}, expected {dim}",
            entry=entry,
        )
    if not np.all(np.isfinite(values)):
        raise IngestionError(f"feature record {path} has non-finite values", entry=entry)
    return values


def write_json(path, data: Any) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as f:
        json.dump(data, f, indent=2, sort_keys=True, default=_json_default)
        f.write("\n")


def read_jsonl(path) -> List[Dict[str, Any]]:
    records = []
    with Path(path).open("r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_value(v) for v in row])


def format_value(value: Any) -> Any:
    # +inf scores are written as the literal string "inf"
    if isinstance(value, float):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        if math.isnan(value):
            return "nan"
        return f"{value:.6f}"
    return value


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def finite_or_str(value: float):
    if isinstance(value, float) and not math.isfinite(value):
        return format_value(value)
    return value
