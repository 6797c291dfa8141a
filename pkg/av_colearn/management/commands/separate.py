import math
from pathlib import Path

import numpy as np
import torch
from scipy.signal import resample_poly

from av_colearn import tfspace
from av_colearn.logger import get_logger
from av_colearn.management.base import ColearnCommand
from av_colearn.models import AudioClip
from av_colearn.nets import binarize
from av_colearn.trainer import checkpoint_load
from av_colearn.utils import read_feature_record, read_wav, write_json, write_wav

logger = get_logger(__name__)


def _resample(samples: np.ndarray, source_rate: int, target_rate: int) -> np.ndarray:
    if source_rate == target_rate:
        return samples.astype(np.float64)
    g = math.gcd(int(source_rate), int(target_rate))
    return resample_poly(samples, target_rate // g, source_rate // g)


def _fit_length(samples: np.ndarray, length: int) -> np.ndarray:
    out = np.zeros(length, dtype=np.float64)
    out[: min(length, samples.shape[0])] = samples[:length]
    return out


def chunk(samples: np.ndarray, length: int):
    """Split into zero-padded ``length``-sample chunks; at least one chunk."""
    count = max(1, math.ceil(samples.shape[0] / length))
    padded = _fit_length(samples, count * length)
    return [padded[i * length : (i + 1) * length] for i in range(count)]


def separate_recording(model, samples: np.ndarray, features: np.ndarray, cfg: tfspace.StftConfig):
    """Ground and separate every candidate over a recording at the contract rate.

    Returns ``(probs, waveforms)``: the grounding probability pair averaged over chunks and one
    separated waveform per candidate, both covering the whole recording.
    """
    ref = next(model.parameters())
    f_o_input = torch.as_tensor(features, dtype=ref.dtype, device=ref.device)
    probs, pieces = [], []
    with torch.no_grad():
        f_o = model.encode_objects(f_o_input)
        for piece in chunk(samples, cfg.clip_length):
            spec = tfspace.stft(AudioClip(np.clip(piece, -1.0, 1.0), cfg.sample_rate), cfg)
            mix = tfspace.magnitude_resample(spec, cfg).values
            mix_t = torch.as_tensor(mix, dtype=ref.dtype, device=ref.device).unsqueeze(0)
            probs.append(model.ground(model.encode_audio(mix_t)[0], f_o).cpu().numpy())
            masks = model.masks(model.separation_features(mix_t)[0], f_o).cpu().numpy().astype(np.float64)
            pieces.append(
                [tfspace.istft(tfspace.apply_mask(spec, tfspace.Mask(m), cfg), cfg).samples for m in masks]
            )
    waveforms = [
        np.concatenate([p[n] for p in pieces])[: samples.shape[0]].astype(np.float64)
        for n in range(features.shape[0])
    ]
    return np.mean(probs, axis=0), waveforms


class Command(ColearnCommand):
    help = "Tell sounding from silent objects in a recording and write each sounding object's audio"

    def add_command_arguments(self, parser):
        parser.add_argument("--checkpoint", type=str, required=True, help="Checkpoint file")
        parser.add_argument("--wav", type=str, required=True, help="Mono input recording")
        parser.add_argument(
            "--features",
            type=str,
            nargs="+",
            required=True,
            help="One feature record per object candidate (.json or raw float32)",
        )
        parser.add_argument("--out-dir", type=str, help="Output directory (default <output-dir>/separated/<wav stem>)")
        parser.add_argument("--emit-silent", action="store_true", help="Also write zeroed WAVs for silent objects")

    def run(self, **options):
        checkpoint = Path(options["checkpoint"])
        state = checkpoint_load(checkpoint, stft=self.stft())
        cfg = state.stft
        dim = state.arch.feature_dim
        wav = Path(options["wav"])
        out_dir = Path(options["out_dir"] or self.output_dir / "separated" / wav.stem)

        samples, rate = read_wav(wav)
        if rate != cfg.sample_rate:
            logger.warning(f"{wav}: resampling {rate} Hz to {cfg.sample_rate} Hz for separation")
        working = _resample(samples, rate, cfg.sample_rate)
        logger.info(f"{wav}: {samples.shape[0]} samples in {len(chunk(working, cfg.clip_length))} chunk(s)")

        feature_paths = [Path(p) for p in options["features"]]
        features = np.stack([read_feature_record(p, dim, entry=p.name) for p in feature_paths])

        probs, waveforms = separate_recording(state.model, working, features, cfg)
        verdicts = []
        for n, (path, waveform) in enumerate(zip(feature_paths, waveforms)):
            audible = bool(binarize(tuple(float(v) for v in probs[n])))
            entry = {
                "object": path.stem,
                "feature_path": str(path),
                "audible": audible,
                "probability": float(probs[n][0]),
                "wav": None,
            }
            if audible or options["emit_silent"]:
                restored = _fit_length(_resample(waveform, cfg.sample_rate, rate), samples.shape[0])
                if not audible:
                    restored = np.zeros_like(restored)
                target = out_dir / f"{n:02d}-{path.stem}.wav"
                write_wav(target, restored, rate)
                entry["wav"] = target.name
            verdicts.append(entry)

        write_json(out_dir / "verdicts.json", {
            "checkpoint": str(checkpoint),
            "wav": str(wav),
            "sample_rate": rate,
            "samples": int(samples.shape[0]),
            "objects": verdicts,
        })
        audible = sum(v["audible"] for v in verdicts)
        self.success(f"{audible} of {len(verdicts)} objects sounding; results in '{out_dir}'")
