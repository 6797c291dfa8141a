"""Evaluation protocols: grounding accuracy, BSS metrics, silent-object scoring and
report files.

The BSS decomposition follows the classic time-invariant filter formulation: each
estimate is projected onto ``filter_len`` delayed copies of the target reference and
of all references; the residuals give the interference and artifact components.
"""

import hashlib
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np
import torch
from scipy import linalg
from scipy.signal import fftconvolve
from tqdm import tqdm

from . import tfspace
from .exceptions import EvaluationError, InputError
from .logger import get_logger
from .models import AudioClip, CompositeSample
from .nets import binarize
from .utils import write_csv, write_json

logger = get_logger(__name__)

SCHEMA_VERSION = 1
PROTOCOLS = ("single_sound", "mixed_sound")
GATINGS = ("none", "grounding", "oracle", "random")
# Random Obj is scored ungated by default: every candidate's mask contributes, so its
# silent objects are never muted. ``random`` instead keeps one drawn object per video.
GATING_BY_MODE = {
    "grounding_only": "grounding",
    "random_obj": "none",
    "col": "grounding",
    "ccol": "grounding",
    "oracle": "oracle",
}


@dataclass(frozen=True)
class EvalConfig:
    filter_len: int = 512
    energy_threshold: float = 20.0
    floor_amplitude: float = 1e-10
    inf_cap_db: float = 300.0
    max_samples: Optional[int] = None

    @classmethod
    def from_settings(cls, settings: Dict[str, Any]) -> "EvalConfig":
        return cls(**settings["eval"])


# BSS metrics


@dataclass
class BssResult:
    sdr: np.ndarray
    sir: np.ndarray
    sar: np.ndarray
    permutation: Tuple[int, ...]

    def __len__(self):
        return len(self.sdr)


def floor_noise(length: int, amplitude: float, index: int = 0) -> np.ndarray:
    """Deterministic low-level noise that makes silent signals well-posed references."""
    rng = np.random.default_rng(np.random.SeedSequence([7919, index]))
    return amplitude * rng.standard_normal(length)


def _floor_silent(signals: np.ndarray, amplitude: float) -> np.ndarray:
    out = signals.copy()
    for i, s in enumerate(out):
        if amplitude > 0 and not np.any(s):
            out[i] = floor_noise(s.shape[0], amplitude, i)
    return out


def _safe_db(num: float, den: float) -> float:
    if den <= 0.0:
        return math.inf
    return 10.0 * math.log10(max(num, np.finfo(np.float64).tiny) / den)


class _Projector:
    """Least-squares projection onto delayed copies of a set of references."""

    def __init__(self, references: np.ndarray, flen: int):
        self.references = references
        self.flen = flen
        n, length = references.shape
        self.n_fft = int(2 ** math.ceil(math.log2(length + flen - 1)))
        self.spectra = np.fft.rfft(references, n=self.n_fft, axis=1)

        self.gram = np.zeros((n * flen, n * flen))
        for i in range(n):
            for j in range(i, n):
                # r[m] = sum_u s_i[u] s_j[u + m]
                r = np.fft.irfft(np.conj(self.spectra[i]) * self.spectra[j], n=self.n_fft)
                block = linalg.toeplitz(r[:flen], np.concatenate(([r[0]], r[-1:-flen:-1])))
                self.gram[i * flen : (i + 1) * flen, j * flen : (j + 1) * flen] = block
                self.gram[j * flen : (j + 1) * flen, i * flen : (i + 1) * flen] = block.T

    def project(self, estimate: np.ndarray, sources: Sequence[int]) -> np.ndarray:
        flen = self.flen
        length = self.references.shape[1]
        est_spectrum = np.fft.rfft(estimate, n=self.n_fft)
        rhs = np.concatenate([
            np.fft.irfft(np.conj(self.spectra[i]) * est_spectrum, n=self.n_fft)[:flen] for i in sources
        ])
        index = np.concatenate([np.arange(i * flen, (i + 1) * flen) for i in sources])
        gram = self.gram[np.ix_(index, index)]
        try:
            coeffs = linalg.solve(gram, rhs, assume_a="pos")
        except linalg.LinAlgError:
            coeffs = linalg.lstsq(gram, rhs)[0]

        projection = np.zeros(length + flen - 1)
        for pos, i in enumerate(sources):
            projection += fftconvolve(self.references[i], coeffs[pos * flen : (pos + 1) * flen])
        return projection


def _decompose(projector: _Projector, estimate: np.ndarray, j: int):
    flen = projector.flen
    length = estimate.shape[0]
    s_true = np.concatenate((projector.references[j], np.zeros(flen - 1)))
    e_spat = projector.project(estimate, [j]) - s_true
    e_interf = projector.project(estimate, range(projector.references.shape[0])) - s_true - e_spat
    e_artif = -s_true - e_spat - e_interf
    e_artif[:length] += estimate
    return s_true, e_spat, e_interf, e_artif


def _source_criteria(s_true, e_spat, e_interf, e_artif) -> Tuple[float, float, float]:
    s_filt = s_true + e_spat
    sdr = _safe_db(np.sum(s_filt**2), np.sum((e_interf + e_artif) ** 2))
    sir = _safe_db(np.sum(s_filt**2), np.sum(e_interf**2))
    sar = _safe_db(np.sum((s_filt + e_interf) ** 2), np.sum(e_artif**2))
    return sdr, sir, sar


def _as_matrix(signals) -> np.ndarray:
    rows = [np.asarray(s.samples if isinstance(s, AudioClip) else s, dtype=np.float64) for s in signals]
    if not rows:
        return np.zeros((0, 0))
    lengths = {r.shape[0] for r in rows}
    if len(lengths) != 1:
        raise InputError(f"signals differ in length: {sorted(lengths)}")
    return np.stack(rows)


def bss_eval(references, estimates, filter_len: int = 512, floor_amplitude: float = 1e-10) -> BssResult:
    """SDR, SIR and SAR per reference, under the estimate permutation with the best mean
    SIR (the identity wins ties). All-zero signals are floored with low-level noise."""
    refs, ests = _as_matrix(references), _as_matrix(estimates)
    if refs.shape[0] != ests.shape[0]:
        raise InputError(f"{refs.shape[0]} references but {ests.shape[0]} estimates")
    n = refs.shape[0]
    if n == 0:
        empty = np.zeros(0)
        return BssResult(empty, empty.copy(), empty.copy(), ())
    if refs.shape[1] != ests.shape[1]:
        raise InputError(f"references have {refs.shape[1]} samples, estimates {ests.shape[1]}")

    refs = _floor_silent(refs, floor_amplitude)
    ests = _floor_silent(ests, floor_amplitude)
    flen = max(1, min(filter_len, refs.shape[1]))
    projector = _Projector(refs, flen)

    scores = np.zeros((3, n, n))
    for i in range(n):
        for j in range(n):
            scores[:, i, j] = _source_criteria(*_decompose(projector, ests[j], i))

    best, best_sir = None, -math.inf
    for perm in itertools.permutations(range(n)):
        mean_sir = float(np.mean([scores[1, i, perm[i]] for i in range(n)]))
        if best is None or mean_sir > best_sir:
            best, best_sir = perm, mean_sir

    pick = lambda m: np.array([scores[m, i, best[i]] for i in range(n)])  # noqa: E731
    return BssResult(pick(0), pick(1), pick(2), tuple(best))


# Model-driven separation


@dataclass
class SampleSeparation:
    """One sample's per-object masks and gates on the network grid."""

    sample: CompositeSample
    mixture_spec: tfspace.ComplexSpec
    mixture_mag: np.ndarray
    masks: Tuple[np.ndarray, np.ndarray]
    gates: Tuple[np.ndarray, np.ndarray]

    def separated(self, k: int) -> np.ndarray:
        return self.mixture_mag[None] * self.masks[k] * self.gates[k][:, None, None]

    def energies(self, k: int) -> np.ndarray:
        return self.separated(k).sum(axis=(1, 2))

    def video_mask(self, k: int) -> np.ndarray:
        return np.clip((self.gates[k][:, None, None] * self.masks[k]).sum(axis=0), 0.0, 1.0)

    def _waveform(self, mask: np.ndarray, cfg: tfspace.StftConfig) -> AudioClip:
        spec = tfspace.apply_mask(self.mixture_spec, tfspace.Mask(mask), cfg)
        return tfspace.istft(spec, cfg)

    def video_waveform(self, k: int, cfg: tfspace.StftConfig) -> AudioClip:
        return self._waveform(self.video_mask(k), cfg)

    def object_waveform(self, k: int, n: int, cfg: tfspace.StftConfig) -> AudioClip:
        return self._waveform(self.masks[k][n] * self.gates[k][n], cfg)


def _features(objects, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(np.stack([o.raw_feature for o in objects]), dtype=like.dtype, device=like.device)


def _net_tensor(clip: AudioClip, cfg: tfspace.StftConfig, like: torch.Tensor) -> torch.Tensor:
    mag = tfspace.clip_to_magspec(clip, cfg).values
    return torch.as_tensor(mag, dtype=like.dtype, device=like.device).unsqueeze(0)


def _require_labels(sample: CompositeSample, what: str) -> None:
    if not sample.has_labels:
        raise EvaluationError(f"{sample.sample_id}: {what} needs audibility labels")


def random_gates(sample: CompositeSample) -> Tuple[np.ndarray, ...]:
    """Switch on one uniformly drawn object per video. The draw depends only on the sample id."""
    key = int.from_bytes(hashlib.sha256(sample.sample_id.encode("utf-8")).digest()[:8], "little")
    rng = np.random.default_rng(key)
    gates = []
    for objects in sample.videos:
        gate = np.zeros(len(objects))
        gate[rng.integers(len(objects))] = 1.0
        gates.append(gate)
    return tuple(gates)


def separate_sample(model, sample: CompositeSample, cfg: tfspace.StftConfig, gating: str = "grounding") -> SampleSeparation:
    if gating not in GATINGS:
        raise EvaluationError(f"Unknown gating {gating!r}")
    ref = next(model.parameters())
    spec = tfspace.stft(sample.mixture, cfg)
    mix = tfspace.magnitude_resample(spec, cfg).values
    masks, gates = [], []
    drawn = random_gates(sample) if gating == "random" else None
    with torch.no_grad():
        mix_t = torch.as_tensor(mix, dtype=ref.dtype, device=ref.device).unsqueeze(0)
        feature_map = model.separation_features(mix_t)[0]
        f_m = model.encode_audio(mix_t)[0] if gating == "grounding" else None
        for k, objects in enumerate(sample.videos):
            f_o = model.encode_objects(_features(objects, ref))
            masks.append(model.masks(feature_map, f_o).cpu().numpy().astype(np.float64))
            if gating == "none":
                gate = np.ones(len(objects))
            elif gating == "grounding":
                gate = binarize(model.ground(f_m, f_o)).cpu().numpy().astype(np.float64)
            elif gating == "random":
                gate = drawn[k]
            else:
                _require_labels(sample, "oracle gating")
                gate = np.array([float(o.is_audible_gt) for o in objects])
            gates.append(gate)
    return SampleSeparation(sample, spec, mix.astype(np.float64), tuple(masks), tuple(gates))


# Grounding accuracy


@dataclass
class GroundingReport:
    protocol: str
    correct: int = 0
    total: int = 0
    confusion: Dict[int, Dict[str, int]] = field(default_factory=dict)

    @property
    def accuracy(self) -> Optional[float]:
        return self.correct / self.total if self.total else None

    def add(self, class_id: int, predicted: int, actual: bool) -> None:
        counts = self.confusion.setdefault(int(class_id), {"tp": 0, "fp": 0, "tn": 0, "fn": 0})
        key = ("t" if bool(predicted) == bool(actual) else "f") + ("p" if predicted else "n")
        counts[key] += 1
        self.total += 1
        self.correct += int(bool(predicted) == bool(actual))

    def recomputed_accuracy(self) -> Optional[float]:
        right = sum(c["tp"] + c["tn"] for c in self.confusion.values())
        total = sum(sum(c.values()) for c in self.confusion.values())
        return right / total if total else None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "protocol": self.protocol,
            "accuracy": self.accuracy,
            "correct": self.correct,
            "total": self.total,
            "confusion": {str(k): v for k, v in sorted(self.confusion.items())},
        }


def model_predictions(model, sample: CompositeSample, protocol: str, cfg: tfspace.StftConfig) -> List[List[int]]:
    """Binarized grounding decision for every object, per video."""
    ref = next(model.parameters())
    predictions = []
    with torch.no_grad():
        if protocol == "mixed_sound":
            f_m = model.encode_audio(_net_tensor(sample.mixture, cfg, ref))[0]
        for k, objects in enumerate(sample.videos):
            if protocol == "mixed_sound":
                f_s = f_m
            else:
                f_s = model.encode_audio(_net_tensor(sample.sounds[k], cfg, ref))[0]
            probs = model.ground(f_s, model.encode_objects(_features(objects, ref)))
            predictions.append([int(v) for v in binarize(probs).tolist()])
    return predictions


def grounding_accuracy(
    model,
    samples: Iterable[CompositeSample],
    protocol: str,
    cfg: tfspace.StftConfig,
    predict: Optional[Callable[[CompositeSample, str], List[List[int]]]] = None,
) -> GroundingReport:
    """Per-object audible/silent accuracy against the ground truth.

    ``single_sound`` pairs each video's objects with that video's own sound,
    ``mixed_sound`` pairs every object with the mixture.
    """
    if protocol not in PROTOCOLS:
        raise EvaluationError(f"Unknown grounding protocol {protocol!r}")
    if predict is None:
        model.eval()
        predict = lambda s, p: model_predictions(model, s, p, cfg)  # noqa: E731

    report = GroundingReport(protocol)
    for sample in samples:
        _require_labels(sample, "grounding accuracy")
        for objects, predicted in zip(sample.videos, predict(sample, protocol)):
            for obj, p in zip(objects, predicted):
                report.add(obj.class_id, p, obj.is_audible_gt)
    logger.info(f"Grounding accuracy ({protocol}): {report.accuracy} over {report.total} objects")
    return report


# Silent objects


@dataclass
class SilentReport:
    energy_threshold: float
    successes: int = 0
    total: int = 0
    energies: List[float] = field(default_factory=list)

    @property
    def success_rate(self) -> Optional[float]:
        return self.successes / self.total if self.total else None


def silent_success_from(separations: Iterable[SampleSeparation], energy_threshold: float = 20.0) -> SilentReport:
    """A silent object succeeds when the summed magnitude of its separated output stays
    strictly below the threshold."""
    report = SilentReport(energy_threshold)
    for sep in separations:
        for k, objects in enumerate(sep.sample.videos):
            energies = sep.energies(k)
            for obj, energy in zip(objects, energies):
                if obj.is_audible_gt is None:
                    raise EvaluationError(f"{sep.sample.sample_id}: silent-object scoring needs audibility labels")
                if obj.is_audible_gt:
                    continue
                report.total += 1
                report.energies.append(float(energy))
                report.successes += int(energy < energy_threshold)
    return report


def silent_success_rate(
    model,
    samples: Iterable[CompositeSample],
    cfg: tfspace.StftConfig,
    gating: str = "grounding",
    energy_threshold: float = 20.0,
) -> SilentReport:
    model.eval()
    return silent_success_from((separate_sample(model, s, cfg, gating) for s in samples), energy_threshold)


# Separation report


@dataclass
class SourceRow:
    sample_id: str
    source: str
    sdr: float
    sir: float
    sar: float


def _aggregate(rows: List[SourceRow]) -> Dict[str, Dict[str, Optional[float]]]:
    result = {}
    for metric in ("sdr", "sir", "sar"):
        values = [getattr(r, metric) for r in rows]
        per_sample: Dict[str, List[float]] = {}
        for r in rows:
            per_sample.setdefault(r.sample_id, []).append(getattr(r, metric))
        sample_means = [float(np.mean(v)) for v in per_sample.values()]
        result[metric] = {
            "pooled": float(np.mean(values)) if values else None,
            "per_sample": float(np.mean(sample_means)) if sample_means else None,
        }
    return result


@dataclass
class SeparationReport:
    gating: str
    floor_policy: str
    rows: List[SourceRow] = field(default_factory=list)
    gt_rows: List[SourceRow] = field(default_factory=list)
    mixture_rows: List[SourceRow] = field(default_factory=list)
    silent_rows: List[SourceRow] = field(default_factory=list)
    silent_gt_rows: List[SourceRow] = field(default_factory=list)
    silent: Optional[SilentReport] = None

    def aggregates(self) -> Dict[str, Any]:
        return {
            "model": _aggregate(self.rows),
            "ground_truth": _aggregate(self.gt_rows),
            "mixture": _aggregate(self.mixture_rows),
            "silent_subset": _aggregate(self.silent_rows),
            "silent_subset_ground_truth": _aggregate(self.silent_gt_rows),
        }

    @property
    def mean_sdr(self) -> Optional[float]:
        return _aggregate(self.rows)["sdr"]["pooled"]

    def to_dict(self) -> Dict[str, Any]:
        silent = None
        if self.silent is not None:
            silent = {
                "energy_threshold": self.silent.energy_threshold,
                "successes": self.silent.successes,
                "total": self.silent.total,
                "success_rate": self.silent.success_rate,
            }
        return {
            "schema_version": SCHEMA_VERSION,
            "gating": self.gating,
            "floor_policy": self.floor_policy,
            "sources": len(self.rows),
            "aggregates": self.aggregates(),
            "silent_objects": silent,
        }


def _rows(sample_id: str, sources: Sequence[str], result: BssResult) -> List[SourceRow]:
    return [
        SourceRow(sample_id, name, float(result.sdr[i]), float(result.sir[i]), float(result.sar[i]))
        for i, name in enumerate(sources)
    ]


def separation_report(
    model,
    samples: Sequence[CompositeSample],
    cfg: tfspace.StftConfig,
    gating: str = "grounding",
    eval_cfg: EvalConfig = EvalConfig(),
    progress: bool = False,
) -> SeparationReport:
    """Score each video's separated sound against its solo sound.

    A video's estimate is the mixture masked with the gated sum of its objects' masks.
    Silent objects are scored against their zero reference: both sides get the same
    low-level floor noise, so a fully muted estimate scores at the numerical ceiling.
    """
    model.eval()
    amplitude = eval_cfg.floor_amplitude
    report = SeparationReport(
        gating=gating,
        floor_policy=f"all-zero signals floored with seeded Gaussian noise of amplitude {amplitude:g}",
    )
    separations = []
    for sample in tqdm(samples, desc="separation", disable=not progress):
        sep = separate_sample(model, sample, cfg, gating)
        separations.append(sep)
        refs = list(sample.sounds)
        names = ["video1", "video2"]
        estimates = [sep.video_waveform(k, cfg) for k in range(2)]
        report.rows += _rows(sample.sample_id, names, bss_eval(refs, estimates, eval_cfg.filter_len, amplitude))
        report.gt_rows += _rows(sample.sample_id, names, bss_eval(refs, refs, eval_cfg.filter_len, amplitude))
        report.mixture_rows += _rows(
            sample.sample_id, names, bss_eval(refs, [sample.mixture, sample.mixture], eval_cfg.filter_len, amplitude)
        )

        if not sample.object_sounds or not sample.has_labels:
            continue
        for k, objects in enumerate(sample.videos):
            for n, obj in enumerate(objects):
                if obj.is_audible_gt:
                    continue
                reference = sample.object_sounds[obj.object_id].samples.astype(np.float64)
                noise = floor_noise(reference.shape[0], amplitude)
                reference = reference + noise
                estimate = sep.object_waveform(k, n, cfg).samples.astype(np.float64) + noise
                result = bss_eval([reference], [estimate], eval_cfg.filter_len, 0.0)
                report.silent_rows += _rows(sample.sample_id, [obj.object_id], result)
                gt = bss_eval([reference], [reference], eval_cfg.filter_len, 0.0)
                report.silent_gt_rows += _rows(sample.sample_id, [obj.object_id], gt)

    if all(s.sample.has_labels for s in separations):
        report.silent = silent_success_from(separations, eval_cfg.energy_threshold)
    logger.info(f"Separation report ({gating}): {len(report.rows)} sources, mean SDR {report.mean_sdr}")
    return report


# Report files


def write_grounding_report(report: GroundingReport, out_dir) -> Path:
    out_dir = Path(out_dir)
    write_csv(
        out_dir / f"grounding_{report.protocol}.csv",
        ["class_id", "tp", "fp", "tn", "fn"],
        [[k, c["tp"], c["fp"], c["tn"], c["fn"]] for k, c in sorted(report.confusion.items())],
    )
    path = out_dir / f"grounding_{report.protocol}.json"
    write_json(path, report.to_dict())
    return path


def _source_rows(rows: List[SourceRow]):
    return [[r.sample_id, r.source, r.sdr, r.sir, r.sar] for r in rows]


def write_separation_report(report: SeparationReport, out_dir) -> Path:
    out_dir = Path(out_dir)
    header = ["sample_id", "source", "sdr", "sir", "sar"]
    write_csv(out_dir / "separation_sources.csv", header, _source_rows(report.rows))
    write_csv(out_dir / "separation_ground_truth.csv", header, _source_rows(report.gt_rows))
    write_csv(out_dir / "separation_mixture.csv", header, _source_rows(report.mixture_rows))
    write_csv(out_dir / "separation_silent.csv", header, _source_rows(report.silent_rows))
    path = out_dir / "separation.json"
    write_json(path, report.to_dict())
    return path


def summary_rows(grounding: Dict[str, GroundingReport], separation: Optional[SeparationReport]) -> List[List[Any]]:
    rows = []
    for protocol in PROTOCOLS:
        if protocol in grounding:
            rows.append([protocol.split("_")[0], grounding[protocol].accuracy, "", "", ""])
    if separation is not None:
        aggregates = separation.aggregates()
        for name, key in (("separation", "model"), ("ground_truth", "ground_truth"),
                          ("mixture", "mixture"), ("silent_subset", "silent_subset")):
            a = aggregates[key]
            rows.append([name, "", a["sdr"]["pooled"], a["sir"]["pooled"], a["sar"]["pooled"]])
    return rows


def write_summary(grounding: Dict[str, GroundingReport], separation: Optional[SeparationReport], path) -> Path:
    path = Path(path)
    write_csv(path, ["row", "accuracy", "sdr", "sir", "sar"],
              [[_blank(v) for v in row] for row in summary_rows(grounding, separation)])
    return path


def _blank(value):
    return "" if value is None else value


# Plots


def capped(value: Optional[float], cap: float) -> float:
    if value is None or math.isnan(value):
        return 0.0
    return max(-cap, min(cap, value))


def plot_loss_curves(step_records: List[Dict[str, Any]], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(8, 4.5))
    steps = [r["step"] for r in step_records]
    names = sorted({n for r in step_records for n, v in r["losses"].items() if v is not None})
    for name in names:
        points = [(s, r["losses"][name]) for s, r in zip(steps, step_records) if r["losses"].get(name) is not None]
        ax.plot([p[0] for p in points], [p[1] for p in points], label=name, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    if names:
        ax.legend(loc="upper right", fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_metric_bars(values: Dict[str, Optional[float]], path, ylabel: str, cap: float = 300.0) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    labels = list(values)
    ax.bar(labels, [capped(values[k], cap) for k in labels], color="tab:blue")
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
