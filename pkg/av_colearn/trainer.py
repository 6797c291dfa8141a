"""Curriculum training: stage wiring per ablation mode, the learning-rate schedule,
checkpoints and the per-stage optimization loop."""

import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import torch
from torch.utils.data import DataLoader
from tqdm import tqdm

from . import evalsuite
from .colearn import collate, compute_losses
from .exceptions import CheckpointError, ConfigurationError, InputError, NumericalError, StagingError
from .logger import get_logger
from .nets import ArchConfig, ModelState, parameter_checksum
from .runlog import RunLog, mean_losses
from .synthworld import derive_seed
from .tfspace import StftConfig

logger = get_logger(__name__)

MODES = ("grounding_only", "random_obj", "col", "ccol", "oracle")

CHECKPOINT_FORMAT = "av-colearn-checkpoint"
CHECKPOINT_VERSION = 1

_PAPER_EPOCHS = 60
_PAPER_MILESTONES = (30, 50)


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "ccol"
    batch_size: int = 16
    epochs_per_stage: int = 20
    base_lr: float = 1e-4
    lr_milestones: Optional[Tuple[int, ...]] = None
    lr_factor: float = 0.1
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    epsilon: float = 0.1
    seed: int = 0
    val_max_samples: Optional[int] = 50
    log_every: int = 10
    distance: str = "mean"
    workers: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"Unknown training mode {self.mode!r}")
        if self.batch_size < 1 or self.epochs_per_stage < 1:
            raise ConfigurationError("batch_size and epochs_per_stage must be positive")
        if self.lr_milestones is not None and any(m >= self.epochs_per_stage for m in self.lr_milestones):
            raise ConfigurationError("lr milestones must lie below epochs_per_stage")

    @property
    def milestones(self) -> Tuple[int, ...]:
        if self.lr_milestones is not None:
            return tuple(sorted(self.lr_milestones))
        # scale the 30/50-of-60 decay points to the configured stage length
        scaled = {math.ceil(m * self.epochs_per_stage / _PAPER_EPOCHS) for m in _PAPER_MILESTONES}
        return tuple(sorted(m for m in scaled if m < self.epochs_per_stage))

    @classmethod
    def from_settings(cls, settings: Dict[str, Any], **changes) -> "TrainConfig":
        train = dict(settings["train"])
        milestones = train.pop("lr_milestones")
        train.update(
            lr_milestones=None if milestones is None else tuple(milestones),
            betas=tuple(train["betas"]),
            val_max_samples=train["val_max_samples"],
            distance=settings["stft"]["distance"],
            workers=settings["workers"],
        )
        train.update(changes)
        return cls(**train)


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    if not 0 <= epoch < cfg.epochs_per_stage:
        raise InputError(f"epoch {epoch} outside [0, {cfg.epochs_per_stage})")
    passed = sum(1 for m in cfg.milestones if m <= epoch)
    return cfg.base_lr * cfg.lr_factor**passed


@dataclass(frozen=True)
class StageWiring:
    stage: int
    objective: str
    # which parameters the optimizer owns: grounding, separation or all
    scope: str


_WIRING = {
    "grounding_only": (StageWiring(1, "grounding", "grounding"),),
    "random_obj": (StageWiring(1, "random_obj", "separation"),),
    "col": (StageWiring(1, "grounding", "grounding"), StageWiring(2, "col", "all")),
    "ccol": (
        StageWiring(1, "grounding", "grounding"),
        StageWiring(2, "col", "all"),
        StageWiring(3, "ccol", "all"),
    ),
    "oracle": (StageWiring(1, "oracle", "separation"),),
}


def train_mode_variants(mode: str, has_labels: bool = True) -> Tuple[StageWiring, ...]:
    """The ordered stages a mode trains and each stage's objective."""
    if mode not in _WIRING:
        raise ConfigurationError(f"Unknown training mode {mode!r}")
    if mode == "oracle" and not has_labels:
        raise ConfigurationError("oracle mode needs audibility labels, the training data has none")
    return _WIRING[mode]


def stage_wiring(mode: str, stage: int) -> StageWiring:
    for wiring in _WIRING[mode]:
        if wiring.stage == stage:
            return wiring
    raise StagingError(f"mode {mode} has no stage {stage}")


def _parameters(model, scope: str):
    if scope == "grounding":
        return list(model.grounding_parameters())
    if scope == "separation":
        return list(model.separation_parameters())
    return list(model.parameters())


# Checkpoints


def checkpoint_save(path, state: ModelState, complete: Optional[bool] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch": state.arch.to_dict(),
        "stft": state.stft.to_dict(),
        "mode": state.mode,
        "stage": state.stage,
        "epoch": state.epoch,
        "step": state.step,
        "complete": state.complete if complete is None else complete,
        "settings_hash": state.settings_hash,
        "dtype": str(next(state.model.parameters()).dtype).replace("torch.", ""),
        "state_dict": state.model.state_dict(),
        "optimizer": state.optimizer_state,
        "checksum": parameter_checksum(state.model),
        "extra": state.extra,
    }
    # serialize in memory so the archive does not depend on the file name
    buffer = io.BytesIO()
    torch.save(payload, buffer)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buffer.getvalue())
    tmp.replace(path)
    logger.debug(f"Checkpoint written to {path} (stage {state.stage}, epoch {state.epoch}, step {state.step})")
    return path


def _read_checkpoint(path: Path) -> Dict[str, Any]:
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        payload = torch.load(str(path), map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"checkpoint {path} is unreadable: {e}")
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not an av-colearn checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path} has checkpoint version {payload.get('version')}, this release reads {CHECKPOINT_VERSION}"
        )
    return payload


def checkpoint_load(path, arch: Optional[ArchConfig] = None, stft: Optional[StftConfig] = None) -> ModelState:
    """Restore a :class:`ModelState`. Passing ``arch`` or ``stft`` checks the checkpoint
    against them."""
    path = Path(path)
    payload = _read_checkpoint(path)
    saved_arch = ArchConfig.from_dict(payload["arch"])
    saved_stft = StftConfig(**payload["stft"])
    if stft is not None and stft != saved_stft:
        raise CheckpointError(f"{path} was trained with STFT settings {saved_stft}, configured {stft}")

    dtype = getattr(torch, payload.get("dtype", "float32"))
    state = ModelState.fresh(arch or saved_arch, saved_stft, dtype=dtype)
    expected = state.model.state_dict()
    mismatched = [
        f"{name}: checkpoint {tuple(tensor.shape)} vs model {tuple(expected[name].shape)}"
        for name, tensor in payload["state_dict"].items()
        if name in expected and tuple(tensor.shape) != tuple(expected[name].shape)
    ]
    missing = sorted(set(expected) ^ set(payload["state_dict"]))
    if mismatched or missing:
        detail = "; ".join(mismatched + [f"{name}: missing on one side" for name in missing])
        raise CheckpointError(f"{path} does not fit the architecture: shape mismatch {detail}")
    if arch is not None and arch != saved_arch:
        raise CheckpointError(f"{path} was trained with architecture {saved_arch}, configured {arch}")
    state.model.load_state_dict(payload["state_dict"])

    if parameter_checksum(state.model) != payload["checksum"]:
        raise CheckpointError(f"{path} is corrupted: parameter checksum mismatch")

    state.mode = payload["mode"]
    state.stage = payload["stage"]
    state.epoch = payload["epoch"]
    state.step = payload["step"]
    state.optimizer_state = payload["optimizer"]
    state.settings_hash = payload["settings_hash"]
    state.extra = dict(payload["extra"])
    state.complete = payload["complete"]
    return state


# Stages


def stage_paths(out_dir, stage: int) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    return {
        "final": out_dir / f"stage{stage}.pt",
        "last_good": out_dir / f"stage{stage}.last_good.pt",
        "best": out_dir / f"stage{stage}.best.pt",
        "runlog": out_dir / "runlog.jsonl",
    }


def _as_list(items):
    return list(items)


def _validation_metric(model, objective: str, mode: str, val_data, stft: StftConfig, eval_cfg) -> Dict[str, Any]:
    samples = [val_data[i] for i in range(len(val_data))]
    if objective == "grounding":
        report = evalsuite.grounding_accuracy(model, samples, "mixed_sound", stft)
        return {"metric": "val_mixed_accuracy", "value": report.accuracy}
    report = evalsuite.separation_report(model, samples, stft, evalsuite.GATING_BY_MODE[mode], eval_cfg)
    return {"metric": "val_sdr", "value": report.mean_sdr}


def _epoch_generator(cfg: TrainConfig, stage: int, epoch: int) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(cfg.seed, stage, epoch))


def run_stage(
    cfg: TrainConfig,
    stage: int,
    train_data,
    out_dir,
    arch: Optional[ArchConfig] = None,
    stft: Optional[StftConfig] = None,
    val_data=None,
    eval_cfg: Optional["evalsuite.EvalConfig"] = None,
    resume: bool = False,
    settings_hash: str = "",
    dtype: torch.dtype = torch.float32,
    progress: bool = False,
) -> Tuple[ModelState, RunLog]:
    """Train one curriculum stage and write ``stage<n>.pt`` under ``out_dir``.

    Stage 1 starts from a fresh model built from ``arch`` and ``stft``; later stages
    continue from the previous stage's checkpoint. With ``resume`` an interrupted stage
    continues after its last completed epoch.
    """
    wiring = stage_wiring(cfg.mode, stage)
    stages = train_mode_variants(cfg.mode, getattr(train_data, "has_labels", True))
    position = [w.stage for w in stages].index(stage)
    paths = stage_paths(out_dir, stage)
    eval_cfg = eval_cfg or evalsuite.EvalConfig()

    start_epoch = 0
    state = None
    if resume and paths["last_good"].is_file():
        state = checkpoint_load(paths["last_good"])
        if state.stage != stage or state.mode != cfg.mode:
            raise StagingError(f"{paths['last_good']} belongs to {state.mode} stage {state.stage}")
        start_epoch = state.epoch + 1
        logger.info(f"Resuming {cfg.mode} stage {stage} after epoch {state.epoch} (step {state.step})")
    elif position == 0:
        if arch is None or stft is None:
            raise StagingError("the first stage needs an architecture and STFT configuration")
        state = ModelState.fresh(arch, stft, seed=derive_seed(cfg.seed, stage), mode=cfg.mode, dtype=dtype)
    else:
        previous = stage_paths(out_dir, stages[position - 1].stage)["final"]
        if not previous.is_file():
            raise StagingError(f"stage {stage} needs the stage {stages[position - 1].stage} checkpoint {previous}")
        state = checkpoint_load(previous)
        if not state.complete:
            raise StagingError(f"{previous} is not a completed stage checkpoint")
        state.optimizer_state = None
        state.epoch = 0

    state.mode, state.stage, state.complete = cfg.mode, stage, False
    state.settings_hash = settings_hash or state.settings_hash
    state.extra = {"best_metric": state.extra.get("best_metric") if resume else None}
    model = state.model
    stft = state.stft

    optimizer = torch.optim.Adam(
        _parameters(model, wiring.scope), lr=cfg.base_lr, betas=cfg.betas, eps=cfg.adam_eps
    )
    if resume and state.optimizer_state is not None:
        optimizer.load_state_dict(state.optimizer_state)

    runlog = RunLog(paths["runlog"], seed=cfg.seed, config_hash=state.settings_hash)
    if start_epoch == 0:
        runlog.discard_from(stage)
        paths["best"].unlink(missing_ok=True)
    if runlog.step != state.step:
        logger.warning(f"Run log is at step {runlog.step}, checkpoint at step {state.step}; continuing the log")
    runlog.log_event("stage_start", stage=stage, mode=cfg.mode, objective=wiring.objective, epoch=start_epoch)
    logger.info(f"Training {cfg.mode} stage {stage} ({wiring.objective}) for {cfg.epochs_per_stage} epochs")

    if start_epoch == 0:
        state.epoch = -1
        checkpoint_save(paths["last_good"], state)

    epoch_losses: Dict[str, Optional[float]] = {}
    for epoch in range(start_epoch, cfg.epochs_per_stage):
        lr = lr_schedule(epoch, cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr

        generator = _epoch_generator(cfg, stage, epoch)
        order = torch.randperm(len(train_data), generator=generator).tolist()
        loader = DataLoader(
            train_data,
            batch_size=cfg.batch_size,
            sampler=order,
            collate_fn=_as_list,
            num_workers=cfg.workers,
        )

        model.train()
        records = []
        for samples in tqdm(loader, desc=f"stage {stage} epoch {epoch}", disable=not progress):
            batch = collate(samples, stft, generator=generator, dtype=dtype)
            breakdown = compute_losses(model, batch, wiring.objective, cfg.epsilon, cfg.distance)
            loss = breakdown.total
            if not torch.isfinite(loss):
                logger.error(f"Non-finite loss at step {state.step + 1}: {breakdown.as_dict()}")
                raise NumericalError(
                    f"{cfg.mode} stage {stage} produced a non-finite loss at step {state.step + 1}",
                    diagnostics=breakdown.as_dict(),
                    last_good=str(paths["last_good"]),
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

            state.step = runlog.log_step(breakdown, stage, epoch, lr)
            records.append(breakdown.as_dict())
            if state.step % cfg.log_every == 0:
                logger.debug(f"step {state.step}: {wiring.objective} loss {float(loss):.5f}")

        epoch_losses = mean_losses(records)
        metrics: Dict[str, Any] = {"lr": lr}
        if val_data is not None and len(val_data):
            model.eval()
            metrics.update(_validation_metric(model, wiring.objective, cfg.mode, val_data, stft, eval_cfg))
        runlog.log_epoch(stage, epoch, epoch_losses, metrics)

        state.epoch = epoch
        state.optimizer_state = optimizer.state_dict()
        value = metrics.get("value")
        best = state.extra.get("best_metric")
        if value is not None and not math.isnan(value) and (best is None or value > best):
            state.extra["best_metric"] = value
            checkpoint_save(paths["best"], state, complete=True)
            logger.info(f"New best {metrics['metric']} {value:.4f} at epoch {epoch}")
        checkpoint_save(paths["last_good"], state)
        logger.info(f"Stage {stage} epoch {epoch} done: {wiring.objective} {epoch_losses}")

    checkpoint_save(paths["final"], state, complete=True)
    runlog.log_event("stage_end", stage=stage, mode=cfg.mode, losses=epoch_losses or mean_losses([]))
    logger.info(f"Finished {cfg.mode} stage {stage}, checkpoint {paths['final']}")
    return state, runlog


def run_curriculum(
    cfg: TrainConfig,
    train_data,
    out_dir,
    arch: ArchConfig,
    stft: StftConfig,
    val_data=None,
    eval_cfg=None,
    settings_hash: str = "",
    dtype: torch.dtype = torch.float32,
    progress: bool = False,
) -> ModelState:
    """Every stage of the mode in order, each starting from its predecessor."""
    state = None
    for wiring in train_mode_variants(cfg.mode, getattr(train_data, "has_labels", True)):
        state, _ = run_stage(
            cfg, wiring.stage, train_data, out_dir, arch=arch, stft=stft, val_data=val_data,
            eval_cfg=eval_cfg, settings_hash=settings_hash, dtype=dtype, progress=progress,
        )
    return state


def final_stage(mode: str) -> int:
    return _WIRING[mode][-1].stage


def best_checkpoint(out_dir, mode: str) -> Path:
    """Best validated checkpoint of the mode's final stage, else its final checkpoint."""
    paths = stage_paths(out_dir, final_stage(mode))
    return paths["best"] if paths["best"].is_file() else paths["final"]
