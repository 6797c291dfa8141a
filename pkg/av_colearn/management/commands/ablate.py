from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
from django.core.management.base import CommandError

from av_colearn import evalsuite
from av_colearn.logger import get_logger
from av_colearn.management.base import ColearnCommand
from av_colearn.nets import ArchConfig
from av_colearn.trainer import MODES, TrainConfig, best_checkpoint, checkpoint_load, final_stage, run_curriculum, stage_paths
from av_colearn.utils import write_csv

logger = get_logger(__name__)

RUN_COLUMNS = (
    "single_accuracy",
    "mixed_accuracy",
    "sdr",
    "sir",
    "sar",
    "silent_success_rate",
    "silent_subset_sdr",
    "silent_subset_sir",
)


def median(values: List[Optional[float]]) -> Optional[float]:
    """Median over the seeds that produced a value; None when none did."""
    present = [v for v in values if v is not None]
    if not present:
        return None
    return float(np.median(present))


def run_metrics(grounding: Dict[str, evalsuite.GroundingReport], separation: evalsuite.SeparationReport) -> Dict[str, Any]:
    aggregates = separation.aggregates()
    model, silent_subset = aggregates["model"], aggregates["silent_subset"]
    return {
        "single_accuracy": grounding["single_sound"].accuracy,
        "mixed_accuracy": grounding["mixed_sound"].accuracy,
        "sdr": model["sdr"]["pooled"],
        "sir": model["sir"]["pooled"],
        "sar": model["sar"]["pooled"],
        "silent_success_rate": separation.silent.success_rate if separation.silent else None,
        "silent_subset_sdr": silent_subset["sdr"]["pooled"],
        "silent_subset_sir": silent_subset["sir"]["pooled"],
    }


def _parse_list(text: str, kind=str):
    return [kind(item.strip()) for item in text.split(",") if item.strip()]


class Command(ColearnCommand):
    help = "Train and evaluate every ablation mode over several seeds and tabulate the medians"

    def add_command_arguments(self, parser):
        parser.add_argument("--seeds", type=str, default="0,1,2", help="Comma-separated training seeds")
        parser.add_argument("--modes", type=str, default=",".join(MODES), help="Comma-separated modes to compare")
        parser.add_argument("--data-dir", type=str, help="Directory holding train/val/test manifests")
        parser.add_argument("--retrain", action="store_true", help="Retrain runs that already have checkpoints")
        parser.add_argument("--progress", action="store_true", help="Show progress bars")

    def run(self, **options):
        try:
            seeds = _parse_list(options["seeds"], int)
        except ValueError:
            raise CommandError(f"--seeds must be integers, got {options['seeds']!r}", returncode=2)
        modes = _parse_list(options["modes"])
        unknown = sorted(set(modes) - set(MODES))
        if unknown or not modes or not seeds:
            raise CommandError(f"Need at least one seed and one of {', '.join(MODES)}", returncode=2)

        data_dir = options["data_dir"]
        arch = ArchConfig.from_settings(self.settings)
        stft = self.stft()
        eval_cfg = evalsuite.EvalConfig.from_settings(self.settings)
        train_data = self.dataset(self.split_path("train", data_dir))
        val_path = self.split_path("val", data_dir)
        val_data = None
        test = self.dataset(self.split_path("test", data_dir), limit=eval_cfg.max_samples)
        test_samples = [test[i] for i in range(len(test))]
        out_root = self.output_dir / "ablate"
        self.write_resolved_config(out_root)

        runs: Dict[str, Dict[int, Dict[str, Any]]] = {}
        for mode in modes:
            runs[mode] = {}
            for seed in seeds:
                cfg = TrainConfig.from_settings(self.settings, mode=mode, seed=seed)
                if val_data is None and val_path.is_file():
                    val_data = self.dataset(val_path, limit=cfg.val_max_samples)
                run_dir = out_root / mode / f"seed{seed}"
                final = stage_paths(run_dir, final_stage(mode))["final"]
                if options["retrain"] or not final.is_file():
                    logger.info(f"Training {mode} with seed {seed} into {run_dir}")
                    run_curriculum(
                        cfg, train_data, run_dir, arch, stft, val_data=val_data, eval_cfg=eval_cfg,
                        settings_hash=self.config_hash, progress=options["progress"],
                    )
                else:
                    logger.info(f"Reusing {final}")

                state = checkpoint_load(best_checkpoint(run_dir, mode), stft=stft)
                gating = evalsuite.GATING_BY_MODE[mode]
                grounding = {
                    protocol: evalsuite.grounding_accuracy(state.model, test_samples, protocol, stft)
                    for protocol in evalsuite.PROTOCOLS
                }
                separation = evalsuite.separation_report(
                    state.model, test_samples, stft, gating, eval_cfg, options["progress"]
                )
                eval_dir = run_dir / "eval"
                for report in grounding.values():
                    evalsuite.write_grounding_report(report, eval_dir)
                evalsuite.write_separation_report(separation, eval_dir)
                runs[mode][seed] = run_metrics(grounding, separation)

        self.write_tables(runs, out_root, eval_cfg.inf_cap_db)
        self.success(f"Compared {len(modes)} modes over {len(seeds)} seeds; tables in '{out_root}'")

    def write_tables(self, runs: Dict[str, Dict[int, Dict[str, Any]]], out_root: Path, cap: float) -> None:
        def medians(mode, *columns):
            return [median([m[c] for m in runs[mode].values()]) for c in columns]

        modes = list(runs)
        write_csv(
            out_root / "ablation_runs.csv",
            ["mode", "seed", *RUN_COLUMNS],
            [[mode, seed, *(m[c] for c in RUN_COLUMNS)] for mode in modes for seed, m in runs[mode].items()],
        )
        tables = {
            "ablation_grounding.csv": ("single_accuracy", "mixed_accuracy"),
            "ablation_separation.csv": ("sdr", "sir", "sar"),
            "ablation_silent.csv": ("silent_success_rate",),
            "ablation_silent_subset.csv": ("silent_subset_sdr", "silent_subset_sir"),
        }
        for name, columns in tables.items():
            write_csv(
                out_root / name,
                ["mode", "seeds", *(f"{c}_median" for c in columns)],
                [[mode, len(runs[mode]), *(_blank(v) for v in medians(mode, *columns))] for mode in modes],
            )
        evalsuite.plot_metric_bars(
            {mode: medians(mode, "sdr")[0] for mode in modes},
            out_root / "ablation_sdr.png",
            "median SDR (dB)",
            cap=cap,
        )


def _blank(value):
    return "" if value is None else value
