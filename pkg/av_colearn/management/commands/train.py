from pathlib import Path

from django.core.management.base import CommandError

from av_colearn.evalsuite import EvalConfig, plot_loss_curves
from av_colearn.management.base import ColearnCommand
from av_colearn.nets import ArchConfig
from av_colearn.runlog import RunLog
from av_colearn.trainer import MODES, TrainConfig, run_curriculum, run_stage, stage_paths, train_mode_variants


def run_directory(output_dir: Path, mode: str, seed: int) -> Path:
    return Path(output_dir) / "runs" / f"{mode}-seed{seed}"


class Command(ColearnCommand):
    help = "Train one curriculum stage, or every stage of a mode"

    def add_command_arguments(self, parser):
        parser.add_argument("--mode", choices=MODES, help="Training mode (train.mode)")
        parser.add_argument(
            "--stage",
            default="all",
            choices=["1", "2", "3", "all"],
            help="Stage to train; 'all' runs the mode's whole curriculum",
        )
        parser.add_argument("--data-dir", type=str, help="Directory holding train.jsonl and val.jsonl")
        parser.add_argument("--run-dir", type=str, help="Checkpoint and log directory")
        parser.add_argument("--resume", action="store_true", help="Continue an interrupted stage")
        parser.add_argument("--force", action="store_true", help="Retrain stages whose checkpoints already exist")
        parser.add_argument("--no-validation", action="store_true", help="Skip per-epoch validation")
        parser.add_argument("--progress", action="store_true", help="Show progress bars")

    def run(self, **options):
        if options["mode"]:
            self.settings["train"]["mode"] = options["mode"]
        cfg = TrainConfig.from_settings(self.settings)
        arch = ArchConfig.from_settings(self.settings)
        stft = self.stft()
        run_dir = Path(options["run_dir"] or run_directory(self.output_dir, cfg.mode, cfg.seed))
        data_dir = options["data_dir"]

        train_data = self.dataset(self.split_path("train", data_dir))
        val_data = None
        val_path = self.split_path("val", data_dir)
        if not options["no_validation"] and val_path.is_file():
            val_data = self.dataset(val_path, limit=cfg.val_max_samples)

        if options["stage"] == "all":
            stages = [w.stage for w in train_mode_variants(cfg.mode, train_data.has_labels)]
        else:
            stages = [int(options["stage"])]
        existing = [str(p) for p in (stage_paths(run_dir, s)["final"] for s in stages) if p.exists()]
        if existing and not options["force"]:
            raise CommandError(
                f"Refusing to overwrite {', '.join(existing)}; pass --force to retrain", returncode=1
            )

        self.write_resolved_config(run_dir)
        common = dict(
            val_data=val_data,
            eval_cfg=EvalConfig.from_settings(self.settings),
            settings_hash=self.config_hash,
            progress=options["progress"],
        )
        if options["stage"] == "all":
            state = run_curriculum(cfg, train_data, run_dir, arch, stft, **common)
        else:
            state, _ = run_stage(
                cfg, int(options["stage"]), train_data, run_dir, arch=arch, stft=stft,
                resume=options["resume"], **common,
            )

        runlog = RunLog(stage_paths(run_dir, state.stage)["runlog"])
        plot_loss_curves(runlog.records("step"), run_dir / "loss_curves.png")
        self.success(
            f"Trained {cfg.mode} through stage {state.stage} ({state.step} steps); checkpoints in '{run_dir}'"
        )
