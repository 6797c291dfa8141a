from pathlib import Path

from django.core.management.base import CommandError

from av_colearn import evalsuite
from av_colearn.exceptions import CheckpointError
from av_colearn.management.base import ColearnCommand
from av_colearn.trainer import checkpoint_load
from av_colearn.utils import write_json

PROTOCOL_CHOICES = ("grounding", "separation", "silent")


class Command(ColearnCommand):
    help = "Evaluate a checkpoint: grounding accuracy, separation SDR/SIR/SAR and silent objects"

    def add_command_arguments(self, parser):
        parser.add_argument("--checkpoint", type=str, required=True, help="Checkpoint file")
        parser.add_argument("--manifest", type=str, help="Manifest to evaluate (default <data-dir>/test.jsonl)")
        parser.add_argument("--data-dir", type=str, help="Directory holding test.jsonl")
        parser.add_argument(
            "--protocols",
            type=str,
            default="grounding,separation",
            help=f"Comma-separated subset of {','.join(PROTOCOL_CHOICES)}",
        )
        parser.add_argument(
            "--gating",
            choices=evalsuite.GATINGS,
            help="Object gating for separation (default follows the checkpoint's training mode)",
        )
        parser.add_argument("--out-dir", type=str, help="Report directory (default next to the checkpoint)")
        parser.add_argument("--progress", action="store_true", help="Show progress bars")

    def run(self, **options):
        protocols = [p.strip() for p in options["protocols"].split(",") if p.strip()]
        unknown = sorted(set(protocols) - set(PROTOCOL_CHOICES))
        if unknown:
            raise CommandError(f"Unknown protocols: {', '.join(unknown)}", returncode=2)

        checkpoint = Path(options["checkpoint"])
        state = checkpoint_load(checkpoint, stft=self.stft())
        if state.arch.feature_dim != self.settings["world"]["feature_dim"]:
            raise CheckpointError(
                f"{checkpoint} expects {state.arch.feature_dim}-dimensional object features, "
                f"the configured world has {self.settings['world']['feature_dim']}"
            )
        model = state.model
        stft = state.stft
        eval_cfg = evalsuite.EvalConfig.from_settings(self.settings)
        gating = options["gating"] or evalsuite.GATING_BY_MODE[state.mode]

        manifest_path = options["manifest"] or self.split_path("test", options["data_dir"])
        dataset = self.dataset(manifest_path, limit=eval_cfg.max_samples)
        samples = [dataset[i] for i in range(len(dataset))]
        out_dir = Path(options["out_dir"] or checkpoint.parent / f"eval-{checkpoint.stem}")

        grounding = {}
        if "grounding" in protocols:
            for protocol in evalsuite.PROTOCOLS:
                report = evalsuite.grounding_accuracy(model, samples, protocol, stft)
                evalsuite.write_grounding_report(report, out_dir)
                grounding[protocol] = report

        separation = None
        if "separation" in protocols:
            separation = evalsuite.separation_report(model, samples, stft, gating, eval_cfg, options["progress"])
            evalsuite.write_separation_report(separation, out_dir)
            aggregates = separation.aggregates()
            evalsuite.plot_metric_bars(
                {name: aggregates[key]["sdr"]["pooled"] for name, key in
                 (("model", "model"), ("mixture", "mixture"), ("silent subset", "silent_subset"))},
                out_dir / "sdr.png",
                "SDR (dB)",
                cap=eval_cfg.inf_cap_db,
            )

        if "silent" in protocols:
            silent = evalsuite.silent_success_rate(model, samples, stft, gating, eval_cfg.energy_threshold)
            write_json(out_dir / "silent.json", {
                "schema_version": evalsuite.SCHEMA_VERSION,
                "gating": gating,
                "energy_threshold": silent.energy_threshold,
                "successes": silent.successes,
                "total": silent.total,
                "success_rate": silent.success_rate,
            })

        if grounding or separation is not None:
            evalsuite.write_summary(grounding, separation, out_dir / "summary.csv")
        self.success(f"Evaluated {len(samples)} samples ({', '.join(protocols)}); reports in '{out_dir}'")
