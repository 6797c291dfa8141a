from pathlib import Path

from django.core.management.base import CommandError

from av_colearn.management.base import ColearnCommand
from av_colearn.synthworld import SPLITS, build_dataset, ingest_external
from av_colearn.utils import write_json


class Command(ColearnCommand):
    help = "Build the synthetic train/val/test manifests, or ingest external WAV + feature data"

    def add_command_arguments(self, parser):
        parser.add_argument("--data-dir", type=str, help="Where manifests are written (default <output-dir>/data)")
        parser.add_argument("--force", action="store_true", help="Overwrite existing manifests")
        parser.add_argument(
            "--ingest",
            nargs=3,
            metavar=("AUDIO_DIR", "FEATURE_DIR", "MAPPING"),
            help="Ingest external data instead of synthesizing",
        )
        parser.add_argument("--split", choices=SPLITS, default="test", help="Split name for --ingest")

    def run(self, **options):
        data_dir = Path(options["data_dir"] or self.data_dir)

        if options["ingest"]:
            targets = [self.split_path(options["split"], data_dir)]
        else:
            targets = [self.split_path(split, data_dir) for split in SPLITS]
        existing = [str(p) for p in targets if p.exists()]
        if existing and not options["force"]:
            raise CommandError(
                f"Refusing to overwrite {', '.join(existing)}; pass --force to rebuild", returncode=1
            )

        if options["ingest"]:
            audio_dir, feature_dir, mapping = options["ingest"]
            manifests = {
                options["split"]: ingest_external(
                    audio_dir, feature_dir, mapping, self.stft(),
                    self.settings["world"]["feature_dim"], split=options["split"],
                )
            }
        else:
            manifests = build_dataset(self.world())

        for split, manifest in manifests.items():
            manifest.write(self.split_path(split, data_dir))

        write_json(
            data_dir / "provenance.json",
            {
                "config_hash": self.config_hash,
                "world_seed": self.settings["world"]["world_seed"],
                "counts": {split: len(m) for split, m in manifests.items()},
                "external": bool(options["ingest"]),
                "settings": self.settings,
            },
        )
        counts = ", ".join(f"{split} {len(m)}" for split, m in manifests.items())
        self.success(f"Wrote manifests to '{data_dir}' ({counts})")
