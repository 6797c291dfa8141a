import json
from pathlib import Path
from typing import Any, Dict

from django.core.management.base import BaseCommand, CommandError

from ..exceptions import ColearnError
from ..logger import configure_logging, get_logger
from ..models import Manifest
from ..settings import load_settings, settings_hash
from ..synthworld import CompositeDataset, WorldConfig
from ..tfspace import StftConfig
from ..utils import write_json

logger = get_logger(__name__)


class ColearnCommand(BaseCommand):
    """Shared options and error translation for every av-colearn command.

    Subclasses implement ``run(**options)``; library errors leave the process with
    their own exit code.
    """

    requires_system_checks = []

    def add_arguments(self, parser):
        parser.add_argument("--config", type=str, help="JSON config file layered over the defaults")
        parser.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="Override one setting, e.g. --set train.batch_size=8 (repeatable)",
        )
        parser.add_argument(
            "--paper-scale",
            dest="full_scale",
            action="store_true",
            help="Use the full-size profile: 18720/260/260 samples, batch 48, 60 epochs per stage",
        )
        parser.add_argument("--output-dir", type=str, help="Root directory for all outputs")
        parser.add_argument("--seed", type=int, help="Training seed (train.seed)")
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    def handle(self, *args, **options):
        configure_logging(options.get("verbosity", 1))
        try:
            self.settings = self.load(options)
            return self.run(**options)
        except ColearnError as e:
            logger.error(f"{type(e).__name__}: {e}")
            raise CommandError(str(e), returncode=e.exit_code)

    def run(self, **options):
        raise NotImplementedError

    # helpers

    def load(self, options) -> Dict[str, Any]:
        overrides = list(options.get("overrides") or [])
        if options.get("output_dir"):
            overrides.append(f"output_dir={json.dumps(options['output_dir'])}")
        if options.get("seed") is not None:
            overrides.append(f"train.seed={options['seed']}")
        return load_settings(options.get("config"), overrides, options.get("full_scale", False))

    @property
    def output_dir(self) -> Path:
        return Path(self.settings["output_dir"])

    @property
    def data_dir(self) -> Path:
        return self.output_dir / "data"

    @property
    def config_hash(self) -> str:
        return settings_hash(self.settings)

    def world(self) -> WorldConfig:
        return WorldConfig.from_settings(self.settings)

    def stft(self) -> StftConfig:
        return StftConfig.from_settings(self.settings)

    def dataset(self, manifest_path, limit=None) -> CompositeDataset:
        manifest = Manifest.read(manifest_path)
        return CompositeDataset(manifest, self.world(), self.stft(), limit=limit)

    def split_path(self, split: str, data_dir=None) -> Path:
        return Path(data_dir or self.data_dir) / f"{split}.jsonl"

    def write_resolved_config(self, directory) -> Path:
        path = Path(directory) / "config.json"
        write_json(path, {"config_hash": self.config_hash, "settings": self.settings})
        return path

    def success(self, message: str) -> None:
        self.stdout.write(self.style.SUCCESS(message))
