import hashlib
import logging
from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from asyncflow.exceptions import AsyncFlowError
from asyncflow.run_config import FIELD_SECTIONS, TPM_SECTIONS, RunConfig, config_hash, dump_config, load_run_config

logger = logging.getLogger(__name__)


class AsyncflowCommand(BaseCommand):
    """Shared flags, config loading, output layout and error mapping."""

    requires_system_checks = []
    output_name = ""

    def add_arguments(self, parser):
        parser.add_argument("--config", help="Run configuration YAML (default: settings.ASYNCFLOW_CONFIG)")
        parser.add_argument("--seed", type=int, help="Override the configured seed")
        parser.add_argument("--out", help="Output root directory (default: the config's output_dir)")
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    def handle(self, *args, **options):
        self.verbosity = options.get("verbosity", 1)
        try:
            config = self.load_config(options)
            self.run(config, **options)
        except AsyncFlowError as exc:
            raise CommandError(str(exc), returncode=exc.exit_code) from exc
        except OSError as exc:
            raise CommandError(f"I/O failure: {exc}", returncode=4) from exc

    def run(self, config: RunConfig, /, **options):
        raise NotImplementedError

    @property
    def progress(self) -> bool:
        return self.verbosity > 0

    def load_config(self, options) -> RunConfig:
        config = load_run_config(Path(options.get("config") or settings.ASYNCFLOW_CONFIG))
        updates = {}
        if options.get("seed") is not None:
            updates["seed"] = options["seed"]
        out = options.get("out") or settings.ASYNCFLOW_OUTPUT_ROOT
        if out:
            updates["output_dir"] = str(out)
        return config.model_copy(update=updates) if updates else config

    # Output layout -------------------------------------------------------

    def field_dir(self, config: RunConfig) -> Path:
        # run length is left out so --resume finds checkpoints of shorter runs
        field = config.field.model_copy(update={"iterations": 0, "checkpoint_every": 0})
        keyed = config.model_copy(update={"field": field})
        return Path(config.output_dir) / f"field-{config_hash(keyed, *FIELD_SECTIONS)}"

    def tpm_dir(self, config: RunConfig) -> Path:
        return Path(config.output_dir) / f"tpm-{config_hash(config, *TPM_SECTIONS)}"

    def field_checkpoint(self, config: RunConfig, options) -> Path:
        return Path(options.get("field_checkpoint") or self.field_dir(config) / "field.ckpt")

    def tpm_checkpoint(self, config: RunConfig, options, default: bool = True):
        path = options.get("tpm_checkpoint")
        if path:
            return Path(path)
        return self.tpm_dir(config) / "tpm.ckpt" if default else None

    def output_dir(self, config: RunConfig, *extra) -> Path:
        """``<out>/<command>-<hash>``, where the hash covers the config and any extra inputs."""
        digest = config_hash(config)
        if extra:
            joined = "|".join([digest, *map(str, extra)])
            digest = hashlib.sha256(joined.encode("utf-8")).hexdigest()[:12]
        path = Path(config.output_dir) / f"{self.output_name}-{digest}"
        path.mkdir(parents=True, exist_ok=True)
        (path / "config.yaml").write_text(dump_config(config), encoding="utf-8")
        return path

    def add_checkpoint_arguments(self, parser, tpm: bool = True):
        parser.add_argument("--field-checkpoint", help="Field checkpoint (default: from the config hash)")
        if tpm:
            parser.add_argument("--tpm-checkpoint", help="TPM checkpoint (default: from the config hash)")
