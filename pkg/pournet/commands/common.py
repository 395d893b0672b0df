"""Shared helpers for command handlers."""

import argparse
import logging
import sys
from pathlib import Path

from pydantic import BaseModel, ValidationError

from pournet.config import settings
from pournet.dependencies import get_volume_cache
from pournet.exceptions import ConfigError, UsageError
from pournet.models.config import RunConfig, format_validation_error
from pournet.services.cascade import as_normalized
from pournet.services.volume import Volume3D

logger = logging.getLogger(__name__)


def add_config_argument(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="Flat key=value run configuration")


def add_workers_argument(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--workers",
        type=int,
        default=None,
        help=f"Worker threads (default POUR_WORKERS={settings.POUR_WORKERS})",
    )


def workers(args: argparse.Namespace) -> int:
    count = getattr(args, "workers", None)
    if count is None:
        count = settings.POUR_WORKERS
    if count < 1:
        raise UsageError(f"--workers must be >= 1, got {count}")
    return count


def load_config(args: argparse.Namespace) -> RunConfig:
    """RunConfig from --config (defaults when absent), with --seed applied on top."""
    path = getattr(args, "config", None)
    config = RunConfig.from_file(path) if path else RunConfig()
    seed = getattr(args, "seed", None)
    if seed is not None:
        config = updated(config, seed=seed)
    logger.info(f"Run configuration: seed={config.seed} source={path or 'defaults'}")
    logger.debug("Effective configuration:\n" + config.to_text())
    return config


def load_input(path: Path) -> Volume3D:
    """Read a volume through the shared cache and bring it to network units."""
    return as_normalized(get_volume_cache().load(path))


def emit(text: str) -> None:
    """Write a command report to stdout (logs go to stderr)."""
    sys.stdout.write(text if text.endswith("\n") else text + "\n")
    sys.stdout.flush()


def updated(section: BaseModel, **updates) -> BaseModel:
    """Copy of a configuration section with command-line overrides, re-validated."""
    try:
        return type(section).model_validate({**section.model_dump(), **updates})
    except ValidationError as exc:
        raise ConfigError(format_validation_error(exc)) from exc
