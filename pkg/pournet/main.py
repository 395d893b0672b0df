"""Command-line entry point."""

import argparse
import logging
import sys

from pournet import __version__
from pournet.commands import COMMANDS
from pournet.config import settings
from pournet.exceptions import PourException

logger = logging.getLogger(__name__)


def configure_logging(level: str) -> None:
    """Log to stderr; stdout carries command reports only."""
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=[logging.StreamHandler(sys.stderr)],
        force=True,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pournet",
        description="Attenuation-map generation with OUR-Net and population priors",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument(
        "--log-level",
        default=settings.LOG_LEVEL,
        choices=("DEBUG", "INFO", "WARNING", "ERROR"),
        type=str.upper,
        help="Logging verbosity (default from LOG_LEVEL)",
    )
    subparsers = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for command in COMMANDS:
        command.register(subparsers)
    return parser


def main(argv: list[str] | None = None) -> int:
    """Run one command and return its exit status (0 ok, 1 runtime error, 2 usage)."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    configure_logging(args.log_level)
    logger.debug(f"Command: {args.command} {vars(args)}")
    try:
        return args.func(args)
    except PourException as exc:
        logger.error(exc.message)
        print(f"pournet {args.command}: {exc.message}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:
        logger.error(f"Unhandled exception: {exc}", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
