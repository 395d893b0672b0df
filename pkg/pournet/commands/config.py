"""`config`: print or check the flat run configuration."""

import argparse
from pathlib import Path

from pournet.commands.common import emit
from pournet.exceptions import UsageError
from pournet.models.config import RunConfig


def register(subparsers) -> None:
    parser = subparsers.add_parser("config", help="Dump defaults or validate a config file")
    group = parser.add_mutually_exclusive_group(required=True)
    group.add_argument("--dump-defaults", action="store_true",
                       help="Print every key with its default value")
    group.add_argument("--check", type=Path, help="Validate a config file and print it resolved")
    parser.set_defaults(func=run)


def run(args: argparse.Namespace) -> int:
    if args.dump_defaults:
        emit(RunConfig().to_text())
    elif args.check:
        emit(RunConfig.from_file(args.check).to_text())
    else:
        raise UsageError("nothing to do")
    return 0
