"""`phantom`: write synthetic cases, per-fraction manifests and optionally an atlas."""

import argparse
import logging
from pathlib import Path

from pournet.commands.common import (
    add_config_argument,
    add_workers_argument,
    emit,
    load_config,
    updated,
    workers,
)
from pournet.exceptions import UsageError
from pournet.services.phantom import export_dataset, generate_atlas

logger = logging.getLogger(__name__)


def _fractions(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(part) for part in text.split(",") if part.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"invalid fraction list '{text}'") from exc


def register(subparsers) -> None:
    parser = subparsers.add_parser("phantom", help="Generate synthetic phantom cases")
    add_config_argument(parser)
    add_workers_argument(parser)
    parser.add_argument("--count", type=int, default=None, help="Number of cases")
    parser.add_argument("--size", type=int, default=None, help="Cubic extent (divisible by 4)")
    parser.add_argument("--fractions", type=_fractions, default=None,
                        help="Comma-separated count fractions, e.g. 0.1,0.025")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--atlas-size", type=int, default=0,
                        help="Also write an atlas of this many entries under OUT/atlas")
    parser.add_argument("--out", type=Path, required=True, help="Output directory")
    parser.set_defaults(func=run)


def run(args: argparse.Namespace) -> int:
    if args.size is not None and (args.size < 8 or args.size % 4):
        raise UsageError(f"--size must be a multiple of 4 and at least 8, got {args.size}")
    if args.count is not None and args.count < 1:
        raise UsageError(f"--count must be >= 1, got {args.count}")
    if args.atlas_size < 0:
        raise UsageError(f"--atlas-size must be >= 0, got {args.atlas_size}")

    config = load_config(args)
    updates = {}
    if args.size is not None:
        updates["size"] = args.size
    if args.fractions is not None:
        updates["count_fractions"] = args.fractions
    spec = updated(config.phantom, **updates)
    count = args.count if args.count is not None else config.dataset.count

    manifests = export_dataset(args.out, spec, count, config.degrade, config.dataset,
                               workers(args))
    for path in manifests:
        emit(f"manifest={path}")
    if args.atlas_size:
        atlas = generate_atlas(args.atlas_size, spec, config.seed, workers(args))
        atlas.to_directory(args.out / "atlas")
        emit(f"atlas={args.out / 'atlas'}\tentries={len(atlas)}")
    return 0
