"""`match`: exhaustive atlas search for the closest normalized μ-map."""

import argparse
import logging
from pathlib import Path

from pournet.commands.common import (
    add_config_argument,
    add_workers_argument,
    emit,
    load_config,
    load_input,
    workers,
)
from pournet.dependencies import get_volume_cache
from pournet.services.ppgm import AtlasDataset, atlas_match

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("match", help="Find the closest atlas entry")
    add_config_argument(parser)
    add_workers_argument(parser)
    parser.add_argument("--atlas", type=Path, required=True, help="Directory of .vvol files")
    parser.add_argument("--query", type=Path, required=True, help="Predicted μ-map")
    parser.add_argument("--presample", type=int, choices=(1, 2), default=None,
                        help="Match at native (1) or half (2) resolution")
    parser.set_defaults(func=run)


def run(args: argparse.Namespace) -> int:
    config = load_config(args)
    presample = args.presample or config.cascade.atlas.presample
    atlas = AtlasDataset.from_directory(args.atlas, get_volume_cache())
    result = atlas_match(load_input(args.query), atlas, presample, workers(args))
    logger.info(f"Best match {result.id} of {len(atlas)} entries")
    emit(f"matched_index={result.index}\tmatched_mse={result.mse:.8g}\tmatched_id={result.id}")
    return 0
