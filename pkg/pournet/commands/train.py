"""`train`: train one cascade stage (earlier stages are loaded from the output directory)."""

import argparse
import logging
from pathlib import Path

from pournet.commands.common import (
    add_config_argument,
    add_workers_argument,
    emit,
    load_config,
    workers,
)
from pournet.dependencies import get_volume_cache
from pournet.exceptions import UsageError
from pournet.services.cascade import TrainingManifest, stage_checkpoint, train_cascade
from pournet.services.ppgm import AtlasDataset
from pournet.telemetry import get_phase_timer

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("train", help="Train one OUR-Net stage")
    add_config_argument(parser)
    add_workers_argument(parser)
    parser.add_argument("--manifest", type=Path, required=True)
    parser.add_argument("--stage", type=int, default=1, help="Stage to train (1-based)")
    parser.add_argument("--atlas", type=Path, help="Atlas directory (needed for stage >= 2)")
    parser.add_argument("--out", type=Path, required=True, help="Checkpoint directory")
    parser.add_argument("--seed", type=int, default=None)
    parser.set_defaults(func=run)


def run(args: argparse.Namespace) -> int:
    config = load_config(args)
    cfg = config.cascade
    if args.stage > cfg.n_cascades:
        cfg = cfg.model_copy(update={"n_cascades": args.stage})
    cache = get_volume_cache()
    manifest = TrainingManifest.load(args.manifest)
    atlas = AtlasDataset.from_directory(args.atlas, cache) if args.atlas else None
    if args.stage < 1:
        raise UsageError(f"--stage must be >= 1, got {args.stage}")
    if args.stage >= 2 and atlas is None:
        raise UsageError("--atlas is required to train stage 2 or later")

    train_cascade(manifest, atlas, cfg, args.out, first_stage=args.stage,
                  last_stage=args.stage, workers=workers(args), cache=cache)
    emit(f"checkpoint={stage_checkpoint(args.out, args.stage)}")
    get_phase_timer().log_summary()
    return 0
