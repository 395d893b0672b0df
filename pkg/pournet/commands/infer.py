"""`infer`: whole-volume OUR-Net inference with one stage checkpoint."""

import argparse
import logging
from pathlib import Path

from pournet.commands.common import add_config_argument, emit, load_config, load_input
from pournet.exceptions import UsageError
from pournet.services.cascade import infer_volume
from pournet.services.checkpoint import load_checkpoint
from pournet.services.ournet import OurNetParams
from pournet.services.volume import write_volume

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("infer", help="Predict a normalized μ-map with one stage")
    add_config_argument(parser)
    parser.add_argument("--checkpoint", type=Path, required=True, help="stage{k}.pour file")
    parser.add_argument("--stage", type=int, default=1, help="Stage the checkpoint belongs to")
    parser.add_argument("--lambda", dest="lam", type=Path, required=True,
                        help="Activity input (raw or normalized)")
    parser.add_argument("--mu", type=Path, required=True, help="μ-MLAA input")
    parser.add_argument("--prior", type=Path, help="Prior from the previous stage (stage >= 2)")
    parser.add_argument("--patch-size", type=int, default=None)
    parser.add_argument("--patch-stride", type=int, default=None)
    parser.add_argument("--out", type=Path, required=True)
    parser.set_defaults(func=run)


def run(args: argparse.Namespace) -> int:
    if args.stage < 1:
        raise UsageError(f"--stage must be >= 1, got {args.stage}")
    if args.stage >= 2 and args.prior is None:
        raise UsageError("--prior is required for stage 2 or later")
    cfg = load_config(args).cascade
    arrays = load_checkpoint(args.checkpoint)
    params = OurNetParams.from_arrays(arrays, cfg.stage_config(args.stage))
    prior = load_input(args.prior) if args.prior else None
    patch_size = args.patch_size or cfg.infer_patch_size
    patch_stride = args.patch_stride or cfg.infer_patch_stride

    result = infer_volume(load_input(args.lam), load_input(args.mu), prior, params,
                          patch_size, patch_stride)
    write_volume(result, args.out)
    nx, ny, nz = result.dims
    emit(f"output={args.out}\tdims={nx}x{ny}x{nz}")
    return 0
