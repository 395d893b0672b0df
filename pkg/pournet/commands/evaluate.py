"""`eval`: PSNR / SSIM / RMSE of predictions against references."""

import argparse
import logging
from pathlib import Path

from pournet.commands.common import add_config_argument, emit, load_config, load_input
from pournet.exceptions import UsageError
from pournet.services import metrics

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("eval", help="Evaluate predictions against references")
    add_config_argument(parser)
    parser.add_argument("--pred", type=Path, nargs="+", required=True)
    parser.add_argument("--ref", type=Path, nargs="+", required=True)
    parser.add_argument("--mask-threshold", type=float, default=None,
                        help="Restrict rmse/psnr to reference voxels above this value")
    parser.set_defaults(func=run)


def run(args: argparse.Namespace) -> int:
    if len(args.pred) != len(args.ref):
        raise UsageError(f"{len(args.pred)} predictions but {len(args.ref)} references")
    options = load_config(args).metrics
    threshold = args.mask_threshold if args.mask_threshold is not None else options.mask_threshold

    rows = []
    for pred_path, ref_path in zip(args.pred, args.ref):
        pred, ref = load_input(pred_path), load_input(ref_path)
        mask = metrics.body_mask(ref, threshold) if threshold is not None else None
        rows.append((pred_path.stem, metrics.evaluate_case(pred, ref, mask, options)))
    emit(metrics.format_table(rows))
    return 0
