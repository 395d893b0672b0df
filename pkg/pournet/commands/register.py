"""`register`: diffeomorphic demons registration of a moving μ-map onto a fixed one."""

import argparse
import logging
from pathlib import Path

from pournet.commands.common import add_config_argument, emit, load_config, load_input
from pournet.services import metrics
from pournet.services.ppgm import demons_register
from pournet.services.volume import write_volume

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("register", help="Register a moving volume onto a fixed one")
    add_config_argument(parser)
    parser.add_argument("--fixed", type=Path, required=True)
    parser.add_argument("--moving", type=Path, required=True)
    parser.add_argument("--out", type=Path, required=True, help="Warped moving volume")
    parser.set_defaults(func=run)


def run(args: argparse.Namespace) -> int:
    cfg = load_config(args).cascade.demons
    fixed, moving = load_input(args.fixed), load_input(args.moving)
    field, warped = demons_register(fixed, moving, cfg)
    write_volume(warped, args.out)
    before = metrics.rmse(moving, fixed) ** 2
    after = metrics.rmse(warped, fixed) ** 2
    emit(
        f"initial_mse={before:.8g}\tregistered_mse={after:.8g}"
        f"\tmean_displacement={field.mean_magnitude():.6f}"
        f"\tpositive_jacobian={field.positive_jacobian_fraction():.6f}"
    )
    return 0
