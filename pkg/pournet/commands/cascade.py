"""`cascade train|run|eval`: the full OUR-Net / PPGM cascade."""

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
from pournet.exceptions import UsageError
from pournet.services.cascade import (
    TrainingManifest,
    evaluate_cascade,
    load_stages,
    run_pour,
    train_cascade,
)
from pournet.services.ppgm import AtlasDataset
from pournet.services.volume import write_volume
from pournet.telemetry import get_phase_timer

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("cascade", help="Train, run or evaluate the cascade")
    actions = parser.add_subparsers(dest="action", required=True)

    train = actions.add_parser("train", help="Train every stage in order")
    add_config_argument(train)
    add_workers_argument(train)
    train.add_argument("--manifest", type=Path, required=True)
    train.add_argument("--atlas", type=Path, help="Atlas directory (needed for >1 stage)")
    train.add_argument("--out", type=Path, required=True, help="Checkpoint directory")
    train.add_argument("--from-stage", type=int, default=1,
                       help="Keep earlier checkpoints and retrain from this stage")
    train.add_argument("--seed", type=int, default=None)
    train.set_defaults(func=run_train)

    run = actions.add_parser("run", help="Run the cascade on one case")
    add_config_argument(run)
    add_workers_argument(run)
    run.add_argument("--checkpoints", type=Path, required=True, help="Directory of stage*.pour")
    run.add_argument("--atlas", type=Path, help="Atlas directory (needed for >1 stage)")
    run.add_argument("--lambda", dest="lam", type=Path, required=True)
    run.add_argument("--mu", type=Path, required=True)
    run.add_argument("--stages", type=int, default=None, help="Number of stages to run")
    run.add_argument("--out", type=Path, required=True, help="Final μ-map")
    run.add_argument("--keep-stages", action="store_true",
                     help="Also write every intermediate stage output next to --out")
    run.set_defaults(func=run_cascade)

    evaluate = actions.add_parser("eval", help="Per-stage metrics on the test split")
    add_config_argument(evaluate)
    add_workers_argument(evaluate)
    evaluate.add_argument("--manifest", type=Path, required=True)
    evaluate.add_argument("--checkpoints", type=Path, required=True)
    evaluate.add_argument("--atlas", type=Path)
    evaluate.add_argument("--stages", type=int, default=None)
    evaluate.add_argument("--split", choices=("train", "val", "test"), default="test")
    evaluate.set_defaults(func=run_eval)


def _atlas(args: argparse.Namespace, stages: int) -> AtlasDataset | None:
    if args.atlas:
        return AtlasDataset.from_directory(args.atlas, get_volume_cache())
    if stages > 1:
        raise UsageError("--atlas is required for more than one stage")
    return None


def _stage_count(args: argparse.Namespace, n_cascades: int) -> int:
    stages = args.stages if args.stages is not None else n_cascades
    if stages < 1:
        raise UsageError(f"--stages must be >= 1, got {stages}")
    return stages


def run_train(args: argparse.Namespace) -> int:
    cfg = load_config(args).cascade
    atlas = _atlas(args, cfg.n_cascades)
    manifest = TrainingManifest.load(args.manifest)
    train_cascade(manifest, atlas, cfg, args.out, first_stage=args.from_stage,
                  workers=workers(args), cache=get_volume_cache())
    for k in range(1, cfg.n_cascades + 1):
        emit(f"stage{k}={args.out / f'stage{k}.pour'}")
    get_phase_timer().log_summary()
    return 0


def run_cascade(args: argparse.Namespace) -> int:
    cfg = load_config(args).cascade
    n = _stage_count(args, cfg.n_cascades)
    stages = load_stages(args.checkpoints, n, cfg)
    atlas = _atlas(args, n)
    result = run_pour(load_input(args.lam), load_input(args.mu), stages, atlas, cfg,
                      workers=workers(args))
    write_volume(result.final, args.out)
    if args.keep_stages:
        for k, volume in enumerate(result.stages, start=1):
            write_volume(volume, args.out.with_name(f"{args.out.stem}_stage{k}.vvol"))
    for k, report in enumerate(result.reports, start=1):
        emit(f"# ppgm after stage {k}\n{report.to_text()}")
    emit(f"output={args.out}\tstages={n}")
    get_phase_timer().log_summary()
    return 0


def run_eval(args: argparse.Namespace) -> int:
    config = load_config(args)
    cfg = config.cascade
    n = _stage_count(args, cfg.n_cascades)
    stages = load_stages(args.checkpoints, n, cfg)
    atlas = _atlas(args, n)
    cases = TrainingManifest.load(args.manifest).load_split(args.split, get_volume_cache())
    if not cases:
        raise UsageError(f"manifest has no '{args.split}' cases")
    evaluation = evaluate_cascade(cases, stages, atlas, cfg, config.metrics, workers(args))
    emit(evaluation.to_text())
    return 0
