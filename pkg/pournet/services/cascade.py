"""Cascade orchestration: manifests, patch sampling, per-stage training, whole-volume
inference and the OUR-Net / PPGM alternation."""

import hashlib
import logging
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from pournet import seeding
from pournet.exceptions import ContractError, ShapeError
from pournet.models.config import CascadeConfig, MetricOptions
from pournet.models.report import AggregateReport, MetricReport, PriorReport
from pournet.services import metrics
from pournet.services.checkpoint import checkpoint_digest, load_checkpoint, save_checkpoint
from pournet.services.optim import AdamState, adam_step
from pournet.services.ournet import OurNetParams, ournet_forward, predict, total_loss
from pournet.services.ppgm import AtlasDataset, generate_prior
from pournet.services.tensor import Tensor
from pournet.services.volume import (
    Volume3D,
    VolumeKind,
    normalize_activity,
    normalize_mu,
    read_volume,
    write_volume,
)
from pournet.telemetry import (
    OURNET_INFER,
    PRIOR_CACHE_HIT,
    PRIOR_CACHE_MISS,
    TRAIN_STEP,
    get_phase_timer,
)

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CaseRecord:
    """One manifest line: input activity, input μ, target μ and the split tag."""

    case_id: str
    lambda_path: Path
    mu_mlaa_path: Path
    mu_gt_path: Path
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ContractError(f"split must be one of {SPLITS}, got '{self.split}'",
                                module="cascade")


@dataclass(eq=False)
class CaseVolumes:
    """Normalized, shape-identical volumes of one case."""

    case_id: str
    lam: Volume3D
    mu_mlaa: Volume3D
    mu_gt: Volume3D
    split: str = "train"

    def __post_init__(self):
        if not (self.lam.shape == self.mu_mlaa.shape == self.mu_gt.shape):
            raise ShapeError(
                f"case {self.case_id}: λ {self.lam.dims}, μ-MLAA {self.mu_mlaa.dims} and "
                f"μ-gt {self.mu_gt.dims} differ",
                module="cascade",
            )

    def channels(self, prior: Volume3D | None = None) -> np.ndarray:
        """Network input (C, nz, ny, nx): λ, μ-MLAA and the prior when given."""
        layers = [self.lam.data, self.mu_mlaa.data]
        if prior is not None:
            if prior.shape != self.lam.shape:
                raise ShapeError(f"prior {prior.dims} does not match case {self.lam.dims}",
                                 module="cascade")
            layers.append(prior.data)
        return np.stack(layers).astype(np.float32)


def as_normalized(volume: Volume3D) -> Volume3D:
    """Normalize raw activity / μ volumes; already-normalized volumes pass through."""
    if volume.kind == VolumeKind.ACTIVITY:
        return normalize_activity(volume)
    if volume.kind == VolumeKind.MU:
        return normalize_mu(volume)
    return volume


class TrainingManifest:
    """Case list read from a tab-separated file (paths relative to the manifest)."""

    def __init__(self, records: Sequence[CaseRecord], root: str | Path = "."):
        self.records = list(records)
        self.root = Path(root)

    @classmethod
    def load(cls, path: str | Path) -> "TrainingManifest":
        path = Path(path)
        try:
            lines = path.read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise ContractError(f"cannot read manifest {path}: {exc}", module="cascade") from exc
        records = []
        for lineno, line in enumerate(lines, start=1):
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.rstrip("\n").split("\t")
            if len(fields) != 4:
                raise ContractError(
                    f"{path}:{lineno}: expected 3 paths and a split tag, got {len(fields)} fields",
                    module="cascade",
                )
            lam, mu_mlaa, mu_gt, split = fields
            case_id = Path(mu_gt).parent.name or Path(mu_gt).stem
            records.append(CaseRecord(case_id, Path(lam), Path(mu_mlaa), Path(mu_gt), split))
        if not records:
            raise ContractError(f"manifest {path} lists no cases", module="cascade")
        return cls(records, root=path.parent)

    def save(self, path: str | Path) -> None:
        lines = [
            f"{r.lambda_path.as_posix()}\t{r.mu_mlaa_path.as_posix()}\t{r.mu_gt_path.as_posix()}"
            f"\t{r.split}"
            for r in self.records
        ]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    def split(self, tag: str) -> list[CaseRecord]:
        return [r for r in self.records if r.split == tag]

    def resolve(self, path: Path) -> Path:
        return path if path.is_absolute() else self.root / path

    def load_case(self, record: CaseRecord, cache=None) -> CaseVolumes:
        load = cache.load if cache is not None else read_volume
        return CaseVolumes(
            case_id=record.case_id,
            lam=as_normalized(load(self.resolve(record.lambda_path))),
            mu_mlaa=as_normalized(load(self.resolve(record.mu_mlaa_path))),
            mu_gt=as_normalized(load(self.resolve(record.mu_gt_path))),
            split=record.split,
        )

    def load_split(self, tag: str, cache=None) -> list[CaseVolumes]:
        return [self.load_case(r, cache) for r in self.split(tag)]


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------


class Patch(NamedTuple):
    corner: tuple[int, int, int]
    arrays: tuple[np.ndarray, ...]


def patch_corners(shape: Sequence[int], n: int, size: int,
                  rng: np.random.Generator) -> np.ndarray:
    """(n, 3) corners drawn uniformly over every fully-inside position."""
    if any(size > extent for extent in shape):
        raise ContractError(f"patch size {size} exceeds volume extents {tuple(shape)}",
                            module="cascade")
    highs = np.array([extent - size + 1 for extent in shape])
    return rng.integers(0, highs, size=(n, 3))


def patch_sampler(
    arrays: Sequence[np.ndarray], n: int, size: int, seed: int, stream: Sequence[int] = ()
) -> list[Patch]:
    """n co-registered cubic crops of the last three axes of every array."""
    shape = arrays[0].shape[-3:]
    if any(a.shape[-3:] != shape for a in arrays):
        raise ShapeError("patch sources must share their spatial shape", module="cascade")
    rng = seeding.substream(seed, seeding.PATCHES, *stream)
    patches = []
    for z, y, x in patch_corners(shape, n, size, rng):
        window = (Ellipsis, slice(z, z + size), slice(y, y + size), slice(x, x + size))
        patches.append(Patch((int(z), int(y), int(x)), tuple(a[window] for a in arrays)))
    return patches


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainingLog:
    """Total loss per step, plus validation checks when early stopping is on."""

    losses: list[float] = field(default_factory=list)
    validation: list[tuple[int, float]] = field(default_factory=list)
    stopped_at: int | None = None

    @property
    def initial_loss(self) -> float:
        return self.losses[0]

    @property
    def final_loss(self) -> float:
        return self.losses[-1]

    def to_text(self) -> str:
        return "".join(f"{step}\t{loss:.8g}\n" for step, loss in enumerate(self.losses, start=1))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def _patch_pool(cases: Sequence[CaseVolumes], priors: dict[str, Volume3D] | None,
                stage: int, cfg: CascadeConfig) -> tuple[np.ndarray, np.ndarray]:
    training = cfg.training
    inputs, targets = [], []
    for i, case in enumerate(cases):
        prior = priors[case.case_id] if priors is not None else None
        sources = (case.channels(prior), case.mu_gt.data[None])
        for patch in patch_sampler(sources, training.patches_per_volume, training.patch_size,
                                   training.seed, stream=(stage, i)):
            inputs.append(patch.arrays[0])
            targets.append(patch.arrays[1])
    return np.stack(inputs).astype(np.float32), np.stack(targets).astype(np.float32)


def _batch_order(pool_size: int, cfg: CascadeConfig, stage: int):
    """Endless stream of batch index arrays: reshuffled passes over the patch pool."""
    rng = seeding.substream(cfg.training.seed, seeding.BATCHES, stage)
    batch_size = min(cfg.training.batch_size, pool_size)
    while True:
        order = rng.permutation(pool_size)
        for start in range(0, pool_size - batch_size + 1, batch_size):
            yield order[start : start + batch_size]


def _patch_loss(params: OurNetParams, x: np.ndarray, y: np.ndarray) -> float:
    frozen = params.frozen()
    out = ournet_forward(Tensor(x), frozen)
    return total_loss(out, Tensor(y)).item()


def train_stage(
    stage: int,
    cases: Sequence[CaseVolumes],
    cfg: CascadeConfig,
    priors: dict[str, Volume3D] | None = None,
    val_cases: Sequence[CaseVolumes] = (),
    val_priors: dict[str, Volume3D] | None = None,
) -> tuple[OurNetParams, TrainingLog]:
    """Adam-train a fresh OUR-Net for cascade stage `stage` on random patches."""
    if not cases:
        raise ContractError("no training cases", module="cascade")
    if stage >= 2:
        missing = [c.case_id for c in cases if priors is None or c.case_id not in priors]
        if missing:
            raise ContractError(f"stage {stage} needs priors; missing for {missing[:3]}",
                                module="cascade")
        priors = {c.case_id: priors[c.case_id] for c in cases}
    else:
        priors = None

    training = cfg.training
    params = OurNetParams.initialize(cfg.stage_config(stage), training.seed, stage)
    x_pool, y_pool = _patch_pool(cases, priors, stage, cfg)
    logger.info(
        f"Training stage {stage}: {params.count()} parameters, {len(x_pool)} patches of "
        f"{training.patch_size}^3, {training.steps} steps"
    )

    early_stopping = training.early_stopping_patience is not None and len(val_cases) > 0
    if early_stopping:
        if stage >= 2 and val_priors is None:
            raise ContractError("early stopping at stage >= 2 needs validation priors",
                                module="cascade")
        # validation patches come from their own stream index
        x_val, y_val = _patch_pool(val_cases, val_priors if stage >= 2 else None,
                                   stage + 1000, cfg)
    best_val, best_arrays, stale = np.inf, None, 0

    state = AdamState()
    log = TrainingLog()
    timer = get_phase_timer()
    batches = _batch_order(len(x_pool), cfg, stage)
    for step in range(1, training.steps + 1):
        index = next(batches)
        with timer.time(TRAIN_STEP):
            params.zero_grad()
            out = ournet_forward(Tensor(x_pool[index]), params)
            loss = total_loss(out, Tensor(y_pool[index]))
            loss.backward()
            adam_step(params.arrays(), params.grads(), state, training.lr, training.betas,
                      training.eps)
        log.losses.append(loss.item())
        if step % training.log_interval == 0 or step == 1:
            logger.info(f"stage {stage} step {step}/{training.steps} loss {loss.item():.6g}")
        if (
            training.stop_loss_ratio is not None
            and log.final_loss < training.stop_loss_ratio * log.initial_loss
        ):
            logger.info(f"Loss below {training.stop_loss_ratio:g} of the first step at {step}")
            log.stopped_at = step
            break

        if early_stopping and step % training.log_interval == 0:
            val_loss = _patch_loss(params, x_val, y_val)
            log.validation.append((step, val_loss))
            if val_loss < best_val:
                best_val, stale = val_loss, 0
                best_arrays = {k: v.copy() for k, v in params.arrays().items()}
            else:
                stale += 1
                if stale >= training.early_stopping_patience:
                    logger.info(f"Early stopping at step {step} (best val {best_val:.6g})")
                    log.stopped_at = step
                    break

    if best_arrays is not None:
        params = OurNetParams.from_arrays(best_arrays, params.config)
    return params, log


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def _pad_to_multiple(x: np.ndarray, multiple: int = 4) -> tuple[np.ndarray, tuple[int, ...]]:
    shape = x.shape[-3:]
    pads = [(0, 0)] * (x.ndim - 3) + [(0, (-n) % multiple) for n in shape]
    return np.pad(x, pads, mode="edge"), shape


def _positions(extent: int, size: int, stride: int) -> list[int]:
    starts = list(range(0, extent - size + 1, stride))
    if starts[-1] != extent - size:
        starts.append(extent - size)
    return starts


def _sliding_predict(params: OurNetParams, x: np.ndarray, size: int, stride: int) -> np.ndarray:
    _, nz, ny, nx = x.shape
    if size % 4:
        raise ContractError(f"patch size must be divisible by 4, got {size}", module="cascade")
    if size > min(nz, ny, nx):
        raise ContractError(f"patch size {size} exceeds padded extents {(nz, ny, nx)}",
                            module="cascade")
    total = np.zeros((nz, ny, nx), dtype=np.float64)
    weight = np.zeros((nz, ny, nx), dtype=np.float64)
    for z in _positions(nz, size, stride):
        for y in _positions(ny, size, stride):
            for x0 in _positions(nx, size, stride):
                window = (slice(z, z + size), slice(y, y + size), slice(x0, x0 + size))
                total[window] += predict(params, x[(slice(None), *window)][None])[0, 0]
                weight[window] += 1.0
    return total / weight


def infer_volume(
    lam_norm: Volume3D,
    mu_mlaa_norm: Volume3D,
    prior: Volume3D | None,
    params: OurNetParams,
    patch_size: int | None = None,
    patch_stride: int | None = None,
) -> Volume3D:
    """Whole-volume X_F in normalized μ units, edge-padded to a multiple of 4 internally."""
    if lam_norm.shape != mu_mlaa_norm.shape:
        raise ShapeError(f"λ {lam_norm.dims} and μ-MLAA {mu_mlaa_norm.dims} differ",
                         module="cascade")
    expected = params.config.in_channels
    if (prior is None and expected != 2) or (prior is not None and expected != 3):
        state = "absent" if prior is None else "given"
        raise ContractError(f"network expects {expected} input channels, prior {state}",
                            module="cascade")
    case = CaseVolumes("query", lam_norm, mu_mlaa_norm, mu_mlaa_norm)
    x, shape = _pad_to_multiple(case.channels(prior))

    with get_phase_timer().time(OURNET_INFER):
        if patch_size is None:
            out = predict(params, x[None])[0, 0]
        else:
            stride = patch_stride or max(4, patch_size // 2)
            out = _sliding_predict(params, x, patch_size, stride)
    out = out[: shape[0], : shape[1], : shape[2]]
    return Volume3D(out, mu_mlaa_norm.spacing, VolumeKind.MU_NORMALIZED)


# ---------------------------------------------------------------------------
# cascade
# ---------------------------------------------------------------------------


def stage_checkpoint(directory: str | Path, stage: int) -> Path:
    return Path(directory) / f"stage{stage}.pour"


def save_stage(params: OurNetParams, directory: str | Path, stage: int) -> Path:
    path = stage_checkpoint(directory, stage)
    save_checkpoint(params.arrays(), path)
    return path


def load_stage(directory: str | Path, stage: int, cfg: CascadeConfig) -> OurNetParams:
    path = stage_checkpoint(directory, stage)
    if not path.exists():
        raise ContractError(f"missing stage checkpoint {path}", module="cascade")
    return OurNetParams.from_arrays(load_checkpoint(path), cfg.stage_config(stage))


def load_stages(directory: str | Path, n: int, cfg: CascadeConfig) -> list[OurNetParams]:
    return [load_stage(directory, k, cfg) for k in range(1, n + 1)]


def prior_cache_key(params: OurNetParams, atlas: AtlasDataset, cfg: CascadeConfig,
                    previous: Volume3D | None = None) -> str:
    """Short digest of everything a cached prior depends on besides the case itself."""
    digest = hashlib.sha256()
    digest.update(checkpoint_digest(params.arrays()).encode())
    digest.update(atlas.fingerprint.encode())
    digest.update(cfg.demons.model_dump_json().encode())
    digest.update(cfg.atlas.model_dump_json().encode())
    digest.update(repr((cfg.infer_patch_size, cfg.infer_patch_stride)).encode())
    if previous is not None:
        digest.update(np.ascontiguousarray(previous.data, dtype=np.float32).tobytes())
    return digest.hexdigest()[:16]


def compute_priors(
    stage: int,
    params: OurNetParams,
    cases: Sequence[CaseVolumes],
    atlas: AtlasDataset,
    cfg: CascadeConfig,
    previous: dict[str, Volume3D] | None = None,
    cache_dir: str | Path | None = None,
    workers: int = 1,
) -> dict[str, Volume3D]:
    """Priors from the frozen stage-`stage` model, one per case (feeds stage + 1).

    Cached priors are named prior_stage{k}_{case}_{key}.vvol, `key` from
    `prior_cache_key`, so a different model, atlas or demons setting never reuses them.
    """

    def build(case: CaseVolumes) -> tuple[str, Volume3D]:
        prior_in = previous[case.case_id] if previous is not None else None
        cached = None
        if cache_dir is not None:
            key = prior_cache_key(params, atlas, cfg, prior_in)
            cached = Path(cache_dir) / f"prior_stage{stage}_{case.case_id}_{key}.vvol"
        if cached is not None and cached.exists():
            get_phase_timer().increment(PRIOR_CACHE_HIT)
            return case.case_id, read_volume(cached)
        if cached is not None:
            get_phase_timer().increment(PRIOR_CACHE_MISS)
        x_f = infer_volume(case.lam, case.mu_mlaa, prior_in, params, cfg.infer_patch_size,
                           cfg.infer_patch_stride)
        prior, _, _ = generate_prior(x_f, atlas, cfg.demons, ground_truth=case.mu_gt,
                                     presample=cfg.atlas.presample)
        if cached is not None:
            cached.parent.mkdir(parents=True, exist_ok=True)
            write_volume(prior, cached)
        return case.case_id, prior

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return dict(pool.map(build, cases))
    return dict(build(case) for case in cases)


def train_cascade(
    manifest: TrainingManifest,
    atlas: AtlasDataset | None,
    cfg: CascadeConfig,
    out_dir: str | Path,
    first_stage: int = 1,
    last_stage: int | None = None,
    workers: int = 1,
    cache=None,
) -> list[OurNetParams]:
    """Train stages first_stage..last_stage (default n_cascades), writing stage{k}.pour and
    stage{k}.log.

    Earlier stages are loaded from `out_dir` and never rewritten.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_cases = manifest.load_split("train", cache)
    val_cases = manifest.load_split("val", cache)
    prior_dir = out / "priors"

    stages: list[OurNetParams] = []
    train_priors: dict[str, Volume3D] | None = None
    val_priors: dict[str, Volume3D] | None = None
    last_stage = cfg.n_cascades if last_stage is None else last_stage
    if not 1 <= first_stage <= last_stage <= cfg.n_cascades:
        raise ContractError(
            f"stages {first_stage}..{last_stage} outside 1..{cfg.n_cascades}", module="cascade"
        )
    for stage in range(1, last_stage + 1):
        if stage < first_stage:
            params = load_stage(out, stage, cfg)
        else:
            params, log = train_stage(stage, train_cases, cfg, train_priors, val_cases,
                                      val_priors)
            save_stage(params, out, stage)
            log.save(out / f"stage{stage}.log")
            for stale_prior in prior_dir.glob(f"prior_stage{stage}_*.vvol"):
                stale_prior.unlink()
            logger.info(
                f"Stage {stage} done: loss {log.initial_loss:.6g} -> {log.final_loss:.6g}"
            )
        stages.append(params)
        if stage < last_stage:
            train_priors = compute_priors(stage, params, train_cases, atlas, cfg, train_priors,
                                          prior_dir, workers)
            if val_cases and cfg.training.early_stopping_patience is not None:
                val_priors = compute_priors(stage, params, val_cases, atlas, cfg, val_priors,
                                            prior_dir, workers)
    return stages


@dataclass
class PourResult:
    final: Volume3D
    stages: list[Volume3D]
    reports: list[PriorReport]


def run_pour(
    lam_norm: Volume3D,
    mu_mlaa_norm: Volume3D,
    stage_params: Sequence[OurNetParams],
    atlas: AtlasDataset | None,
    cfg: CascadeConfig,
    ground_truth: Volume3D | None = None,
    workers: int = 1,
) -> PourResult:
    """Alternate OUR-Net inference and prior generation over the given stages."""
    if not stage_params:
        raise ContractError("no stage parameters", module="cascade")
    if len(stage_params) > 1 and atlas is None:
        raise ContractError("an atlas is required for more than one stage", module="cascade")
    prior: Volume3D | None = None
    stages: list[Volume3D] = []
    reports: list[PriorReport] = []
    for k, params in enumerate(stage_params, start=1):
        x_f = infer_volume(lam_norm, mu_mlaa_norm, prior, params, cfg.infer_patch_size,
                           cfg.infer_patch_stride)
        stages.append(x_f)
        if k < len(stage_params):
            prior, _, report = generate_prior(x_f, atlas, cfg.demons, ground_truth,
                                              cfg.atlas.presample, workers)
            reports.append(report)
    return PourResult(stages[-1], stages, reports)


@dataclass
class CascadeEvaluation:
    """Per-stage metric rows on the test split; stage 0 is the μ-MLAA input itself."""

    rows: dict[int, list[tuple[str, MetricReport]]] = field(default_factory=dict)

    def summary(self, stage: int) -> AggregateReport:
        return metrics.summarize([r for _, r in self.rows[stage]])

    def to_text(self) -> str:
        blocks = []
        for stage, rows in sorted(self.rows.items()):
            label = "mu_mlaa" if stage == 0 else f"stage{stage}"
            blocks.append(f"# {label}\n{metrics.format_table(rows)}")
        return "\n".join(blocks)


def evaluate_cascade(
    cases: Sequence[CaseVolumes],
    stage_params: Sequence[OurNetParams],
    atlas: AtlasDataset | None,
    cfg: CascadeConfig,
    options: MetricOptions | None = None,
    workers: int = 1,
) -> CascadeEvaluation:
    options = options or MetricOptions()
    evaluation = CascadeEvaluation({k: [] for k in range(len(stage_params) + 1)})
    for case in cases:
        mask = (
            metrics.body_mask(case.mu_gt, options.mask_threshold)
            if options.mask_threshold is not None
            else None
        )
        evaluation.rows[0].append(
            (case.case_id, metrics.evaluate_case(case.mu_mlaa, case.mu_gt, mask, options))
        )
        result = run_pour(case.lam, case.mu_mlaa, stage_params, atlas, cfg, case.mu_gt, workers)
        for k, volume in enumerate(result.stages, start=1):
            evaluation.rows[k].append(
                (case.case_id, metrics.evaluate_case(volume, case.mu_gt, mask, options))
            )
    return evaluation
