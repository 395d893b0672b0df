"""Synthetic torso phantoms, the low-count MLAA surrogate and the population atlas.

Phantoms are label maps of ellipsoids, rods and arcs in normalized grid coordinates
([-1, 1] per axis, voxel centres), composited back to front and then edge-softened.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from enum import IntEnum
from pathlib import Path

import numpy as np

from pournet import seeding
from pournet.exceptions import ContractError
from pournet.models.config import DatasetConfig, DegradeConfig, PhantomSpec
from pournet.services.cascade import CaseRecord, TrainingManifest
from pournet.services.ppgm import AtlasDataset
from pournet.services.volume import (
    FWHM_TO_SIGMA,
    Volume3D,
    VolumeKind,
    gaussian_smooth,
    normalize_activity,
    normalize_mu,
    smooth_array,
    write_volume,
)

logger = logging.getLogger(__name__)


class Tissue(IntEnum):
    BACKGROUND = 0
    SOFT = 1
    LUNG = 2
    BONE = 3
    LESION = 4


def _coordinates(size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Voxel-centre coordinates (z, y, x) in [-1, 1], broadcastable over the grid."""
    axis = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    return axis[:, None, None], axis[None, :, None], axis[None, None, :]


def _uniform(rng: np.random.Generator, bounds: tuple[float, float]) -> float:
    low, high = bounds
    return float(rng.uniform(low, high)) if high > low else float(low)


def _inside_grid(extent: float, what: str) -> None:
    if extent > 1.0:
        raise ContractError(f"{what} extends outside the grid (extent {extent:.3f})",
                            module="phantom")


def phantom_labels(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    """Tissue label map (z, y, x) from `spec`; +y is posterior, +x is patient left."""
    z, y, x = _coordinates(spec.size)
    labels = np.zeros((spec.size,) * 3, dtype=np.int8)

    jitter = rng.uniform(1.0 - spec.body_jitter, 1.0 + spec.body_jitter, size=3)
    bx, by, bz = (a * j for a, j in zip(spec.body_axes, jitter))
    for extent, name in ((bx, "body x"), (by, "body y"), (bz, "body z")):
        _inside_grid(extent, name)
    body = (x / bx) ** 2 + (y / by) ** 2 + (z / bz) ** 2 <= 1.0
    labels[body] = Tissue.SOFT

    lx, ly, lz = spec.lung_axes
    for side in (-1.0, 1.0):
        offset = side * _uniform(rng, spec.lung_offset_x)
        _inside_grid(abs(offset) + lx, "lung")
        lung = ((x - offset) / lx) ** 2 + (y / ly) ** 2 + ((z + 0.1 * bz) / lz) ** 2 <= 1.0
        labels[lung & body] = Tissue.LUNG

    radius = _uniform(rng, spec.spine_radius)
    spine_y = _uniform(rng, spec.spine_offset_y)
    _inside_grid(spine_y + radius, "spine")
    spine = (x**2 + (y - spine_y) ** 2 <= radius**2) & (np.abs(z) <= 0.9 * bz)
    labels[spine & body] = Tissue.BONE

    n_ribs = int(rng.integers(spec.rib_count[0], spec.rib_count[1] + 1))
    rib_levels = np.linspace(-0.5 * bz, 0.5 * bz, n_ribs) if n_ribs else []
    ring = np.sqrt((x / (0.85 * bx)) ** 2 + (y / (0.85 * by)) ** 2)
    for level in rib_levels:
        arc = (np.abs(ring - 1.0) * 0.85 * min(bx, by) <= spec.rib_thickness / 2) & (
            np.abs(z - level) <= spec.rib_thickness
        ) & (y > -0.3 * by)
        labels[arc & body] = Tissue.BONE

    n_lesions = int(rng.integers(spec.lesion_count[0], spec.lesion_count[1] + 1))
    for _ in range(n_lesions):
        r = _uniform(rng, spec.lesion_radius)
        cx, cy, cz = (rng.uniform(-0.5, 0.5) * a for a in (bx, by, bz))
        lesion = (x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2 <= r**2
        labels[lesion & (labels == Tissue.SOFT)] = Tissue.LESION
    return labels


def _compose(spec: PhantomSpec, rng: np.random.Generator) -> tuple[Volume3D, Volume3D]:
    labels = phantom_labels(spec, rng)
    mu_bone = _uniform(rng, spec.mu_bone)
    mu_table = np.array([0.0, spec.mu_soft, spec.mu_lung, mu_bone, spec.mu_soft])
    activity_table = np.array([0.0, spec.activity_soft, spec.activity_lung,
                               spec.activity_bone, spec.activity_lesion])
    spacing = (spec.spacing_mm,) * 3
    mu = Volume3D(mu_table[labels], spacing, VolumeKind.MU)
    activity = Volume3D(activity_table[labels], spacing, VolumeKind.ACTIVITY)
    # one-voxel FWHM edge softening
    return gaussian_smooth(mu, spec.spacing_mm), gaussian_smooth(activity, spec.spacing_mm)


def generate_phantom(spec: PhantomSpec, index: int = 0) -> tuple[Volume3D, Volume3D]:
    """(μ_gt, λ_gt) of phantom `index`, deterministic from `spec.seed`."""
    return _compose(spec, seeding.substream(spec.seed, seeding.PHANTOM, index))


def degrade(
    mu_gt: Volume3D,
    lam_gt: Volume3D,
    count_fraction: float,
    seed: int,
    cfg: DegradeConfig | None = None,
    index: int = 0,
) -> tuple[Volume3D, Volume3D]:
    """Low-count MLAA surrogate (λ_mlaa, μ_mlaa).

    λ is Poisson-resampled at total_counts * count_fraction, rescaled to its original
    mean and smoothed. μ receives correlated Gaussian noise of amplitude
    mu_noise / sqrt(count_fraction) plus a crosstalk copy of the normalized activity
    structure, then the same smoothing.
    """
    cfg = cfg or DegradeConfig()
    if not (0.0 < count_fraction <= 1.0) or math.isnan(count_fraction):
        raise ContractError(f"count fraction must lie in (0, 1], got {count_fraction}",
                            module="phantom")
    if mu_gt.shape != lam_gt.shape:
        raise ContractError(f"μ {mu_gt.dims} and λ {lam_gt.dims} differ", module="phantom")
    rng = seeding.substream(seed, seeding.DEGRADE, index, int(round(count_fraction * 1e6)))

    lam = lam_gt.data.astype(np.float64)
    if cfg.poisson:
        expected = cfg.total_counts * count_fraction
        scale = expected / max(float(lam.sum()), 1e-12)
        counts = rng.poisson(lam * scale).astype(np.float64)
        mean_counts = counts.mean()
        lam = counts * (lam.mean() / mean_counts) if mean_counts > 0 else lam
    lam_mlaa = gaussian_smooth(lam_gt.with_data(lam), cfg.smoothing_fwhm_mm)

    mu = mu_gt.data.astype(np.float64)
    if cfg.mu_noise > 0:
        sx, sy, sz = mu_gt.spacing
        sigmas = tuple(cfg.noise_correlation_fwhm_mm / (FWHM_TO_SIGMA * s) for s in (sz, sy, sx))
        noise = smooth_array(rng.standard_normal(mu.shape), sigmas)
        noise /= max(float(noise.std()), 1e-12)
        mu = mu + cfg.mu_noise / math.sqrt(count_fraction) * noise
    if cfg.crosstalk > 0:
        structure = normalize_activity(lam_mlaa).data.astype(np.float64)
        mu = mu + cfg.crosstalk * (structure - structure.mean())
    mu_mlaa = gaussian_smooth(mu_gt.with_data(mu), cfg.smoothing_fwhm_mm)
    return lam_mlaa, mu_mlaa


def atlas_id(index: int, n: int) -> str:
    """Zero-padded id; lexicographic order equals index order."""
    return f"{index:0{max(4, len(str(n - 1)))}d}"


def generate_atlas(n: int, spec: PhantomSpec, seed: int | None = None,
                   workers: int = 1) -> AtlasDataset:
    """n normalized ground-truth μ-maps from the `atlas` stream (disjoint from phantoms)."""
    if n < 1:
        raise ContractError(f"atlas size must be >= 1, got {n}", module="phantom")
    seed = spec.seed if seed is None else seed

    def build(i: int) -> tuple[str, Volume3D]:
        mu, _ = _compose(spec, seeding.substream(seed, seeding.ATLAS, i))
        return atlas_id(i, n), normalize_mu(mu)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(build, range(n)))
    else:
        entries = [build(i) for i in range(n)]
    logger.info(f"Generated atlas of {n} entries (seed {seed})")
    return AtlasDataset(entries)


def split_tags(count: int, dataset: DatasetConfig | None = None) -> list[str]:
    """train / val / test tags in case order; test and val sizes are rounded proportions."""
    dataset = dataset or DatasetConfig()
    n_test = round(dataset.test_fraction * count)
    n_val = round(dataset.val_fraction * count)
    n_train = max(count - n_test - n_val, 0)
    tags = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
    return tags[:count]


def fraction_tag(fraction: float) -> str:
    return f"{fraction:g}"


def export_dataset(
    out_dir: str | Path,
    spec: PhantomSpec,
    count: int,
    degrade_cfg: DegradeConfig | None = None,
    dataset: DatasetConfig | None = None,
    workers: int = 1,
) -> list[Path]:
    """Write case folders and one manifest per count fraction; returns the manifest paths.

    Each case folder holds lambda_gt, mu_gt and a lambda_mlaa/mu_mlaa pair per fraction.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tags = split_tags(count, dataset)
    width = max(3, len(str(count - 1)))

    def build(i: int) -> str:
        case_id = f"case{i:0{width}d}"
        folder = out / case_id
        folder.mkdir(exist_ok=True)
        mu_gt, lam_gt = generate_phantom(spec, i)
        write_volume(lam_gt, folder / "lambda_gt.vvol")
        write_volume(mu_gt, folder / "mu_gt.vvol")
        for fraction in spec.count_fractions:
            lam_mlaa, mu_mlaa = degrade(mu_gt, lam_gt, fraction, spec.seed, degrade_cfg, i)
            write_volume(lam_mlaa, folder / f"lambda_mlaa_f{fraction_tag(fraction)}.vvol")
            write_volume(mu_mlaa, folder / f"mu_mlaa_f{fraction_tag(fraction)}.vvol")
        return case_id

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            case_ids = list(pool.map(build, range(count)))
    else:
        case_ids = [build(i) for i in range(count)]

    manifests = []
    for fraction in spec.count_fractions:
        tag = fraction_tag(fraction)
        records = [
            CaseRecord(
                case_id=case_id,
                lambda_path=Path(case_id) / f"lambda_mlaa_f{tag}.vvol",
                mu_mlaa_path=Path(case_id) / f"mu_mlaa_f{tag}.vvol",
                mu_gt_path=Path(case_id) / "mu_gt.vvol",
                split=split,
            )
            for case_id, split in zip(case_ids, tags)
        ]
        path = out / f"manifest_f{tag}.tsv"
        TrainingManifest(records, root=out).save(path)
        manifests.append(path)
    logger.info(f"Wrote {count} cases and {len(manifests)} manifests to {out}")
    return manifests
