"""Population-prior generation: exhaustive atlas matching followed by diffeomorphic demons
registration of the best match onto the query."""

import hashlib
import logging
import math
from collections.abc import Iterable, Iterator
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from pournet.exceptions import ContractError, DegenerateReferenceError, ShapeError
from pournet.models.config import DemonsConfig
from pournet.models.report import PriorReport
from pournet.services import metrics
from pournet.services.volume import (
    Volume3D,
    VolumeKind,
    block_mean,
    normalize_mu,
    resample_array,
    resample_volume,
    write_volume,
)
from pournet.telemetry import PPGM_MATCH, PPGM_REGISTER, get_phase_timer

logger = logging.getLogger(__name__)

_EPS = 1e-9


# ---------------------------------------------------------------------------
# atlas
# ---------------------------------------------------------------------------


class AtlasEntry(NamedTuple):
    id: str
    volume: Volume3D


class AtlasDataset:
    """Reference normalized μ-maps ordered by id; all entries share one grid."""

    def __init__(self, entries: Iterable[tuple[str, Volume3D]]):
        ordered = sorted((AtlasEntry(*e) for e in entries), key=lambda e: e.id)
        ids = [e.id for e in ordered]
        if len(set(ids)) != len(ids):
            raise ContractError("atlas ids must be unique", module="ppgm")
        for entry in ordered:
            if entry.volume.kind != VolumeKind.MU_NORMALIZED:
                raise ContractError(
                    f"atlas entry {entry.id} is {entry.volume.kind.name}, expected MU_NORMALIZED",
                    module="ppgm",
                )
            if entry.volume.shape != ordered[0].volume.shape:
                raise ShapeError(
                    f"atlas entry {entry.id} has dims {entry.volume.dims}, "
                    f"expected {ordered[0].volume.dims}",
                    module="ppgm",
                )
        self.entries: list[AtlasEntry] = ordered

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, index: int) -> AtlasEntry:
        return self.entries[index]

    def __iter__(self) -> Iterator[AtlasEntry]:
        return iter(self.entries)

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    @property
    def shape(self) -> tuple[int, int, int]:
        if not self.entries:
            raise ContractError("atlas is empty", module="ppgm")
        return self.entries[0].volume.shape

    @cached_property
    def fingerprint(self) -> str:
        """SHA-256 over ids, grid and voxel bytes; equal atlases share it."""
        digest = hashlib.sha256()
        for entry in self.entries:
            digest.update(entry.id.encode())
            digest.update(repr((entry.volume.dims, entry.volume.spacing)).encode())
            digest.update(np.ascontiguousarray(entry.volume.data, dtype=np.float32).tobytes())
        return digest.hexdigest()

    @cached_property
    def stacked(self) -> np.ndarray:
        """All entries as one (N, nz, ny, nx) float64 array."""
        return np.stack([e.volume.data for e in self.entries]).astype(np.float64)

    @classmethod
    def from_directory(cls, path: str | Path, cache=None) -> "AtlasDataset":
        """Load every *.vvol file; id = file stem. Raw μ entries are normalized on load."""
        from pournet.dependencies import get_volume_cache

        cache = cache or get_volume_cache()
        files = sorted(Path(path).glob("*.vvol"))
        if not files:
            raise ContractError(f"no .vvol files in atlas directory {path}", module="ppgm")
        entries = []
        for file in files:
            volume = cache.load(file)
            if volume.kind == VolumeKind.MU:
                volume = normalize_mu(volume)
            entries.append((file.stem, volume))
        logger.info(f"Loaded atlas of {len(entries)} entries from {path}")
        return cls(entries)

    def to_directory(self, path: str | Path) -> None:
        out = Path(path)
        out.mkdir(parents=True, exist_ok=True)
        for entry in self.entries:
            write_volume(entry.volume, out / f"{entry.id}.vvol")


class MatchResult(NamedTuple):
    index: int
    mse: float
    id: str


def _presample(data: np.ndarray, presample: int) -> np.ndarray:
    if presample == 1:
        return data
    if all(n % presample == 0 for n in data.shape[-3:]):
        if data.ndim == 3:
            return block_mean(data, presample)
        return np.stack([block_mean(d, presample) for d in data])
    target = tuple(max(1, n // presample) for n in data.shape[-3:])
    if data.ndim == 3:
        return resample_array(data, target)
    return np.stack([resample_array(d, target) for d in data])


def atlas_match(
    x_f: Volume3D, atlas: AtlasDataset, presample: int = 1, workers: int = 1
) -> MatchResult:
    """Index and MSE of the atlas entry closest to `x_f` (exhaustive; ties go to the lower
    index). `x_f` is resampled to the atlas grid when its dims differ."""
    if len(atlas) == 0:
        raise ContractError("atlas is empty", module="ppgm")
    if presample not in (1, 2):
        raise ContractError(f"presample must be 1 or 2, got {presample}", module="ppgm")

    query = np.asarray(x_f.data, dtype=np.float64)
    if query.shape != atlas.shape:
        query = resample_array(query, atlas.shape)
    query = _presample(query, presample)
    candidates = _presample(atlas.stacked, presample)

    def scan(bounds: tuple[int, int]) -> np.ndarray:
        lo, hi = bounds
        diff = candidates[lo:hi] - query
        return np.mean(diff * diff, axis=(1, 2, 3))

    n = len(atlas)
    if workers > 1 and n > 1:
        edges = np.linspace(0, n, min(workers, n) + 1).astype(int)
        chunks = [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            mses = np.concatenate(list(pool.map(scan, chunks)))
    else:
        mses = scan((0, n))

    index = int(np.argmin(mses))
    return MatchResult(index, float(mses[index]), atlas[index].id)


# ---------------------------------------------------------------------------
# deformation fields
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DeformationField:
    """Per-voxel displacement in voxel units.

    `displacement` has shape (3, nz, ny, nx); component 0 moves along z, 1 along y and
    2 along x. The associated transform maps x to x + u(x).
    """

    displacement: np.ndarray

    def __post_init__(self):
        disp = np.array(self.displacement, dtype=np.float64)
        if disp.ndim != 4 or disp.shape[0] != 3:
            raise ShapeError(f"displacement must be (3, nz, ny, nx), got {disp.shape}",
                             module="ppgm")
        if not np.all(np.isfinite(disp)):
            raise ContractError("deformation field contains non-finite values", module="ppgm")
        object.__setattr__(self, "displacement", disp)

    @classmethod
    def zeros(cls, shape: tuple[int, int, int]) -> "DeformationField":
        return cls(np.zeros((3, *shape)))

    @classmethod
    def constant(cls, shape: tuple[int, int, int],
                 shift_zyx: tuple[float, float, float]) -> "DeformationField":
        disp = np.zeros((3, *shape))
        for axis, value in enumerate(shift_zyx):
            disp[axis] = value
        return cls(disp)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.displacement.shape[1:]

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.shape
        return nx, ny, nz

    def magnitude(self) -> np.ndarray:
        return np.sqrt(np.sum(self.displacement**2, axis=0))

    def mean_magnitude(self, mask: np.ndarray | None = None) -> float:
        mag = self.magnitude()
        return float(mag[mask].mean() if mask is not None else mag.mean())

    def jacobian_determinant(self) -> np.ndarray:
        return jacobian_determinant(self)

    def positive_jacobian_fraction(self, margin: int = 1) -> float:
        """Share of interior voxels (excluding a `margin`-voxel border) with det J > 0."""
        det = jacobian_determinant(self)
        inner = tuple(slice(margin, n - margin) for n in det.shape)
        det = det[inner]
        return float(np.mean(det > 0)) if det.size else 1.0


def jacobian_determinant(field: DeformationField) -> np.ndarray:
    """det(I + ∇u) per voxel, central differences."""
    disp = field.displacement
    jac = np.empty((*field.shape, 3, 3))
    for i in range(3):
        grads = np.gradient(disp[i], axis=(0, 1, 2)) if min(field.shape) > 1 else None
        for j in range(3):
            g = grads[j] if grads is not None else np.zeros(field.shape)
            jac[..., i, j] = g + (1.0 if i == j else 0.0)
    return np.linalg.det(jac)


def _grid(shape: tuple[int, ...]) -> np.ndarray:
    return np.stack(np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape),
                                indexing="ij"))


def _warp_array(data: np.ndarray, disp: np.ndarray) -> np.ndarray:
    """data(x + disp(x)), trilinear, edge-clamped."""
    coords = _grid(data.shape) + disp
    return ndimage.map_coordinates(data, coords, order=1, mode="nearest")


def _warp_field(field: np.ndarray, disp: np.ndarray) -> np.ndarray:
    coords = _grid(field.shape[1:]) + disp
    return np.stack([ndimage.map_coordinates(c, coords, order=1, mode="nearest")
                     for c in field])


def warp(moving: Volume3D, field: DeformationField) -> Volume3D:
    """output(x) = moving(x + u(x)); the zero field returns the input exactly."""
    if field.shape != moving.shape:
        raise ShapeError(f"field dims {field.dims} do not match volume dims {moving.dims}",
                         module="ppgm")
    if not field.displacement.any():
        return moving.with_data(moving.data)
    return moving.with_data(_warp_array(moving.data.astype(np.float64), field.displacement))


# ---------------------------------------------------------------------------
# diffeomorphic demons
# ---------------------------------------------------------------------------


def _smooth_field(field: np.ndarray, sigma: float) -> np.ndarray:
    return np.stack([ndimage.gaussian_filter(c, sigma, mode="nearest") for c in field])


def _exponentiate(update: np.ndarray, squarings: int) -> np.ndarray:
    """Scaling and squaring: exp(u) ≈ (id + u / 2^N) composed with itself N times."""
    field = update / (2**squarings)
    for _ in range(squarings):
        field = field + _warp_field(field, field)
    return field


def _mse(a: np.ndarray, b: np.ndarray) -> float:
    diff = a - b
    return float(np.mean(diff * diff))


def _pyramid_shapes(shape: tuple[int, int, int], cfg: DemonsConfig) -> list[tuple[tuple, int]]:
    """(shape, iterations) from coarsest to finest; levels below min_level_size are skipped."""
    levels = []
    for depth, iterations in zip(range(cfg.pyramid_levels - 1, -1, -1), cfg.iterations_per_level):
        level_shape = tuple(max(1, (n - 1) // 2**depth + 1) for n in shape)
        if depth > 0 and min(level_shape) < cfg.min_level_size:
            continue
        levels.append((level_shape, iterations))
    return levels


def _rescale_field(field: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    """Resample a displacement field to `shape` (corner-aligned), scaling voxel units."""
    old = field.shape[1:]
    out = np.empty((3, *shape))
    for axis in range(3):
        factor = (shape[axis] - 1) / (old[axis] - 1) if old[axis] > 1 else 1.0
        out[axis] = resample_array(field[axis], shape) * factor
    return out


def _demons_level(fixed: np.ndarray, moving: np.ndarray, field: np.ndarray, iterations: int,
                  cfg: DemonsConfig, track_best: bool) -> tuple[np.ndarray, float]:
    """Run one pyramid level. Returns the final (or best) field, and with it its MSE."""
    sigma_x2 = cfg.force_normalization_sigma_x**2
    warped = _warp_array(moving, field)
    current = _mse(fixed, warped)
    best_field, best_mse = field, current
    for it in range(iterations):
        diff = fixed - warped
        grads = np.stack(np.gradient(warped))
        denom = np.sum(grads**2, axis=0) + diff**2 / sigma_x2
        safe = denom > _EPS
        update = np.where(safe, diff / np.where(safe, denom, 1.0), 0.0) * grads
        update = _smooth_field(update, cfg.fluid_sigma)

        step = _exponentiate(update, cfg.squaring_steps)
        field = step + _warp_field(field, step)
        field = _smooth_field(field, cfg.diffusion_sigma)

        warped = _warp_array(moving, field)
        previous, current = current, _mse(fixed, warped)
        if current < best_mse:
            best_field, best_mse = field, current
        if previous > 0 and abs(previous - current) / previous < cfg.convergence_tol:
            logger.debug(f"Demons converged after {it + 1} iterations at {fixed.shape}")
            break
        if previous == 0:
            break
    if track_best:
        return best_field, best_mse
    return field, current


def demons_register(
    fixed: Volume3D, moving: Volume3D, cfg: DemonsConfig | None = None
) -> tuple[DeformationField, Volume3D]:
    """Multi-resolution diffeomorphic demons.

    Returns the field mapping `fixed` coordinates into `moving` and the warped moving
    volume. At the finest level the best iterate is kept, starting from the identity, so
    MSE(fixed, warped) never exceeds MSE(fixed, moving).
    """
    cfg = cfg or DemonsConfig()
    if fixed.shape != moving.shape:
        raise ShapeError(f"fixed {fixed.dims} and moving {moving.dims} differ", module="ppgm")
    f = np.asarray(fixed.data, dtype=np.float64)
    m = np.asarray(moving.data, dtype=np.float64)
    if not (np.all(np.isfinite(f)) and np.all(np.isfinite(m))):
        raise ContractError("registration inputs must be finite", module="ppgm")

    levels = _pyramid_shapes(f.shape, cfg)
    field: np.ndarray | None = None
    for number, (shape, iterations) in enumerate(levels):
        finest = number == len(levels) - 1
        if finest:
            f_level, m_level = f, m
        else:
            sigma = 0.5 * (f.shape[0] - 1) / max(shape[0] - 1, 1)
            f_level = resample_array(ndimage.gaussian_filter(f, sigma, mode="nearest"), shape)
            m_level = resample_array(ndimage.gaussian_filter(m, sigma, mode="nearest"), shape)
        field = np.zeros((3, *shape)) if field is None else _rescale_field(field, shape)
        if finest:
            identity_mse = _mse(f, m)
            field, level_mse = _demons_level(f_level, m_level, field, iterations, cfg, True)
            if identity_mse <= level_mse:
                field = np.zeros_like(field)
                level_mse = identity_mse
            logger.debug(f"Demons MSE {identity_mse:.6g} -> {level_mse:.6g}")
        else:
            field, _ = _demons_level(f_level, m_level, field, iterations, cfg, False)

    result = DeformationField(field)
    return result, warp(moving, result)


# ---------------------------------------------------------------------------
# prior generation
# ---------------------------------------------------------------------------


def generate_prior(
    x_f: Volume3D,
    atlas: AtlasDataset,
    cfg: DemonsConfig | None = None,
    ground_truth: Volume3D | None = None,
    presample: int = 1,
    workers: int = 1,
) -> tuple[Volume3D, int, PriorReport]:
    """Match `x_f` against the atlas, register the match onto it and return I_Prior."""
    timer = get_phase_timer()
    with timer.time(PPGM_MATCH):
        match = atlas_match(x_f, atlas, presample=presample, workers=workers)
    matched = atlas[match.index].volume
    if matched.shape != x_f.shape:
        matched = resample_volume(matched, x_f.dims)
    fixed = x_f.with_data(x_f.data, VolumeKind.MU_NORMALIZED)
    matched = Volume3D(matched.data, x_f.spacing, VolumeKind.MU_NORMALIZED)

    with timer.time(PPGM_REGISTER):
        _, prior = demons_register(fixed, matched, cfg)

    report = PriorReport(
        matched_index=match.index,
        matched_id=match.id,
        matched_mse=metrics.rmse(matched, fixed) ** 2,
        registered_mse=metrics.rmse(prior, fixed) ** 2,
        matched_psnr=_safe_psnr(matched, fixed),
        registered_psnr=_safe_psnr(prior, fixed),
    )
    if ground_truth is not None:
        report.gt_matched_psnr = _safe_psnr(matched, ground_truth)
        report.gt_registered_psnr = _safe_psnr(prior, ground_truth)
    logger.info(
        f"Prior from atlas entry {match.id}: MSE {report.matched_mse:.6g} -> "
        f"{report.registered_mse:.6g}"
    )
    return prior, match.index, report


def _safe_psnr(pred: Volume3D, ref: Volume3D) -> float:
    """PSNR, or NaN when the reference is constant."""
    try:
        return metrics.psnr(pred, ref)
    except DegenerateReferenceError:
        return math.nan

