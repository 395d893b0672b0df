"""Volumetric image-quality metrics: RMSE, PSNR, SSIM and NMSE."""

import logging
import math
from collections.abc import Sequence

import numpy as np
from scipy import ndimage

from pournet.exceptions import ContractError, DegenerateReferenceError, ShapeError
from pournet.models.config import MetricOptions
from pournet.models.report import AggregateReport, MetricReport
from pournet.services.volume import Volume3D

logger = logging.getLogger(__name__)

ArrayLike = Volume3D | np.ndarray


def _values(x: ArrayLike) -> np.ndarray:
    data = x.data if isinstance(x, Volume3D) else x
    return np.asarray(data, dtype=np.float64)


def _pair(pred: ArrayLike, ref: ArrayLike) -> tuple[np.ndarray, np.ndarray]:
    p, r = _values(pred), _values(ref)
    if p.shape != r.shape:
        raise ShapeError(f"pred {p.shape} and ref {r.shape} differ", module="metrics")
    if p.size == 0:
        raise ContractError("cannot evaluate empty volumes", module="metrics")
    return p, r


def _span(r: np.ndarray) -> float:
    """max - min of the reference; the default PSNR peak and SSIM L."""
    return float(r.max() - r.min())


def rmse(pred: ArrayLike, ref: ArrayLike) -> float:
    """sqrt(mean((pred - ref)^2)), accumulated in 64 bits. Symmetric."""
    p, r = _pair(pred, ref)
    return float(np.sqrt(np.mean((p - r) ** 2)))


def psnr(pred: ArrayLike, ref: ArrayLike, peak: float | None = None) -> float:
    """20 log10(range(ref) / rmse) in dB; `math.inf` when pred equals ref.

    The peak is taken from `ref`, so psnr(a, b) != psnr(b, a) in general.
    """
    p, r = _pair(pred, ref)
    peak = _span(r) if peak is None else float(peak)
    if peak <= 0:
        raise DegenerateReferenceError("reference has zero data range")
    error = float(np.sqrt(np.mean((p - r) ** 2)))
    if error == 0.0:
        return math.inf
    return 20.0 * math.log10(peak / error)


def nmse(pred: ArrayLike, ref: ArrayLike) -> float:
    """sum((pred - ref)^2) / sum(ref^2)."""
    p, r = _pair(pred, ref)
    energy = float(np.sum(r**2))
    if energy == 0.0:
        raise DegenerateReferenceError("reference has zero energy")
    return float(np.sum((p - r) ** 2)) / energy


def ssim(
    pred: ArrayLike,
    ref: ArrayLike,
    window: int = 7,
    k1: float = 0.01,
    k2: float = 0.03,
    data_range: float | None = None,
) -> float:
    """Mean SSIM over every fully-inside cubic window with uniform weights.

    L defaults to the data range of `ref`; pass `data_range` explicitly for constant
    references.
    """
    p, r = _pair(pred, ref)
    if p.ndim != 3:
        raise ShapeError(f"ssim expects 3-D volumes, got {p.shape}", module="metrics")
    if window < 1 or window % 2 == 0:
        raise ContractError(f"window must be a positive odd extent, got {window}",
                            module="metrics")
    if min(p.shape) < window:
        raise ContractError(f"volume {p.shape} is smaller than the {window}^3 window",
                            module="metrics")
    L = _span(r) if data_range is None else float(data_range)
    if L <= 0:
        raise DegenerateReferenceError("reference has zero data range")
    c1 = (k1 * L) ** 2
    c2 = (k2 * L) ** 2

    half = window // 2
    inside = tuple(slice(half, n - half) for n in p.shape)

    def local_mean(a: np.ndarray) -> np.ndarray:
        return ndimage.uniform_filter(a, size=window, mode="constant")[inside]

    mu_p = local_mean(p)
    mu_r = local_mean(r)
    var_p = local_mean(p * p) - mu_p * mu_p
    var_r = local_mean(r * r) - mu_r * mu_r
    cov = local_mean(p * r) - mu_p * mu_r

    num = (2 * mu_p * mu_r + c1) * (2 * cov + c2)
    den = (mu_p * mu_p + mu_r * mu_r + c1) * (var_p + var_r + c2)
    return float(np.mean(num / den))


def body_mask(ref: ArrayLike, threshold: float) -> np.ndarray:
    """Boolean mask of voxels whose reference value exceeds `threshold`."""
    mask = _values(ref) > threshold
    if not mask.any():
        raise DegenerateReferenceError(f"no reference voxel exceeds {threshold}")
    return mask


def evaluate_case(
    pred: ArrayLike,
    ref: ArrayLike,
    mask: np.ndarray | None = None,
    options: MetricOptions | None = None,
) -> MetricReport:
    """All metrics of one case. A mask restricts rmse/psnr/nmse; ssim stays whole-volume."""
    options = options or MetricOptions()
    p, r = _pair(pred, ref)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != p.shape:
            raise ShapeError(f"mask {mask.shape} does not match volume {p.shape}",
                             module="metrics")
        p_sel, r_sel = p[mask], r[mask]
    else:
        p_sel, r_sel = p, r

    energy = float(np.sum(r_sel**2))
    return MetricReport(
        psnr_db=psnr(p_sel, r_sel),
        ssim=ssim(p, r, window=options.ssim_window, k1=options.k1, k2=options.k2),
        rmse=rmse(p_sel, r_sel),
        nmse=nmse(p_sel, r_sel) if energy > 0 else None,
        n_voxels=int(p_sel.size),
    )


def summarize(reports: Sequence[MetricReport]) -> AggregateReport:
    """Mean and sample standard deviation (ddof=1; 0 for a single case).

    A perfect case has PSNR +inf: the mean is then inf and the std covers the finite
    cases only (0 when fewer than two remain).
    """
    if not reports:
        raise ContractError("no reports to summarize", module="metrics")

    def stats(values: list[float]) -> tuple[float, float]:
        arr = np.asarray(values, dtype=np.float64)
        finite = arr[np.isfinite(arr)]
        std = float(np.std(finite, ddof=1)) if finite.size > 1 else 0.0
        mean = float(np.mean(finite)) if finite.size == arr.size else math.inf
        return mean, std

    psnr_mean, psnr_std = stats([r.psnr_db for r in reports])
    ssim_mean, ssim_std = stats([r.ssim for r in reports])
    rmse_mean, rmse_std = stats([r.rmse for r in reports])
    return AggregateReport(
        n_cases=len(reports),
        psnr_mean=psnr_mean,
        psnr_std=psnr_std,
        ssim_mean=ssim_mean,
        ssim_std=ssim_std,
        rmse_mean=rmse_mean,
        rmse_std=rmse_std,
    )


def format_table(rows: Sequence[tuple[str, MetricReport]]) -> str:
    """Per-case rows followed by the mean±std row, tab-separated."""
    lines = [report.to_row(case_id) for case_id, report in rows]
    lines.append(summarize([report for _, report in rows]).to_row())
    return "\n".join(lines)
