"""Report models emitted by the metric and PPGM operations."""

import math

from pydantic import BaseModel, Field


def _fmt(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:.6f}"


class MetricReport(BaseModel):
    """Image-quality metrics of one predicted volume against its reference."""

    psnr_db: float = Field(description="Peak signal-to-noise ratio in dB; inf when rmse is 0")
    ssim: float = Field(description="Mean structural similarity over inside windows")
    rmse: float = Field(description="Root mean square error in normalized mu units")
    nmse: float | None = Field(default=None, description="Normalized mean square error")
    n_voxels: int = Field(description="Voxels entering rmse/psnr (mask size when masked)")

    def to_row(self, case_id: str) -> str:
        """Tab-separated `case_id, psnr, ssim, rmse` row."""
        return f"{case_id}\t{_fmt(self.psnr_db)}\t{_fmt(self.ssim)}\t{_fmt(self.rmse)}"


class AggregateReport(BaseModel):
    """Mean and sample standard deviation of metric reports over cases."""

    n_cases: int
    psnr_mean: float
    psnr_std: float
    ssim_mean: float
    ssim_std: float
    rmse_mean: float
    rmse_std: float

    def to_row(self) -> str:
        return (
            f"mean±std\t{_fmt(self.psnr_mean)}±{_fmt(self.psnr_std)}"
            f"\t{_fmt(self.ssim_mean)}±{_fmt(self.ssim_std)}"
            f"\t{_fmt(self.rmse_mean)}±{_fmt(self.rmse_std)}"
        )


class PriorReport(BaseModel):
    """Outcome of one population-prior generation (match, then register)."""

    matched_index: int = Field(description="Atlas index selected by the exhaustive scan")
    matched_id: str = Field(description="Atlas identifier of the match")
    matched_mse: float = Field(description="MSE between query and matched entry")
    registered_mse: float = Field(description="MSE between query and registered entry")
    matched_psnr: float = Field(description="PSNR of matched entry against the query")
    registered_psnr: float = Field(description="PSNR of registered entry against the query")
    gt_matched_psnr: float | None = Field(
        default=None, description="PSNR of matched entry against ground truth"
    )
    gt_registered_psnr: float | None = Field(
        default=None, description="PSNR of registered entry against ground truth"
    )

    def to_text(self) -> str:
        """Flat key=value block, one pair per line."""
        lines = []
        for key, value in self.model_dump().items():
            if value is None:
                continue
            text = _fmt(value) if isinstance(value, float) else str(value)
            lines.append(f"{key}={text}")
        return "\n".join(lines)
