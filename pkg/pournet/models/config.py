"""Pydantic models for experiment configuration and the flat key=value config format."""

from pathlib import Path
from typing import Any

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from pournet.exceptions import ConfigError


class _Section(BaseModel):
    """Base for configuration sections: unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid")


class OurNetConfig(_Section):
    """Architecture hyperparameters of one OUR-Net stage."""

    in_channels: int = Field(default=2, ge=1, description="2 for cascade 1, 3 afterwards")
    levels: int = Field(default=3, ge=3, le=3, description="Resolution levels per branch")
    base_channels: int = Field(default=8, ge=1, description="Feature width C")
    unnet_channel_schedule: tuple[int, int, int] | None = Field(
        default=None, description="UnNet widths per level, default (C, 2C, 4C)"
    )
    ovnet_channel_schedule: tuple[int, int, int] | None = Field(
        default=None, description="OvNet widths per level, default (C, C, C)"
    )
    frb_rseb_count: int = Field(default=4, ge=1, description="RSEBs per restoration block")
    se_reduction: int = Field(default=2, ge=1, description="Squeeze-excitation reduction")
    enable_unnet: bool = True
    enable_ovnet: bool = True

    @model_validator(mode="after")
    def _fill_schedules(self) -> "OurNetConfig":
        c = self.base_channels
        if self.unnet_channel_schedule is None:
            self.unnet_channel_schedule = (c, 2 * c, 4 * c)
        if self.ovnet_channel_schedule is None:
            self.ovnet_channel_schedule = (c, c, c)
        widths = (c, *self.unnet_channel_schedule, *self.ovnet_channel_schedule)
        if min(widths) < 1:
            raise ValueError("channel schedules must be positive")
        return self

    def variant(self) -> str:
        """Name of the branch configuration (ablation row)."""
        if self.enable_unnet and self.enable_ovnet:
            return "full"
        if self.enable_unnet:
            return "funet+u"
        if self.enable_ovnet:
            return "funet+o"
        return "funet"


class TrainingConfig(_Section):
    """Optimizer and patch-sampling settings for one training session."""

    steps: int = Field(default=2000, ge=1)
    lr: float = Field(default=1e-4, gt=0)
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = Field(default=1e-8, gt=0)
    batch_size: int = Field(default=4, ge=1)
    patches_per_volume: int = Field(default=32, ge=1)
    patch_size: int = Field(default=16, ge=4)
    log_interval: int = Field(default=50, ge=1)
    early_stopping_patience: int | None = Field(
        default=None, ge=1, description="Validation checks without improvement; off by default"
    )
    stop_loss_ratio: float | None = Field(
        default=None, gt=0, lt=1, description="Stop once loss < ratio * first-step loss"
    )
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check(self) -> "TrainingConfig":
        if self.patch_size % 4:
            raise ValueError(f"patch_size must be divisible by 4, got {self.patch_size}")
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError("betas must lie in [0, 1)")
        return self


class DemonsConfig(_Section):
    """Diffeomorphic demons registration settings."""

    pyramid_levels: int = Field(default=3, ge=1)
    iterations_per_level: tuple[int, ...] = Field(
        default=(60, 40, 20), description="Coarsest level first"
    )
    fluid_sigma: float = Field(default=1.0, gt=0, description="Update smoothing (voxels)")
    diffusion_sigma: float = Field(default=1.5, gt=0, description="Field smoothing (voxels)")
    force_normalization_sigma_x: float = Field(default=1.0, gt=0)
    convergence_tol: float = Field(default=1e-5, ge=0, description="Relative MSE change")
    squaring_steps: int = Field(default=4, ge=0)
    min_level_size: int = Field(default=8, ge=2, description="Skip coarser levels below this")

    @model_validator(mode="after")
    def _check(self) -> "DemonsConfig":
        if len(self.iterations_per_level) != self.pyramid_levels:
            raise ValueError("iterations_per_level needs one entry per pyramid level")
        if min(self.iterations_per_level) < 1:
            raise ValueError("iterations must be positive")
        return self


class AtlasConfig(_Section):
    """Population atlas size and matching resolution."""

    size: int = Field(default=64, ge=1)
    presample: int = Field(
        default=1, ge=1, le=2, description="Match at native (1) or half (2) resolution"
    )


class PhantomSpec(_Section):
    """Anatomical distribution of the synthetic torso phantoms.

    Geometry is given in normalized grid coordinates ([-1, 1] per axis); every range is
    (low, high) and is sampled uniformly per phantom.
    """

    size: int = Field(default=32, ge=8)
    spacing_mm: float = Field(default=2.0, gt=0)
    body_axes: tuple[float, float, float] = (0.78, 0.56, 0.86)
    body_jitter: float = Field(default=0.06, ge=0)
    lung_axes: tuple[float, float, float] = (0.19, 0.26, 0.40)
    lung_offset_x: tuple[float, float] = (0.28, 0.36)
    spine_radius: tuple[float, float] = (0.07, 0.10)
    spine_offset_y: tuple[float, float] = (0.30, 0.38)
    rib_count: tuple[int, int] = (2, 4)
    rib_thickness: float = Field(default=0.06, gt=0)
    lesion_count: tuple[int, int] = (0, 2)
    lesion_radius: tuple[float, float] = (0.05, 0.09)
    mu_soft: float = 0.096
    mu_lung: float = 0.03
    mu_bone: tuple[float, float] = (0.13, 0.15)
    activity_soft: float = Field(default=1.0, gt=0)
    activity_lung: float = Field(default=0.25, ge=0)
    activity_bone: float = Field(default=0.5, ge=0)
    activity_lesion: float = Field(default=6.0, gt=0)
    count_fractions: tuple[float, ...] = (0.10, 0.025)
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check(self) -> "PhantomSpec":
        if self.size % 4:
            raise ValueError(f"size must be divisible by 4, got {self.size}")
        mus = (self.mu_soft, self.mu_lung, *self.mu_bone)
        if not all(0.0 <= m <= 0.15 for m in mus):
            raise ValueError("tissue mu values must lie in [0, 0.15]")
        for name in ("lung_offset_x", "spine_radius", "spine_offset_y", "rib_count",
                     "lesion_count", "lesion_radius", "mu_bone"):
            low, high = getattr(self, name)
            if low > high:
                raise ValueError(f"{name}: low {low} exceeds high {high}")
        if not all(0.0 < f <= 1.0 for f in self.count_fractions):
            raise ValueError("count fractions must lie in (0, 1]")
        return self


class DegradeConfig(_Section):
    """Low-count MLAA surrogate model."""

    total_counts: float = Field(default=2.0e6, gt=0, description="Expected counts at full dose")
    poisson: bool = True
    mu_noise: float = Field(default=0.01, ge=0, description="Noise amplitude a (cm^-1)")
    crosstalk: float = Field(default=0.005, ge=0, description="Crosstalk amplitude c (cm^-1)")
    noise_correlation_fwhm_mm: float = Field(default=6.0, gt=0)
    smoothing_fwhm_mm: float = Field(default=5.0, gt=0)


class DatasetConfig(_Section):
    """Case count and split proportions of a generated dataset."""

    count: int = Field(default=18, ge=1)
    val_fraction: float = Field(default=0.1, ge=0, lt=1)
    test_fraction: float = Field(default=0.2, ge=0, lt=1)


class MetricOptions(_Section):
    """Image-quality metric options."""

    ssim_window: int = Field(default=7, ge=1)
    k1: float = Field(default=0.01, gt=0)
    k2: float = Field(default=0.03, gt=0)
    mask_threshold: float | None = Field(
        default=None, description="Normalized-mu threshold of the body mask; None = whole volume"
    )

    @model_validator(mode="after")
    def _check(self) -> "MetricOptions":
        if self.ssim_window % 2 == 0:
            raise ValueError("ssim_window must be odd")
        return self


class CascadeConfig(_Section):
    """Everything one cascade run needs: per-stage network, training, PPGM."""

    n_cascades: int = Field(default=2, ge=1)
    ournet: OurNetConfig = Field(default_factory=OurNetConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    demons: DemonsConfig = Field(default_factory=DemonsConfig)
    atlas: AtlasConfig = Field(default_factory=AtlasConfig)
    infer_patch_size: int | None = Field(default=None, ge=4)
    infer_patch_stride: int | None = Field(default=None, ge=1)
    seed: int = Field(default=0, ge=0)

    def stage_config(self, stage: int) -> OurNetConfig:
        """Network configuration of stage `stage` (1-based): 2 input channels, then 3."""
        if stage < 1:
            raise ValueError(f"stages are 1-based, got {stage}")
        return self.ournet.model_copy(update={"in_channels": 2 if stage == 1 else 3})


# Keys filled from the top-level seed; they are not part of the flat schema
_DERIVED_KEYS = frozenset({"phantom.seed", "cascade.seed", "cascade.training.seed"})


class RunConfig(_Section):
    """Top-level experiment configuration; one seed feeds every named sub-stream."""

    seed: int = Field(default=0, ge=0)
    phantom: PhantomSpec = Field(default_factory=PhantomSpec)
    degrade: DegradeConfig = Field(default_factory=DegradeConfig)
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    cascade: CascadeConfig = Field(default_factory=CascadeConfig)
    metrics: MetricOptions = Field(default_factory=MetricOptions)

    @model_validator(mode="after")
    def _propagate_seed(self) -> "RunConfig":
        self.phantom.seed = self.seed
        self.cascade.seed = self.seed
        self.cascade.training.seed = self.seed
        return self

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        """Parse flat `section.field = value` lines; `#` starts a comment."""
        nested: dict[str, Any] = {}
        known = set(schema_keys())
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got '{raw.strip()}'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"line {lineno}: unknown key '{key}'")
            _assign(nested, key.split("."), _parse_value(value))
        try:
            return cls.model_validate(nested)
        except ValidationError as exc:
            raise ConfigError(format_validation_error(exc)) from exc

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text)

    def to_text(self) -> str:
        """Render as flat key=value lines (the `config --dump-defaults` format)."""
        lines = []
        for key, value in _flatten(self.model_dump(mode="python")):
            if key not in _DERIVED_KEYS:
                lines.append(f"{key} = {_format_value(value)}")
        return "\n".join(lines) + "\n"


def schema_keys() -> list[str]:
    """Every accepted flat key, in schema order."""
    return [key for key, _ in _flatten(RunConfig().model_dump()) if key not in _DERIVED_KEYS]


def _flatten(tree: dict[str, Any], prefix: str = "") -> list[tuple[str, Any]]:
    items = []
    for key, value in tree.items():
        full = f"{prefix}{key}"
        if isinstance(value, dict):
            items.extend(_flatten(value, f"{full}."))
        else:
            items.append((full, value))
    return items


def _assign(tree: dict[str, Any], parts: list[str], value: Any) -> None:
    for part in parts[:-1]:
        tree = tree.setdefault(part, {})
    tree[parts[-1]] = value


def _parse_value(value: str) -> Any:
    if value.lower() in ("none", "null", ""):
        return None
    if "," in value:
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


def _format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        # trailing comma keeps one-element tuples parseable as sequences
        body = ", ".join(_format_value(v) for v in value)
        return body if len(value) > 1 else f"{body},"
    return repr(value) if isinstance(value, float) else str(value)


def format_validation_error(exc: ValidationError) -> str:
    first = exc.errors()[0]
    location = ".".join(str(part) for part in first["loc"]) or "config"
    return f"invalid value for '{location}': {first['msg']}"
