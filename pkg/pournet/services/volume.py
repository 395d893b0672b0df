"""Volumetric data container, VVOL1 file I/O, normalization and Gaussian smoothing."""

import logging
import math
import struct
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np
from scipy import ndimage

from pournet.exceptions import (
    ContractError,
    DegenerateInputError,
    PourException,
    ShapeError,
    SizeMismatchError,
    VolumeFormatError,
)

logger = logging.getLogger(__name__)

MAGIC = b"VVOL1"
VERSION = 1
HEADER_SIZE = 32
# magic, version, kind, reserved, nx, ny, nz, sx, sy, sz
_HEADER = struct.Struct("<5sBBB3I3f")

MU_SCALE = 0.15  # skull bone attenuation at 511 keV (cm^-1)
FWHM_TO_SIGMA = 2.3548
TRUNCATE_SIGMAS = 4.0


class VolumeKind(IntEnum):
    """Tag describing what a volume's values mean."""

    ACTIVITY = 0
    MU = 1
    MU_NORMALIZED = 2
    ACTIVITY_NORMALIZED = 3


@dataclass(frozen=True, eq=False)
class Volume3D:
    """Dense scalar 3-D grid.

    `data` is stored as float32 with array axes (z, y, x), so the C-order flattening runs
    x fastest. `dims` and `spacing` are reported in (x, y, z) order. The array is made
    read-only on construction.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (2.0, 2.0, 2.0)
    kind: VolumeKind = VolumeKind.MU

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, copy=True)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ShapeError(f"volume data must be a non-empty 3-D array, got {data.shape}",
                             module="volume")
        if not np.all(np.isfinite(data)):
            raise ContractError("volume contains non-finite values", module="volume")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 and math.isfinite(s) for s in spacing):
            raise ContractError(f"spacing must be 3 positive values, got {spacing}",
                                module="volume")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "kind", VolumeKind(self.kind))

    @property
    def dims(self) -> tuple[int, int, int]:
        """Voxel counts (nx, ny, nz)."""
        nz, ny, nx = self.data.shape
        return nx, ny, nz

    @property
    def shape(self) -> tuple[int, int, int]:
        """Array shape (nz, ny, nx)."""
        return self.data.shape

    def with_data(self, data: np.ndarray, kind: VolumeKind | None = None) -> "Volume3D":
        """New volume sharing this one's spacing (and kind unless overridden)."""
        return Volume3D(data, self.spacing, self.kind if kind is None else kind)


def write_volume(vol: Volume3D, path: str | Path) -> None:
    """Write `vol` in the VVOL1 layout (little-endian, 32-byte header, f32 payload)."""
    nx, ny, nz = vol.dims
    header = _HEADER.pack(MAGIC, VERSION, int(vol.kind), 0, nx, ny, nz, *vol.spacing)
    payload = np.ascontiguousarray(vol.data, dtype="<f4").tobytes()
    try:
        with open(path, "wb") as handle:
            handle.write(header)
            handle.write(payload)
    except OSError as exc:
        raise PourException(f"cannot write {path}: {exc}", module="volume") from exc


def read_volume(path: str | Path) -> Volume3D:
    """Read a VVOL1 file; the header is validated field by field."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise PourException(f"cannot read {path}: {exc}", module="volume") from exc

    if len(raw) < HEADER_SIZE:
        raise VolumeFormatError("header", f"file holds {len(raw)} bytes, need {HEADER_SIZE}")
    magic, version, kind, reserved, nx, ny, nz, sx, sy, sz = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise VolumeFormatError("magic", repr(magic))
    if version != VERSION:
        raise VolumeFormatError("version", str(version))
    if kind not in VolumeKind._value2member_map_:
        raise VolumeFormatError("kind", str(kind))
    if reserved != 0:
        raise VolumeFormatError("reserved", str(reserved))
    for name, extent in (("nx", nx), ("ny", ny), ("nz", nz)):
        if extent < 1:
            raise VolumeFormatError(name, str(extent))
    for name, step in (("sx", sx), ("sy", sy), ("sz", sz)):
        if not (math.isfinite(step) and step > 0):
            raise VolumeFormatError(name, str(step))

    expected = nx * ny * nz
    payload = raw[HEADER_SIZE:]
    if len(payload) != 4 * expected:
        raise SizeMismatchError(expected, len(payload) // 4)
    data = np.frombuffer(payload, dtype="<f4").reshape(nz, ny, nx)
    return Volume3D(data, (sx, sy, sz), VolumeKind(kind))


def normalize_activity(vol: Volume3D, sigma_scale: float = 10.0) -> Volume3D:
    """tanh(v / mean(v) / sigma_scale); output lies in (-1, 1)."""
    if vol.kind != VolumeKind.ACTIVITY:
        raise ContractError(f"expected an activity volume, got {vol.kind.name}", module="volume")
    if sigma_scale <= 0:
        raise ContractError("sigma_scale must be positive", module="volume")
    mean = float(np.mean(vol.data, dtype=np.float64))
    if mean <= 0:
        raise DegenerateInputError(
            f"activity mean must be positive, got {mean}", module="volume"
        )
    normalized = np.tanh(vol.data.astype(np.float64) / mean / sigma_scale)
    return vol.with_data(normalized, VolumeKind.ACTIVITY_NORMALIZED)


def normalize_mu(vol: Volume3D) -> Volume3D:
    """Divide by the 0.15 cm^-1 bone coefficient. Negative values pass through."""
    if vol.kind != VolumeKind.MU:
        raise ContractError(f"expected a mu volume, got {vol.kind.name}", module="volume")
    return vol.with_data(vol.data.astype(np.float64) / MU_SCALE, VolumeKind.MU_NORMALIZED)


def denormalize_mu(vol: Volume3D) -> Volume3D:
    """Inverse of normalize_mu."""
    if vol.kind != VolumeKind.MU_NORMALIZED:
        raise ContractError(
            f"expected a normalized mu volume, got {vol.kind.name}", module="volume"
        )
    return vol.with_data(vol.data.astype(np.float64) * MU_SCALE, VolumeKind.MU)


def gaussian_kernel(sigma_voxels: float) -> np.ndarray:
    """Normalized 1-D Gaussian truncated at 4 sigma."""
    radius = max(1, int(math.ceil(TRUNCATE_SIGMAS * sigma_voxels)))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (offsets / sigma_voxels) ** 2)
    return kernel / kernel.sum()


def smooth_array(data: np.ndarray, sigmas: tuple[float, float, float]) -> np.ndarray:
    """Separable Gaussian in array axes order, half-sample symmetric edges.

    With a symmetric kernel the reflected operator is a symmetric matrix whose rows sum
    to one, so constants and the total sum are both preserved.
    """
    out = np.asarray(data, dtype=np.float64)
    for axis, sigma in enumerate(sigmas):
        if sigma <= 0:
            continue
        out = ndimage.correlate1d(out, gaussian_kernel(sigma), axis=axis, mode="reflect")
    return out


def gaussian_smooth(vol: Volume3D, fwhm_mm: float) -> Volume3D:
    """Separable Gaussian smoothing with sigma = fwhm / (2.3548 * spacing) per axis."""
    if fwhm_mm <= 0:
        raise ContractError(f"fwhm_mm must be positive, got {fwhm_mm}", module="volume")
    sx, sy, sz = vol.spacing
    sigmas = tuple(fwhm_mm / (FWHM_TO_SIGMA * s) for s in (sz, sy, sx))
    return vol.with_data(smooth_array(vol.data, sigmas))


def resample_array(data: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    """Trilinear resize to `shape` with corner voxels aligned."""
    data = np.asarray(data, dtype=np.float64)
    if tuple(data.shape) == tuple(shape):
        return data
    axes = [
        np.linspace(0.0, n_in - 1, n_out) if n_out > 1 else np.zeros(1)
        for n_in, n_out in zip(data.shape, shape)
    ]
    coords = np.meshgrid(*axes, indexing="ij")
    return ndimage.map_coordinates(data, coords, order=1, mode="nearest")


def resample_volume(vol: Volume3D, dims: tuple[int, int, int]) -> Volume3D:
    """Resize to `dims` = (nx, ny, nz), keeping the physical field of view."""
    nx, ny, nz = dims
    old_nx, old_ny, old_nz = vol.dims
    spacing = tuple(
        s * (old - 1) / (new - 1) if new > 1 and old > 1 else s
        for s, old, new in zip(vol.spacing, (old_nx, old_ny, old_nz), (nx, ny, nz))
    )
    return Volume3D(resample_array(vol.data, (nz, ny, nx)), spacing, vol.kind)


def block_mean(data: np.ndarray, factor: int) -> np.ndarray:
    """Average over factor³ blocks; extents must be divisible by `factor`."""
    nz, ny, nx = data.shape
    if nz % factor or ny % factor or nx % factor:
        raise ShapeError(f"shape {data.shape} not divisible by {factor}", module="volume")
    blocks = np.asarray(data, dtype=np.float64).reshape(
        nz // factor, factor, ny // factor, factor, nx // factor, factor
    )
    return blocks.mean(axis=(1, 3, 5))
