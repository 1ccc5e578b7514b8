"""Volume geometry and intensity preprocessing.

The canonical network grid is 256^3 voxels at 1 mm isotropic spacing, RAS
axis orientation, centred on the field of view of the native image.  The
helpers here move data between native and canonical grids, normalise
intensities, and crop to / embed from a head bounding box.

Arrays are indexed ``data[x, y, z]``; world coordinates are obtained with
``affine @ [x, y, z, 1]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from .errors import (
    BBoxOutOfRange,
    DegenerateIntensity,
    EmptyForeground,
    ShapeMismatch,
    SingularAffine,
    VolumeError,
)

CONFORMED_SHAPE = (256, 256, 256)

BBox = Tuple[Tuple[int, int], Tuple[int, int], Tuple[int, int]]


def _spacing_from_affine(affine):
    return tuple(float(s) for s in np.sqrt((np.asarray(affine)[:3, :3] ** 2).sum(axis=0)))


@dataclass
class Volume:
    """A 3D scalar grid with a voxel-to-world affine (mm)."""

    data: np.ndarray
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))
    spacing: Optional[Tuple[float, float, float]] = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise VolumeError(f"expected a 3D grid, got shape {self.data.shape}")
        if self.data.dtype != np.float32:
            self.data = self.data.astype(np.float32)
        self.affine = np.array(self.affine, dtype=np.float64)
        if self.affine.shape != (4, 4):
            raise VolumeError("affine must be 4x4")
        if not np.array_equal(self.affine[3], [0.0, 0.0, 0.0, 1.0]):
            raise VolumeError("affine last row must be [0, 0, 0, 1]")
        if self.spacing is None:
            self.spacing = _spacing_from_affine(self.affine)
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise VolumeError(f"spacing entries must be positive, got {self.spacing}")

    @property
    def shape(self):
        return self.data.shape

    def same_grid(self, other) -> bool:
        return self.shape == other.shape and np.array_equal(self.affine, other.affine)


@dataclass
class Mask(Volume):
    """Binary volume; ``data`` holds uint8 values in {0, 1}."""

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype == bool:
            data = data.astype(np.uint8)
        elif not np.isin(data, (0, 1)).all():
            raise VolumeError("mask voxels must be 0 or 1")
        self.data = data.astype(np.uint8, copy=False)
        if self.data.ndim != 3:
            raise VolumeError(f"expected a 3D grid, got shape {self.data.shape}")
        self.affine = np.array(self.affine, dtype=np.float64)
        if self.spacing is None:
            self.spacing = _spacing_from_affine(self.affine)
        self.spacing = tuple(float(s) for s in self.spacing)


@dataclass(frozen=True)
class NormalizationSpec:
    lo_percentile: float = 2.0
    hi_percentile: float = 98.0
    nonzero_only: bool = False

    def __post_init__(self):
        if not (0 <= self.lo_percentile < self.hi_percentile <= 100):
            raise ValueError("need 0 <= lo < hi <= 100")


@dataclass
class ConformTransform:
    """Everything needed to take conformed-grid results back to native space."""

    native_shape: Tuple[int, int, int]
    native_affine: np.ndarray
    conformed_shape: Tuple[int, int, int]
    conformed_affine: np.ndarray
    crop_bbox: Optional[BBox] = None

    def native_to_conformed_vox(self, ijk):
        """Map native voxel indices (N, 3) to conformed voxel coordinates."""
        m = np.linalg.inv(self.conformed_affine) @ self.native_affine
        ijk = np.asarray(ijk, dtype=np.float64)
        return ijk @ m[:3, :3].T + m[:3, 3]

    def conformed_to_native_vox(self, ijk):
        m = np.linalg.inv(self.native_affine) @ self.conformed_affine
        ijk = np.asarray(ijk, dtype=np.float64)
        return ijk @ m[:3, :3].T + m[:3, 3]


def _check_invertible(affine):
    a = np.asarray(affine, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise SingularAffine("affine contains non-finite entries")
    lin = a[:3, :3]
    if abs(np.linalg.det(lin)) < 1e-12 * max(1.0, np.abs(lin).max() ** 3):
        raise SingularAffine("affine is not invertible")


def conformed_affine_for(volume: Volume, shape=CONFORMED_SHAPE) -> np.ndarray:
    """RAS, 1 mm affine of a ``shape`` grid centred on ``volume``'s field of view."""
    centre_vox = (np.asarray(volume.shape, dtype=np.float64) - 1) / 2
    centre_world = volume.affine[:3, :3] @ centre_vox + volume.affine[:3, 3]
    out = np.eye(4)
    out[:3, 3] = centre_world - (np.asarray(shape, dtype=np.float64) - 1) / 2
    return out


def _snap(a, tol=1e-9):
    r = np.round(a)
    return np.where(np.abs(a - r) < tol, r, a)


def _resample(data, src_affine, dst_affine, dst_shape, order, cval=0.0):
    # voxel map dst -> src, evaluated without materialising coordinate grids
    m = _snap(np.linalg.inv(src_affine) @ dst_affine)
    return ndimage.affine_transform(
        data, m[:3, :3], offset=m[:3, 3], output_shape=tuple(dst_shape),
        order=order, mode="constant", cval=cval, prefilter=False,
    )


def conform(volume: Volume, shape=CONFORMED_SHAPE) -> Tuple[Volume, ConformTransform]:
    """Resample onto the canonical RAS grid with trilinear interpolation.

    Voxels whose centres fall outside the native field of view are set to 0.
    """
    _check_invertible(volume.affine)
    dst_affine = conformed_affine_for(volume, shape)
    data = _resample(volume.data, volume.affine, dst_affine, shape, order=1)
    transform = ConformTransform(
        native_shape=tuple(volume.shape),
        native_affine=volume.affine.copy(),
        conformed_shape=tuple(shape),
        conformed_affine=dst_affine,
    )
    return Volume(data.astype(np.float32, copy=False), dst_affine, (1.0, 1.0, 1.0)), transform


def percentiles(volume: Volume, spec: NormalizationSpec = NormalizationSpec()):
    values = volume.data
    if spec.nonzero_only:
        values = values[values != 0]
        if values.size == 0:
            raise DegenerateIntensity("volume has no nonzero voxels")
    lo, hi = np.percentile(values, [spec.lo_percentile, spec.hi_percentile], method="linear")
    return float(lo), float(hi)


def normalize_percentile(volume: Volume, spec: NormalizationSpec = NormalizationSpec()) -> Volume:
    """Map the [lo, hi] percentile range to [0, 1], clamping outside it."""
    lo, hi = percentiles(volume, spec)
    if not hi > lo:
        raise DegenerateIntensity(f"percentiles coincide ({lo} == {hi})")
    out = (volume.data.astype(np.float64) - lo) / (hi - lo)
    np.clip(out, 0.0, 1.0, out=out)
    return Volume(out.astype(np.float32), volume.affine, volume.spacing)


def compute_crop_bbox(volume_norm: Volume, threshold: float = 0.05, margin: int = 8) -> BBox:
    """Tight bounds of voxels above ``threshold``, padded by ``margin`` voxels.

    Bounds are half-open ``(lo, hi)`` per axis and clamped to the grid.
    """
    fg = volume_norm.data > threshold
    if not fg.any():
        raise EmptyForeground(f"no voxel exceeds {threshold}")
    bbox = []
    for axis, n in enumerate(fg.shape):
        other = tuple(a for a in range(3) if a != axis)
        idx = np.flatnonzero(fg.any(axis=other))
        bbox.append((max(0, int(idx[0]) - margin), min(n, int(idx[-1]) + 1 + margin)))
    return tuple(bbox)


def _check_bbox(bbox, shape):
    if len(bbox) != 3:
        raise BBoxOutOfRange("bbox needs three axes")
    for (lo, hi), n in zip(bbox, shape):
        if not (0 <= lo < hi <= n):
            raise BBoxOutOfRange(f"bbox {bbox} does not fit grid {tuple(shape)}")


def _bbox_affine(affine, bbox):
    shift = np.eye(4)
    shift[:3, 3] = [lo for lo, _ in bbox]
    return affine @ shift


def crop(volume: Volume, bbox: BBox) -> Volume:
    _check_bbox(bbox, volume.shape)
    sl = tuple(slice(lo, hi) for lo, hi in bbox)
    return type(volume)(np.ascontiguousarray(volume.data[sl]), _bbox_affine(volume.affine, bbox),
                        volume.spacing)


def embed(mask: Mask, bbox: BBox, full_shape, full_affine=None) -> Mask:
    """Place a cropped mask back at its original coordinates, zero elsewhere."""
    _check_bbox(bbox, full_shape)
    expected = tuple(hi - lo for lo, hi in bbox)
    if tuple(mask.shape) != expected:
        raise ShapeMismatch(f"mask shape {mask.shape} != bbox extent {expected}")
    out = np.zeros(tuple(full_shape), dtype=np.uint8)
    out[tuple(slice(lo, hi) for lo, hi in bbox)] = mask.data
    if full_affine is None:
        full_affine = _bbox_affine(mask.affine, tuple((-lo, 0) for lo, _ in bbox))
    return Mask(out, full_affine, mask.spacing)


def mask_to_native(mask_conformed: Mask, transform: ConformTransform) -> Mask:
    """Nearest-neighbour resample of a conformed-grid mask onto the native grid."""
    if tuple(mask_conformed.shape) != tuple(transform.conformed_shape):
        raise ShapeMismatch(
            f"mask grid {mask_conformed.shape} != conformed grid {transform.conformed_shape}")
    data = _resample(mask_conformed.data, transform.conformed_affine, transform.native_affine,
                     transform.native_shape, order=0)
    return Mask(data, transform.native_affine.copy())


def apply_mask(volume_native: Volume, mask_native: Mask) -> Volume:
    if tuple(volume_native.shape) != tuple(mask_native.shape):
        raise ShapeMismatch(f"volume {volume_native.shape} vs mask {mask_native.shape}")
    return Volume(volume_native.data * mask_native.data, volume_native.affine, volume_native.spacing)
