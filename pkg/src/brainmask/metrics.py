"""Overlap and boundary agreement between predicted and reference masks.

Mean surface distance is symmetric: the average of the two directed means,
where surfaces are mask voxels with at least one 6-neighbour outside the
mask (the grid border counts as outside) and distances are exact Euclidean
distances in mm.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import EmptyMask, ShapeMismatch

MSD_NOTE = "msd_mm: symmetric mean of directed mean distances between 6-connected surface voxels"


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class MetricReport:
    dice: float
    precision: float
    recall: float
    msd: float


def _as_bool(m):
    return np.asarray(getattr(m, "data", m)).astype(bool)


def _pair(pred, gt):
    p, g = _as_bool(pred), _as_bool(gt)
    if p.shape != g.shape:
        raise ShapeMismatch(f"prediction {p.shape} vs reference {g.shape}")
    return p, g


def confusion(pred, gt) -> Confusion:
    p, g = _pair(pred, gt)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return Confusion(tp, fp, fn, p.size - tp - fp - fn)


def _ratio(num, den, both_empty):
    if den == 0:
        return 1.0 if both_empty else 0.0
    return num / den


def dice(pred, gt) -> float:
    c = confusion(pred, gt)
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, c.tp + c.fp + c.fn == 0)


def precision(pred, gt) -> float:
    c = confusion(pred, gt)
    return _ratio(c.tp, c.tp + c.fp, c.tp + c.fp + c.fn == 0)


def recall(pred, gt) -> float:
    c = confusion(pred, gt)
    return _ratio(c.tp, c.tp + c.fn, c.tp + c.fp + c.fn == 0)


_SIX = ndimage.generate_binary_structure(3, 1)


def surface(mask) -> np.ndarray:
    m = _as_bool(mask)
    if m.ndim != 3:
        raise ShapeMismatch("surface extraction needs a 3D mask")
    return m & ~ndimage.binary_erosion(m, structure=_SIX, border_value=0)


def directed_surface_distances(src_surface, dst_surface, spacing) -> np.ndarray:
    """Distance (mm) from each ``src_surface`` voxel to the nearest ``dst_surface`` voxel."""
    dt = ndimage.distance_transform_edt(~dst_surface, sampling=spacing)
    return dt[src_surface]


def mean_surface_distance(pred, gt, spacing: Optional[Sequence[float]] = None) -> float:
    p, g = _pair(pred, gt)
    if not p.any() or not g.any():
        raise EmptyMask("surface distance needs two nonempty masks")
    if spacing is None:
        spacing = getattr(gt, "spacing", None) or (1.0, 1.0, 1.0)
    sp, sg = surface(p), surface(g)
    d_pg = directed_surface_distances(sp, sg, spacing).mean()
    d_gp = directed_surface_distances(sg, sp, spacing).mean()
    return float((d_pg + d_gp) / 2)


def evaluate(pred, gt, spacing=None) -> MetricReport:
    c = confusion(pred, gt)
    empty = c.tp + c.fp + c.fn == 0
    return MetricReport(
        dice=_ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, empty),
        precision=_ratio(c.tp, c.tp + c.fp, empty),
        recall=_ratio(c.tp, c.tp + c.fn, empty),
        msd=mean_surface_distance(pred, gt, spacing),
    )
