"""User click records and deterministic click simulation.

Coordinates are voxel indices into an (H, W, D) grid: y is the row, x the
column, slice the depth index. Simulated clicks follow two rules: the
initial click lands on the 3D geometric centre of a lesion (projected to
the nearest in-lesion voxel when the centre falls outside), corrective
clicks land on the centre of the largest connected error region, positive
over false negatives and negative over false positives. Centres and
projection distances are computed in millimetres using the voxel spacing;
rounding is floor(x + 0.5) per axis and projection ties resolve in raster
scan order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Click:
    x: int          # column in [0, W)
    y: int          # row in [0, H)
    slice: int      # depth in [0, D)
    label: int      # 1 foreground, 0 background

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"click: label must be 0 or 1, got {self.label}")

    def key(self) -> tuple[int, int, int]:
        """(y, x, slice) index into an (H, W, D) array."""
        return (self.y, self.x, self.slice)


def check_click_bounds(click: Click, shape: tuple[int, int, int]) -> None:
    h, w, d = shape
    if not (0 <= click.y < h and 0 <= click.x < w and 0 <= click.slice < d):
        raise ValueError(f"click ({click.x}, {click.y}, {click.slice}) outside grid "
                         f"extents (H={h}, W={w}, D={d})")


def _round_half_up(v: np.ndarray) -> np.ndarray:
    return np.floor(v + 0.5).astype(np.int64)


def mask_center_voxel(mask: np.ndarray, spacing: tuple[float, float, float]) -> tuple[int, int, int]:
    """Voxel-rounded geometric centre of a mask, projected into the mask.

    The centre is the spacing-weighted mean position; when the rounded
    centre is not itself foreground, the nearest foreground voxel by
    millimetre distance wins, ties in raster scan order.
    """
    coords = np.argwhere(np.asarray(mask, dtype=bool))
    if coords.size == 0:
        raise ValueError("mask_center_voxel: empty mask")
    sp = np.asarray(spacing, dtype=np.float64)
    center_mm = (coords * sp).mean(axis=0)
    center = _round_half_up(center_mm / sp)
    center = np.minimum(np.maximum(center, 0), np.asarray(mask.shape) - 1)
    if mask[tuple(center)]:
        return tuple(int(c) for c in center)
    dist = (((coords - center) * sp) ** 2).sum(axis=1)
    best = coords[int(np.argmin(dist))]   # argmin keeps the first (scan-order) minimum
    return tuple(int(c) for c in best)


def simulate_initial_click(lesion_mask: np.ndarray,
                           spacing: tuple[float, float, float]) -> Click:
    """Positive click at the lesion's geometric centre."""
    yy, xx, dd = mask_center_voxel(lesion_mask, spacing)
    return Click(x=xx, y=yy, slice=dd, label=1)


def simulate_correction_click(pred: np.ndarray, gt: np.ndarray,
                              spacing: tuple[float, float, float],
                              connectivity: int = 26) -> Click | None:
    """Click at the centre of the largest connected error region.

    Returns None when prediction and ground truth already agree. The label
    is positive when the clicked voxel is a false negative (missing
    foreground) and negative when it is a false positive.
    """
    from exemseg.evaluation import connected_components, select_largest

    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"correction click: shape mismatch {pred.shape} vs {gt.shape}")
    error = pred ^ gt
    if not error.any():
        return None
    labels, count = connected_components(error, connectivity)
    target = select_largest(labels, count, 1)[0]
    yy, xx, dd = mask_center_voxel(labels == target, spacing)
    label = 1 if gt[yy, xx, dd] else 0
    return Click(x=xx, y=yy, slice=dd, label=label)
