"""Synthetic ellipsoid phantoms for training and evaluation.

Each phantom is a small anisotropic grid holding two populations of
ellipsoidal blobs on a smooth noisy background:

* class A — bright "target" lesions, labelled in the instance ground truth;
* class B — dimmer distractor blobs that share the geometry but must be
  excluded by a trained model.

Generation is fully deterministic per seed and placement is rejection
sampled so that no two structures overlap.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volume import Volume


@dataclass(frozen=True)
class PhantomConfig:
    extents: tuple[int, int, int] = (96, 96, 8)
    spacing: tuple[float, float, float] = (1.0, 1.0, 5.0)
    lesion_count: tuple[int, int] = (3, 6)
    distractor_count: tuple[int, int] = (2, 4)
    lesion_intensity: tuple[float, float] = (0.8, 1.0)
    distractor_intensity: tuple[float, float] = (0.5, 0.7)
    lesion_radius_px: tuple[float, float] = (7.0, 11.0)
    lesion_radius_slices: tuple[float, float] = (1.3, 2.3)
    distractor_radius_px: tuple[float, float] = (6.0, 12.0)
    distractor_radius_slices: tuple[float, float] = (1.0, 2.5)
    background_level: float = 0.25
    noise_sigma: float = 0.02
    # smallest acceptable rasterized lesion; keeps every target comfortably
    # above the 1000 mm^3 small-component cutoff used at evaluation time
    min_lesion_voxels: int = 240
    placement_margin: float = 2.0
    max_attempts: int = 200


@dataclass
class Phantom:
    volume: Volume
    instance_gt: np.ndarray          # uint16 (H,W,D); labels 1..n_lesions, class A only
    distractor_mask: np.ndarray      # uint8 (H,W,D); union of class-B blobs
    n_lesions: int
    lesion_centers: list[tuple[float, float, float]] = field(default_factory=list)

    def semantic_gt(self) -> np.ndarray:
        return (self.instance_gt > 0).astype(np.uint8)

    def lesion_mask(self, label: int) -> np.ndarray:
        if not 1 <= label <= self.n_lesions:
            raise ValueError(f"lesion label {label} outside 1..{self.n_lesions}")
        return (self.instance_gt == label).astype(np.uint8)


def _ellipsoid_mask(extents, center, radii) -> np.ndarray:
    h, w, d = extents
    yy, xx, zz = np.meshgrid(np.arange(h), np.arange(w), np.arange(d), indexing="ij")
    cy, cx, cz = center
    ry, rx, rz = radii
    q = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 + ((zz - cz) / rz) ** 2
    return q <= 1.0


def _place_blob(rng, cfg, occupied, radius_px, radius_slices, min_voxels):
    """Sample a non-overlapping ellipsoid; returns (mask, center, radii)."""
    h, w, d = cfg.extents
    for _ in range(cfg.max_attempts):
        ry = rng.uniform(*radius_px)
        rx = rng.uniform(*radius_px)
        rz = rng.uniform(*radius_slices)
        cy = rng.uniform(ry, h - 1 - ry)
        cx = rng.uniform(rx, w - 1 - rx)
        cz = rng.uniform(min(rz * 0.6, d / 2), max(d - 1 - rz * 0.6, d / 2))
        mask = _ellipsoid_mask(cfg.extents, (cy, cx, cz), (ry, rx, rz))
        if mask.sum() < min_voxels:
            continue
        m = cfg.placement_margin
        halo = _ellipsoid_mask(cfg.extents, (cy, cx, cz), (ry + m, rx + m, rz + m / 4))
        if np.any(halo & occupied):
            continue
        return mask, (cy, cx, cz), (ry, rx, rz)
    raise ValueError(
        f"could not place a blob after {cfg.max_attempts} attempts; "
        f"grid {cfg.extents} is too crowded for the requested counts")


def generate_phantom(cfg: PhantomConfig, seed: int) -> Phantom:
    rng = np.random.default_rng(seed)
    h, w, d = cfg.extents

    # smooth low-frequency background plus white noise
    coarse = rng.standard_normal((h // 8 + 2, w // 8 + 2, d))
    coarse = ndimage.zoom(coarse, (h / coarse.shape[0], w / coarse.shape[1], 1.0), order=1)
    coarse = coarse[:h, :w, :]
    coarse = (coarse - coarse.min()) / max(float(np.ptp(coarse)), 1e-9)
    img = cfg.background_level * coarse.astype(np.float64)

    occupied = np.zeros(cfg.extents, dtype=bool)
    instance = np.zeros(cfg.extents, dtype=np.uint16)
    centers: list[tuple[float, float, float]] = []

    n_lesions = int(rng.integers(cfg.lesion_count[0], cfg.lesion_count[1] + 1))
    for label in range(1, n_lesions + 1):
        mask, center, _ = _place_blob(rng, cfg, occupied,
                                      cfg.lesion_radius_px, cfg.lesion_radius_slices,
                                      cfg.min_lesion_voxels)
        level = rng.uniform(*cfg.lesion_intensity)
        img[mask] = level + 0.03 * rng.standard_normal(int(mask.sum()))
        occupied |= mask
        instance[mask] = label
        centers.append(center)

    distractor = np.zeros(cfg.extents, dtype=np.uint8)
    n_distract = int(rng.integers(cfg.distractor_count[0], cfg.distractor_count[1] + 1))
    for _ in range(n_distract):
        mask, _, _ = _place_blob(rng, cfg, occupied,
                                 cfg.distractor_radius_px, cfg.distractor_radius_slices,
                                 min_voxels=40)
        level = rng.uniform(*cfg.distractor_intensity)
        img[mask] = level + 0.03 * rng.standard_normal(int(mask.sum()))
        occupied |= mask
        distractor[mask] = 1

    img += cfg.noise_sigma * rng.standard_normal(cfg.extents)
    # light in-plane smoothing softens blob borders without moving the GT
    img = ndimage.gaussian_filter(img, sigma=(0.6, 0.6, 0.0))
    img = np.clip(img, 0.0, None).astype(np.float32)

    vol = Volume(data=img, spacing=cfg.spacing, metadata={"seed": seed})
    return Phantom(volume=vol, instance_gt=instance, distractor_mask=distractor,
                   n_lesions=n_lesions, lesion_centers=centers)


def generate_dataset(cfg: PhantomConfig, count: int, seed0: int = 0) -> list[Phantom]:
    """Phantoms for seeds seed0..seed0+count-1 (stable split boundaries)."""
    return [generate_phantom(cfg, seed0 + i) for i in range(count)]
