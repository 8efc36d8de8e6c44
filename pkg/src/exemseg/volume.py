"""3D scalar volumes: native file format, resampling, normalization, slicing.

A volume is an (H, W, D) float32 grid of D axial slices with per-axis
voxel spacing in millimetres. The native on-disk form is a raw
little-endian payload next to a JSON sidecar; a single-blob bundle of the
same two parts exists for HTTP upload.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

FORMAT_VERSION = 1
BUNDLE_MAGIC = b"EXSGVOL1"


@dataclass
class Volume:
    """Intensity grid (H, W, D) with voxel spacing (mm per axis)."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"volume: expected 3 axes, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"volume: bad spacing {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def voxel_volume_mm3(self) -> float:
        return self.spacing[0] * self.spacing[1] * self.spacing[2]


def _sidecar_path(base: str | Path) -> Path:
    base = Path(base)
    if base.suffix == ".raw":
        base = base.with_suffix("")
    return base.with_suffix(".json")


def _payload_path(base: str | Path) -> Path:
    base = Path(base)
    if base.suffix == ".raw":
        return base
    return base.with_suffix(".raw")


def _validate_mask_values(arr: np.ndarray, where: str) -> None:
    bad = np.setdiff1d(np.unique(arr), [0, 1])
    if bad.size:
        raise ValueError(f"mask {where}: values outside {{0, 1}}: {bad[:8].tolist()}")


def save_volume(vol: Volume, base: str | Path, kind: str = "intensity") -> None:
    """Write `<base>.raw` + `<base>.json`. kind: 'intensity' or 'mask'."""
    if kind == "intensity":
        payload = np.ascontiguousarray(vol.data, dtype="<f4")
        dtype_name = "float32"
    elif kind == "mask":
        _validate_mask_values(vol.data, "on save")
        payload = np.ascontiguousarray(vol.data, dtype=np.uint8)
        dtype_name = "uint8"
    else:
        raise ValueError(f"save_volume: unknown kind {kind!r}")
    sidecar = {"version": FORMAT_VERSION, "kind": kind, "dtype": dtype_name,
               "shape": list(vol.shape), "spacing": list(vol.spacing),
               "metadata": vol.metadata}
    _payload_path(base).write_bytes(payload.tobytes())
    _sidecar_path(base).write_text(json.dumps(sidecar))


def load_volume(base: str | Path) -> Volume:
    """Read a native volume; masks come back as uint8 grids of {0, 1}."""
    sidecar_file = _sidecar_path(base)
    if not sidecar_file.exists():
        raise FileNotFoundError(f"load_volume: missing sidecar {sidecar_file}")
    sidecar = json.loads(sidecar_file.read_text())
    if sidecar.get("version") != FORMAT_VERSION:
        raise ValueError(f"load_volume: unsupported format version {sidecar.get('version')}")
    shape = tuple(sidecar["shape"])
    dtype = {"float32": "<f4", "uint8": np.uint8}.get(sidecar["dtype"])
    if dtype is None:
        raise ValueError(f"load_volume: unsupported dtype {sidecar['dtype']!r}")
    raw = _payload_path(base).read_bytes()
    want = int(np.prod(shape)) * np.dtype(dtype).itemsize
    if len(raw) != want:
        raise ValueError(f"load_volume: payload is {len(raw)} bytes, sidecar implies {want}")
    arr = np.frombuffer(raw, dtype=dtype).reshape(shape)
    if sidecar["dtype"] == "float32":
        arr = arr.astype(np.float32)
    else:
        _validate_mask_values(arr, "on load")
        arr = arr.astype(np.uint8)
    return Volume(arr, tuple(sidecar["spacing"]), dict(sidecar.get("metadata", {})))


def bundle_volume(vol: Volume, kind: str = "intensity") -> bytes:
    """Single-blob form of the native format, for upload bodies."""
    if kind == "intensity":
        payload = np.ascontiguousarray(vol.data, dtype="<f4").tobytes()
        dtype_name = "float32"
    else:
        _validate_mask_values(vol.data, "in bundle")
        payload = np.ascontiguousarray(vol.data, dtype=np.uint8).tobytes()
        dtype_name = "uint8"
    sidecar = json.dumps({"version": FORMAT_VERSION, "kind": kind, "dtype": dtype_name,
                          "shape": list(vol.shape), "spacing": list(vol.spacing),
                          "metadata": vol.metadata}).encode()
    return BUNDLE_MAGIC + struct.pack("<I", len(sidecar)) + sidecar + payload


def unbundle_volume(blob: bytes) -> Volume:
    if blob[:8] != BUNDLE_MAGIC:
        raise ValueError("volume bundle: bad magic")
    (slen,) = struct.unpack("<I", blob[8:12])
    sidecar = json.loads(blob[12:12 + slen].decode())
    shape = tuple(sidecar["shape"])
    dtype = {"float32": "<f4", "uint8": np.uint8}[sidecar["dtype"]]
    payload = blob[12 + slen:]
    want = int(np.prod(shape)) * np.dtype(dtype).itemsize
    if len(payload) != want:
        raise ValueError(f"volume bundle: payload is {len(payload)} bytes, sidecar implies {want}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    if sidecar["dtype"] == "uint8":
        _validate_mask_values(arr, "in bundle")
    return Volume(arr.astype(np.float32 if sidecar["dtype"] == "float32" else np.uint8),
                  tuple(sidecar["spacing"]), dict(sidecar.get("metadata", {})))


# -- resampling ---------------------------------------------------------------------


def resample_spacing(vol: Volume, target: tuple[float, float, float],
                     is_mask: bool = False) -> Volume:
    """Resample onto `target` spacing; trilinear for intensities, nearest for masks.

    Output extents are round(extent * spacing / target) per axis. Voxel
    centers align in physical space. Equal spacing is an identity.
    """
    target = tuple(float(t) for t in target)
    if any(t <= 0 for t in target):
        raise ValueError(f"resample: bad target spacing {target}")
    out_shape = tuple(int(round(n * s / t)) for n, s, t in zip(vol.shape, vol.spacing, target))
    if any(n < 1 for n in out_shape):
        raise ValueError(f"resample: target spacing {target} collapses extents to {out_shape}")
    if out_shape == vol.shape and target == vol.spacing:
        return Volume(vol.data.copy(), target, dict(vol.metadata))
    axes = [((np.arange(n) + 0.5) * t / s - 0.5) for n, s, t in zip(out_shape, vol.spacing, target)]
    coords = np.meshgrid(*axes, indexing="ij")
    order = 0 if is_mask else 1
    out = ndimage.map_coordinates(vol.data.astype(np.float32), coords, order=order, mode="nearest")
    if is_mask:
        out = out.astype(np.uint8)
        _validate_mask_values(out, "after resample")
    else:
        out = out.astype(np.float32)
    return Volume(out, target, dict(vol.metadata))


# -- intensity normalization ------------------------------------------------------------


def normalize_percentile(vol: Volume, lo_pct: float = 1.0, hi_pct: float = 99.0) -> Volume:
    """Clip to the [lo, hi] percentile window and rescale into [0, 1].

    Percentiles use the linear-interpolation estimator. A constant volume
    maps to all zeros.
    """
    if not 0.0 <= lo_pct < hi_pct <= 100.0:
        raise ValueError(f"normalize: bad percentile window ({lo_pct}, {hi_pct})")
    lo = float(np.percentile(vol.data, lo_pct))
    hi = float(np.percentile(vol.data, hi_pct))
    if hi <= lo:
        return Volume(np.zeros(vol.shape, dtype=np.float32), vol.spacing, dict(vol.metadata))
    out = (np.clip(vol.data, lo, hi) - lo) / (hi - lo)
    return Volume(out.astype(np.float32), vol.spacing, dict(vol.metadata))


# -- 2D resizing ---------------------------------------------------------------------


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Pixel-center-aligned bilinear resize of a 2D array.

    Downsampling a 2x checkerboard with this alignment yields the exact
    block mean (uniform mid-level), which is the behaviour relied on by
    the preprocessing contract.
    """
    img = np.asarray(img, dtype=np.float32)
    if img.ndim != 2:
        raise ValueError(f"bilinear_resize: expected 2D, got {img.shape}")
    h, w = img.shape
    if (out_h, out_w) == (h, w):
        return img.copy()
    y = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    x = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.floor(y).astype(np.int64)
    x0 = np.floor(x).astype(np.int64)
    fy = (y - y0).astype(np.float32)
    fx = (x - x0).astype(np.float32)
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    top = img[y0c][:, x0c] * (1 - fx) + img[y0c][:, x1c] * fx
    bot = img[y1c][:, x0c] * (1 - fx) + img[y1c][:, x1c] * fx
    return (top * (1 - fy)[:, None] + bot * fy[:, None]).astype(np.float32)


def nearest_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Pixel-center-aligned nearest-neighbour resize (masks, labels)."""
    img = np.asarray(img)
    h, w = img.shape
    yi = np.clip(((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), 0, h - 1)
    xi = np.clip(((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), 0, w - 1)
    return img[yi][:, xi].copy()


def extract_and_resize(vol: Volume, d: int, extent: int) -> np.ndarray:
    """Slice d resized to a square (extent, extent) float32 image."""
    if not 0 <= d < vol.shape[2]:
        raise IndexError(f"slice index {d} outside volume depth {vol.shape[2]}")
    return bilinear_resize(vol.data[:, :, d], extent, extent)
