"""Canonical run-length encoding for binary slice stacks.

A mask (H, W, D) is encoded slice by slice. Within a slice, runs are
maximal [start, length) intervals over the row-major flattening, listed
in ascending start order; that combination makes the encoding canonical
(equal masks encode to equal bytes). Runs are serialized as little-endian
uint32 pairs and base64-wrapped for JSON transport.
"""

from __future__ import annotations

import base64

import numpy as np


def encode_slice_runs(slice_mask: np.ndarray) -> np.ndarray:
    """Maximal runs of a 2D mask as an (n, 2) uint32 array of (start, length)."""
    flat = np.asarray(slice_mask, dtype=bool).ravel()
    if flat.size == 0:
        return np.zeros((0, 2), dtype=np.uint32)
    edges = np.diff(flat.astype(np.int8))
    starts = np.flatnonzero(edges == 1) + 1
    ends = np.flatnonzero(edges == -1) + 1
    if flat[0]:
        starts = np.concatenate([[0], starts])
    if flat[-1]:
        ends = np.concatenate([ends, [flat.size]])
    return np.stack([starts, ends - starts], axis=1).astype(np.uint32)


def encode_mask(mask: np.ndarray) -> dict:
    """RLE envelope for an (H, W, D) binary mask: per-slice base64 run pairs."""
    mask = np.asarray(mask)
    if mask.ndim != 3:
        raise ValueError(f"rle: expected (H, W, D) mask, got {mask.shape}")
    slices = []
    for d in range(mask.shape[2]):
        runs = encode_slice_runs(mask[:, :, d])
        slices.append(base64.b64encode(runs.astype("<u4").tobytes()).decode("ascii"))
    return {"shape": list(mask.shape), "encoding": "rle-b64-u32", "slices": slices}


def decode_mask(envelope: dict) -> np.ndarray:
    """Inverse of encode_mask; returns a bool (H, W, D) array."""
    if envelope.get("encoding") != "rle-b64-u32":
        raise ValueError(f"rle: unknown encoding {envelope.get('encoding')!r}")
    h, w, d = envelope["shape"]
    out = np.zeros((h, w, d), dtype=bool)
    plane = h * w
    for k, payload in enumerate(envelope["slices"]):
        runs = np.frombuffer(base64.b64decode(payload), dtype="<u4").reshape(-1, 2)
        flat = np.zeros(plane, dtype=bool)
        for start, length in runs:
            if start + length > plane:
                raise ValueError(f"rle: run ({start}, {length}) exceeds slice size {plane}")
            flat[start:start + length] = True
        out[:, :, k] = flat.reshape(h, w)
    return out
