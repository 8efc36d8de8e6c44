"""Independent reference implementations used to cross-check the package.

Everything here is deliberately naive: explicit loops, Python sets,
full sorts. These are the second route of every dual-route check, so
they must not share code with src/.
"""

from __future__ import annotations

import numpy as np

from exemseg.autodiff import Tensor


# -- gradients ----------------------------------------------------------------


def finite_difference_grad(build_loss, params: list[Tensor], step: float = 1e-5,
                           max_entries_per_param: int | None = None,
                           rng: np.random.Generator | None = None) -> list[np.ndarray]:
    """Central-difference gradients of a scalar loss wrt each param tensor.

    `build_loss()` must recompute the loss from the params' current data.
    If `max_entries_per_param` is set, only that many randomly chosen
    entries per tensor are probed (the rest stay NaN in the result).
    """
    grads = []
    for p in params:
        g = np.full(p.data.shape, np.nan, dtype=np.float64)
        flat = p.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_entries_per_param is not None and flat.size > max_entries_per_param:
            assert rng is not None
            idxs = rng.choice(flat.size, size=max_entries_per_param, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            hi = float(build_loss().data)
            flat[i] = orig - step
            lo = float(build_loss().data)
            flat[i] = orig
            g.reshape(-1)[i] = (hi - lo) / (2.0 * step)
        grads.append(g)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max relative error over probed (non-NaN) entries."""
    mask = ~np.isnan(numeric)
    a = analytic[mask]
    n = numeric[mask]
    denom = np.maximum(np.abs(a) + np.abs(n), 1e-8)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


# -- convolution ----------------------------------------------------------------


def conv2d_reference(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None,
                     stride: int = 1, pad: int = 0) -> np.ndarray:
    """Sliding-window summation, quadruple loop."""
    kh, kw, cin, cout = w.shape
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    ho = (xp.shape[0] - kh) // stride + 1
    wo = (xp.shape[1] - kw) // stride + 1
    out = np.zeros((ho, wo, cout), dtype=np.float64)
    for i in range(ho):
        for j in range(wo):
            for di in range(kh):
                for dj in range(kw):
                    for c in range(cin):
                        out[i, j, :] += xp[i * stride + di, j * stride + dj, c] * w[di, dj, c, :]
    if b is not None:
        out += b
    return out


# -- connected components ---------------------------------------------------------


def _neighbor_offsets(ndim: int, connectivity: int) -> list[tuple]:
    """Offsets for 3D 6/18/26 and 2D 4/8 connectivity."""
    offs = []
    for delta in np.ndindex(*([3] * ndim)):
        d = tuple(v - 1 for v in delta)
        if all(v == 0 for v in d):
            continue
        order = sum(abs(v) for v in d)
        if ndim == 3:
            limit = {6: 1, 18: 2, 26: 3}[connectivity]
        else:
            limit = {4: 1, 8: 2}[connectivity]
        if order <= limit:
            offs.append(d)
    return offs


def flood_fill_components(mask: np.ndarray, connectivity: int) -> np.ndarray:
    """Stack-based flood fill; labels assigned in raster scan order of seeds."""
    mask = np.asarray(mask, dtype=bool)
    offs = _neighbor_offsets(mask.ndim, connectivity)
    labels = np.zeros(mask.shape, dtype=np.int32)
    next_label = 0
    for seed in np.argwhere(mask):
        seed = tuple(seed)
        if labels[seed]:
            continue
        next_label += 1
        stack = [seed]
        labels[seed] = next_label
        while stack:
            cur = stack.pop()
            for off in offs:
                nb = tuple(c + o for c, o in zip(cur, off))
                if any(v < 0 or v >= s for v, s in zip(nb, mask.shape)):
                    continue
                if mask[nb] and not labels[nb]:
                    labels[nb] = next_label
                    stack.append(nb)
    return labels


def fill_holes_reference(slice_mask: np.ndarray) -> np.ndarray:
    """2D hole fill: background connected to the border (4-connectivity) stays."""
    m = np.asarray(slice_mask, dtype=bool)
    h, w = m.shape
    reach = np.zeros_like(m)
    stack = []
    for i in range(h):
        for j in (0, w - 1):
            if not m[i, j]:
                stack.append((i, j))
    for j in range(w):
        for i in (0, h - 1):
            if not m[i, j]:
                stack.append((i, j))
    for s in stack:
        reach[s] = True
    while stack:
        i, j = stack.pop()
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            ni, nj = i + di, j + dj
            if 0 <= ni < h and 0 <= nj < w and not m[ni, nj] and not reach[ni, nj]:
                reach[ni, nj] = True
                stack.append((ni, nj))
    return m | ~reach


# -- metrics over Python sets ------------------------------------------------------


def voxel_set(mask: np.ndarray) -> set:
    return {tuple(ix) for ix in np.argwhere(np.asarray(mask, dtype=bool))}


def dsc_reference(pred: np.ndarray, gt: np.ndarray) -> float:
    p, g = voxel_set(pred), voxel_set(gt)
    if not p and not g:
        return 1.0
    return 2.0 * len(p & g) / (len(p) + len(g))


def iou_reference(a: set, b: set) -> float:
    if not a and not b:
        return 0.0
    return len(a & b) / len(a | b)


def lesion_match_reference(pred: np.ndarray, gt: np.ndarray, iou_thr: float,
                           connectivity: int) -> dict:
    """Brute-force component matching.

    A GT lesion is TP if any predicted component reaches the IoU
    threshold against it; a predicted component is FP if it reaches the
    threshold against no GT lesion. Lesion-wise DSC compares each TP GT
    lesion against the union of all its matching components.
    """
    gl = flood_fill_components(gt, connectivity)
    pl = flood_fill_components(pred, connectivity)
    gsets = [voxel_set(gl == i) for i in range(1, gl.max() + 1)]
    psets = [voxel_set(pl == i) for i in range(1, pl.max() + 1)]
    tp_ids, dscs = [], []
    matched_pred = set()
    for gi, gs in enumerate(gsets):
        hits = [pi for pi, ps in enumerate(psets) if iou_reference(ps, gs) >= iou_thr]
        if hits:
            tp_ids.append(gi)
            matched_pred.update(hits)
            union = set().union(*[psets[pi] for pi in hits])
            dscs.append(2.0 * len(union & gs) / (len(union) + len(gs)))
    tp = len(tp_ids)
    fn = len(gsets) - tp
    fp = sum(1 for pi, ps in enumerate(psets)
             if all(iou_reference(ps, gs) < iou_thr for gs in gsets))
    if not gsets and not psets:
        f1 = 1.0
    else:
        f1 = 2.0 * tp / (2.0 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
    return {"tp": tp, "fp": fp, "fn": fn, "f1": f1,
            "lesionwise_dsc": (sum(dscs) / len(dscs)) if dscs else None}


def percentile_reference(values: np.ndarray, q: float) -> float:
    """Linear-interpolation percentile by full sort."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 1:
        return float(v[0])
    pos = q / 100.0 * (v.size - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, v.size - 1)
    frac = pos - lo
    return float(v[lo] * (1 - frac) + v[hi] * frac)


def bilinear_resize_reference(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Pixel-center-aligned bilinear sampling, per output pixel."""
    h, w = img.shape
    out = np.zeros((out_h, out_w), dtype=np.float64)
    for i in range(out_h):
        for j in range(out_w):
            y = (i + 0.5) * h / out_h - 0.5
            x = (j + 0.5) * w / out_w - 0.5
            y0 = int(np.floor(y))
            x0 = int(np.floor(x))
            fy, fx = y - y0, x - x0
            y0c, y1c = np.clip([y0, y0 + 1], 0, h - 1)
            x0c, x1c = np.clip([x0, x0 + 1], 0, w - 1)
            out[i, j] = (img[y0c, x0c] * (1 - fy) * (1 - fx)
                         + img[y0c, x1c] * (1 - fy) * fx
                         + img[y1c, x0c] * fy * (1 - fx)
                         + img[y1c, x1c] * fy * fx)
    return out
