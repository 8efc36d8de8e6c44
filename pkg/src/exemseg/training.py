"""Losses, optimizer, augmentation, and the training loop.

Training mirrors inference structurally: each sample is a short window of
consecutive slices; prompted lesions are click-decoded on an anchor slice
and swept through the window via their memory banks (gradients flow through
the memory encoder and the bank payloads), then every window slice is
decoded against the per-sample exemplar bank and supervised with the
multi-lesion mask. The per-sample bank is rebuilt from scratch each time.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

import exemseg.autodiff as ad
from exemseg.autodiff import Tensor
from exemseg.banks import ExemplarBank, MemoryBank, MemoryEntry
from exemseg.clicks import Click, simulate_correction_click, simulate_initial_click
from exemseg.evaluation import EvalConfig, dsc, run_lesionwise_eval
from exemseg.model import ModelConfig, SliceSegmenter
from exemseg.phantom import Phantom
from exemseg.volume import bilinear_resize, nearest_resize, normalize_percentile

EPS = 1e-6


# -- loss primitives -------------------------------------------------------------------


def bce_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Elementwise-stable binary cross entropy, averaged over all entries."""
    z = np.asarray(target, dtype=np.float32)
    per = ad.relu(logits) - logits * z + ad.softplus(-ad.abs_(logits))
    return per.mean()


def focal_loss(logits: Tensor, target: np.ndarray, alpha: float = 0.25) -> Tensor:
    """Mean focal BCE with gamma fixed at 2."""
    z = np.asarray(target, dtype=np.float32)
    ce = ad.relu(logits) - logits * z + ad.softplus(-ad.abs_(logits))
    p = ad.sigmoid(logits)
    p_t = p * z + (1.0 - p) * (1.0 - z)
    a_t = alpha * z + (1.0 - alpha) * (1.0 - z)
    miss = 1.0 - p_t
    return (ce * (miss * miss) * a_t).mean()


def soft_dice_loss(logits: Tensor, target: np.ndarray, eps: float = EPS) -> Tensor:
    z = np.asarray(target, dtype=np.float32)
    p = ad.sigmoid(logits)
    inter = (p * z).sum()
    return 1.0 - (2.0 * inter + eps) / (p.sum() + float(z.sum()) + eps)


def soft_iou_loss(logits: Tensor, target: np.ndarray, eps: float = EPS) -> Tensor:
    z = np.asarray(target, dtype=np.float32)
    p = ad.sigmoid(logits)
    inter = (p * z).sum()
    union = p.sum() + float(z.sum()) - inter
    return 1.0 - (inter + eps) / (union + eps)


def binary_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Hard IoU of two binary masks; 1.0 when both are empty."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    union = (pred | gt).sum()
    if union == 0:
        return 1.0
    return float((pred & gt).sum() / union)


def instance_loss(logits: Tensor, iou_pred: Tensor, target: np.ndarray,
                  focal_weight: float = 20.0) -> Tensor:
    """Mask-quality term for one decoded slice: 20:1 focal:dice plus an MSE
    penalty tying the predicted IoU to the realized IoU of the binarized mask."""
    actual = binary_iou(logits.data > 0, target)
    diff = iou_pred - actual
    return focal_weight * focal_loss(logits, target) + soft_dice_loss(logits, target) \
        + diff * diff


def semantic_slice_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    return bce_with_logits(logits, target) + soft_dice_loss(logits, target) \
        + soft_iou_loss(logits, target)


def combine_losses(instance_terms: list[Tensor], object_terms: list[Tensor],
                   semantic_terms: list[Tensor],
                   fallback_terms: list[Tensor] | None = None) -> tuple[Tensor, dict]:
    """Total = instance + object + semantic (+ auxiliary empty-bank term).

    The reported component floats always sum to the reported total.
    """

    def avg(terms):
        if not terms:
            return Tensor(np.zeros((), dtype=np.float32))
        out = terms[0]
        for t in terms[1:]:
            out = out + t
        return out * (1.0 / len(terms))

    l_inst, l_obj, l_sem = avg(instance_terms), avg(object_terms), avg(semantic_terms)
    l_fall = avg(fallback_terms or [])
    total = l_inst + l_obj + l_sem + l_fall
    comps = {"instance": l_inst.item(), "object": l_obj.item(),
             "semantic": l_sem.item(), "fallback": l_fall.item(),
             "total": total.item()}
    return total, comps


# -- optimizer -------------------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay; z-initialized moments, bias-corrected."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = dict(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype)
            self._m[k] = b1 * self._m[k] + (1 - b1) * g
            self._v[k] = b2 * self._v[k] + (1 - b2) * g * g
            update = (self._m[k] / c1) / (np.sqrt(self._v[k] / c2) + self.eps)
            p.data = p.data - self.lr * update - self.lr * self.weight_decay * p.data


# -- augmentation ----------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentParams:
    angle_deg: float
    shear_deg: float
    flip: bool
    zoom: float                       # >= 1: content magnified (random crop)
    shift: tuple[float, float]        # crop-centre jitter in pixels


def sample_augment(rng: np.random.Generator, max_angle: float = 10.0,
                   max_shear: float = 5.0, max_zoom: float = 1.15) -> AugmentParams:
    zoom = float(rng.uniform(1.0, max_zoom))
    room = (1.0 - 1.0 / zoom) * 20.0
    return AugmentParams(
        angle_deg=float(rng.uniform(-max_angle, max_angle)),
        shear_deg=float(rng.uniform(-max_shear, max_shear)),
        flip=bool(rng.random() < 0.5),
        zoom=zoom,
        shift=(float(rng.uniform(-room, room)), float(rng.uniform(-room, room))))


def apply_augment(plane: np.ndarray, params: AugmentParams, order: int) -> np.ndarray:
    """Resample one 2D plane; images use order=1, masks order=0."""
    h, w = plane.shape
    th = np.deg2rad(params.angle_deg)
    sh = np.tan(np.deg2rad(params.shear_deg))
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    shear = np.array([[1.0, -sh], [0.0, 1.0]])
    m = rot @ shear / params.zoom
    if params.flip:
        m = m @ np.array([[1.0, 0.0], [0.0, -1.0]])
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = center + np.array(params.shift) - m @ center
    out = ndimage.affine_transform(plane.astype(np.float32), m, offset=offset,
                                   order=order, mode="constant", cval=0.0)
    if order == 0:
        return (out > 0.5).astype(plane.dtype)
    return out.astype(np.float32)


# -- sample construction -----------------------------------------------------------------


@dataclass
class TrainingSample:
    slices: np.ndarray                       # (S, S, Dw) float32, model extent
    semantic: np.ndarray                     # (S, S, Dw) uint8: all target lesions
    instances: dict[int, np.ndarray]         # prompted lesion -> (S, S, Dw) uint8
    spacing: tuple[float, float, float]

    def __post_init__(self):
        for lid, m in self.instances.items():
            bad = (m > 0) & (self.semantic == 0)
            if bad.any():
                raise ValueError(f"sample: instance {lid} leaks outside the semantic mask")
            if not (m > 0).any():
                raise ValueError(f"sample: prompted lesion {lid} invisible in the window")


def build_training_sample(phantom: Phantom, rng: np.random.Generator,
                          model_extent: int, d_train: int = 4, max_prompted: int = 3,
                          augment: bool = True, min_visible: int = 20) -> TrainingSample:
    """Random consecutive-slice window with a random prompted-lesion subset."""
    vol = normalize_percentile(phantom.volume)
    h, w, depth = vol.shape
    dw = min(d_train, depth)
    starts = rng.permutation(depth - dw + 1)
    for start in starts:
        window = slice(start, start + dw)
        visible = [lab for lab in range(1, phantom.n_lesions + 1)
                   if (phantom.instance_gt[:, :, window] == lab).sum() >= min_visible]
        if visible:
            break
    else:
        raise ValueError("no window with a visible lesion")

    k = int(rng.integers(1, min(max_prompted, len(visible)) + 1))
    chosen = sorted(rng.choice(visible, size=k, replace=False).tolist())

    img = vol.data[:, :, window].copy()
    sem = (phantom.instance_gt[:, :, window] > 0).astype(np.uint8)
    inst = {lab: (phantom.instance_gt[:, :, window] == lab).astype(np.uint8)
            for lab in chosen}
    if augment:
        params = sample_augment(rng)
        for i in range(dw):
            img[:, :, i] = apply_augment(img[:, :, i], params, order=1)
            sem[:, :, i] = apply_augment(sem[:, :, i], params, order=0)
            for lab in chosen:
                inst[lab][:, :, i] = apply_augment(inst[lab][:, :, i], params, order=0)
        # augmentation can push a lesion out of frame; drop those
        inst = {lab: m for lab, m in inst.items() if (m > 0).any()}
        if not inst:
            return build_training_sample(phantom, rng, model_extent, d_train,
                                         max_prompted, augment, min_visible)

    s = model_extent
    slices = np.stack([bilinear_resize(img[:, :, i], s, s) for i in range(dw)], axis=-1)
    semantic = np.stack([nearest_resize(sem[:, :, i], s, s) for i in range(dw)], axis=-1)
    instances = {lab: np.stack([nearest_resize(m[:, :, i], s, s) for i in range(dw)],
                               axis=-1) for lab, m in inst.items()}
    instances = {lab: m for lab, m in instances.items() if (m > 0).any()}
    if not instances:
        return build_training_sample(phantom, rng, model_extent, d_train,
                                     max_prompted, augment, min_visible)
    # nearest-resized instances can poke out of the resized semantic mask by
    # a pixel; the semantic target is their union either way
    semantic |= np.bitwise_or.reduce([m for m in instances.values()])
    return TrainingSample(slices=slices, semantic=semantic, instances=instances,
                          spacing=phantom.volume.spacing)


def simulate_training_clicks(gt: np.ndarray, pred: np.ndarray | None, step: int,
                             spacing: tuple[float, float, float]) -> Click | None:
    """Step 0: centre click on the ground truth; later steps: correction click."""
    if step == 0:
        return simulate_initial_click(gt, spacing)
    if pred is None:
        raise ValueError("correction step needs the current prediction")
    return simulate_correction_click(pred, gt, spacing)


# -- the per-sample forward pass ---------------------------------------------------------


def _gt_logits(mask_2d: np.ndarray) -> Tensor:
    return Tensor((np.asarray(mask_2d, dtype=np.float32) * 2.0 - 1.0) * 10.0)


def forward_sample(model: SliceSegmenter, sample: TrainingSample,
                   rng: np.random.Generator, teacher_force: bool,
                   correction_clicks: int = 2, p_empty_supervision: float = 0.15,
                   p_negative_only: float = 0.05) -> tuple[Tensor, dict]:
    """Both training stages on one window; returns (total loss, components)."""
    s = model.cfg.input_extent
    dw = sample.slices.shape[2]
    tokens = [model.encode_slice(sample.slices[:, :, i]) for i in range(dw)]
    ex_bank = ExemplarBank(model.cfg.exemplar_capacity)
    inst_terms: list[Tensor] = []
    obj_terms: list[Tensor] = []

    def decode_with_clicks(clicks: list[Click]):
        by_slice = defaultdict(list)
        for c in clicks:
            by_slice[c.slice].append(c)
        (d, cs), = by_slice.items()   # training clicks stay on one slice
        prompts = model.encode_prompts([(float(c.x), float(c.y), c.label) for c in cs])
        return d, model.decode(tokens[d], prompts)

    def offer_exemplar(lid, d, prompted, res, gt_slice):
        use_gt = teacher_force or (prompted and not (res.mask_logits.data > 0).any())
        logits = _gt_logits(gt_slice) if use_gt else res.mask_logits
        if not (logits.data > 0).any():
            return
        e = model.make_exemplar(lid, d, prompted, logits, tokens[d], res.out_token)
        ex_bank.upsert(e, from_clicks=prompted)

    for lid, gt in sorted(sample.instances.items()):
        if rng.random() < p_negative_only:
            # a stray negative-only click set must decode to (near) nothing
            d = int(rng.integers(0, dw))
            bg = np.argwhere(sample.semantic[:, :, d] == 0)
            y, x = bg[int(rng.integers(0, len(bg)))]
            _, res = decode_with_clicks([Click(x=int(x), y=int(y), slice=d, label=0)])
            zero = np.zeros((s, s), dtype=np.uint8)
            inst_terms.append(instance_loss(res.mask_logits, res.iou, zero))
            obj_terms.append(bce_with_logits(ad.reshape(res.object_logit, (1,)),
                                             np.zeros(1)))
            continue

        clicks = [simulate_training_clicks(gt, None, 0, sample.spacing)]
        n_corr = int(rng.integers(0, correction_clicks + 1))
        anchor = clicks[0].slice
        for _ in range(n_corr):
            with ad.no_grad():
                _, probe = decode_with_clicks(clicks)
            pred = np.zeros_like(gt)
            pred[:, :, anchor] = probe.mask_logits.data > 0
            gt_slice_only = np.zeros_like(gt)
            gt_slice_only[:, :, anchor] = gt[:, :, anchor]
            nxt = simulate_training_clicks(gt_slice_only, pred, 1, sample.spacing)
            if nxt is None:
                break
            clicks.append(nxt)

        bank = MemoryBank(model.cfg.memory_capacity)
        _, res = decode_with_clicks(clicks)
        inst_terms.append(instance_loss(res.mask_logits, res.iou, gt[:, :, anchor]))
        obj_terms.append(bce_with_logits(
            ad.reshape(res.object_logit, (1,)),
            np.array([float(gt[:, :, anchor].any())])))
        bank.push(MemoryEntry(slice_index=anchor, prompted=True,
                              feature=model.encode_memory(res.mask_logits, tokens[anchor]),
                              pointer=model.object_pointer(res.out_token)))
        offer_exemplar(lid, anchor, True, res, gt[:, :, anchor])

        for sweep in (range(anchor + 1, dw), range(anchor - 1, -1, -1)):
            bank.clear_non_prompted()
            for d in sweep:
                cond = model.condition_on_memory(tokens[d], bank.ordered())
                ptr = bank.latest_pointer()
                ptok = ad.reshape(ptr, (1, model.cfg.channels)) if ptr is not None else None
                res = model.decode(cond, pointer_tokens=ptok)
                inst_terms.append(instance_loss(res.mask_logits, res.iou, gt[:, :, d]))
                obj_terms.append(bce_with_logits(
                    ad.reshape(res.object_logit, (1,)),
                    np.array([float(gt[:, :, d].any())])))
                bank.push(MemoryEntry(slice_index=d, prompted=False,
                                      feature=model.encode_memory(res.mask_logits, tokens[d]),
                                      pointer=model.object_pointer(res.out_token)))
                offer_exemplar(lid, d, False, res, gt[:, :, d])

    sem_terms: list[Tensor] = []
    for d in range(dw):
        ctx = ex_bank.select_context(d, model.cfg.exemplar_context_limit)
        res = model.decode(model.condition_on_exemplars(tokens[d], ctx, d))
        sem_terms.append(semantic_slice_loss(res.mask_logits, sample.semantic[:, :, d]))

    fall_terms: list[Tensor] = []
    if rng.random() < p_empty_supervision:
        d = int(rng.integers(0, dw))
        res = model.decode(model.condition_on_exemplars(tokens[d], [], d))
        fall_terms.append(semantic_slice_loss(res.mask_logits,
                                              np.zeros((s, s), dtype=np.uint8)))

    return combine_losses(inst_terms, obj_terms, sem_terms, fall_terms)


# -- the loop ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    epochs: int = 30
    lr: float = 1e-4
    weight_decay: float = 0.01
    seed: int = 0
    d_train: int = 4
    max_prompted: int = 3
    correction_clicks: int = 2
    teacher_force_epochs: int = 1
    p_empty_supervision: float = 0.15
    p_negative_only: float = 0.05
    augment: bool = True


def _quick_val_dsc(model: SliceSegmenter, phantoms: list[Phantom]) -> float:
    from exemseg.inference import SessionSegmenter

    scores = []
    for ph in phantoms:
        rep = run_lesionwise_eval(SessionSegmenter(model), ph.volume, ph.semantic_gt(),
                                  EvalConfig(max_lesions=2, clicks_per_lesion=1))
        scores.append(rep.scan_dsc)
    return float(np.median(scores)) if scores else float("nan")


def train(model: SliceSegmenter, phantoms: list[Phantom], cfg: TrainConfig,
          val_phantoms: list[Phantom] | None = None, checkpoint_path=None,
          log_path=None) -> list[dict]:
    """Epoch loop over per-phantom window samples; returns the epoch log.

    A checkpoint is written after every completed epoch; a non-finite loss
    stops training immediately, leaving the previous epoch's file as the
    last good checkpoint.
    """
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(model.params(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rows: list[dict] = []
    for epoch in range(cfg.epochs):
        teacher = epoch < cfg.teacher_force_epochs
        sums = defaultdict(float)
        order = rng.permutation(len(phantoms))
        aborted = False
        for idx in order:
            sample = build_training_sample(phantoms[int(idx)], rng,
                                           cfg.model.input_extent, cfg.d_train,
                                           cfg.max_prompted, cfg.augment)
            loss, comps = forward_sample(model, sample, rng, teacher,
                                         cfg.correction_clicks,
                                         cfg.p_empty_supervision,
                                         cfg.p_negative_only)
            if not np.isfinite(comps["total"]):
                aborted = True
                break
            opt.zero_grad()
            loss.backward()
            opt.step()
            for k, v in comps.items():
                sums[k] += v
        if aborted:
            rows.append({"epoch": epoch, "status": "diverged"})
            break
        row = {"epoch": epoch, "status": "ok",
               **{f"loss_{k}": sums[k] / len(phantoms) for k in
                  ("total", "instance", "object", "semantic", "fallback")}}
        if val_phantoms:
            row["val_dsc"] = _quick_val_dsc(model, val_phantoms)
        rows.append(row)
        if checkpoint_path is not None:
            model.save(checkpoint_path)
        if log_path is not None:
            _write_log(log_path, rows)
    return rows


def _write_log(path, rows: list[dict]) -> None:
    keys: list[str] = []
    for r in rows:
        for k in r:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)
