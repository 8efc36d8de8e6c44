"""Interactive two-stage inference sessions.

A Session owns one volume and one model and tracks everything a click-driven
segmentation workflow accumulates: per-lesion click history, per-lesion
memory banks, one shared exemplar bank, and cached masks. Stage 1
(`propagate_memory`) sweeps a prompted lesion through the scan via its
memory bank; Stage 2 (`propagate_exemplars`) decodes every slice
independently against the exemplar bank to pick up unprompted lesions.

All model calls run with gradients disabled and all bank payloads are held
as plain arrays, so sessions are cheap to snapshot and bit-reproducible.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np

import exemseg.autodiff as ad
from exemseg.autodiff import Tensor
from exemseg.banks import ExemplarBank, MemoryBank, MemoryEntry
from exemseg.clicks import Click, check_click_bounds
from exemseg.evaluation import fill_holes, remove_small_components
from exemseg.model import SliceSegmenter, feature_array
from exemseg.rle import decode_mask, encode_mask
from exemseg.volume import Volume, bilinear_resize, extract_and_resize, normalize_percentile

SNAPSHOT_VERSION = 1


@dataclass
class MaskVolume:
    data: np.ndarray                 # uint8 (H, W, D)
    kind: str                        # "instance" | "semantic"
    provenance: str                  # "prompted" | "propagated" | "exemplar"
    revision: int

    def __post_init__(self):
        if self.kind not in ("instance", "semantic"):
            raise ValueError(f"mask kind {self.kind!r}")
        if self.provenance not in ("prompted", "propagated", "exemplar"):
            raise ValueError(f"mask provenance {self.provenance!r}")


@dataclass
class ClickResult:
    mask: np.ndarray                 # uint8 (H, W) plane at the clicked slice
    warning: bool                    # positive click produced an empty mask
    revision: int


@dataclass(frozen=True)
class PostprocConfig:
    min_component_mm3: float = 1000.0
    fill_holes: bool = True
    include_stage1: bool = True      # union prompted-lesion masks into the final mask
    connectivity: int = 26


class Session:
    def __init__(self, model: SliceSegmenter, volume: Volume, normalize: bool = True):
        self.model = model
        self.volume = volume
        self._input = normalize_percentile(volume) if normalize else volume
        self._embed_cache: dict[int, np.ndarray] = {}
        self.clicks: dict[int, list[Click]] = {}
        self.memory: dict[int, MemoryBank] = {}
        self.exemplars = ExemplarBank(model.cfg.exemplar_capacity)
        self.instance_masks: dict[int, MaskVolume] = {}
        self.semantic: MaskVolume | None = None
        self.revision = 0

    # -- geometry ----------------------------------------------------------------

    def _tokens(self, d: int) -> Tensor:
        if d not in self._embed_cache:
            img = extract_and_resize(self._input, d, self.model.cfg.input_extent)
            with ad.no_grad():
                self._embed_cache[d] = self.model.encode_slice(img).data
        return Tensor(self._embed_cache[d])

    def _model_xy(self, click: Click) -> tuple[float, float]:
        h, w, _ = self.volume.shape
        s = self.model.cfg.input_extent
        return ((click.x + 0.5) * s / w - 0.5,
                (click.y + 0.5) * s / h - 0.5)

    def _plane(self, mask_logits: Tensor) -> np.ndarray:
        h, w, _ = self.volume.shape
        return (bilinear_resize(mask_logits.data, h, w) > 0).astype(np.uint8)

    # -- stage 1: clicks and memory propagation -----------------------------------

    def _decode_prompted(self, lesion_id: int, d: int, tokens: Tensor):
        prompts = [(*self._model_xy(c), c.label)
                   for c in self.clicks[lesion_id] if c.slice == d]
        return self.model.decode(tokens, self.model.encode_prompts(prompts))

    def _remember(self, lesion_id: int, d: int, prompted: bool, res, tokens: Tensor) -> None:
        feat = feature_array(self.model.encode_memory(res.mask_logits, tokens))
        pointer = feature_array(self.model.object_pointer(res.out_token))
        self.memory[lesion_id].push(MemoryEntry(
            slice_index=d, prompted=prompted, feature=feat, pointer=pointer))

    def _offer_exemplar(self, lesion_id: int, d: int, prompted: bool, res,
                        tokens: Tensor) -> None:
        if not (res.mask_logits.data > 0).any():
            return
        e = self.model.make_exemplar(lesion_id, d, prompted, res.mask_logits,
                                     tokens, res.out_token)
        e.z = feature_array(e.z)
        e.pointer = feature_array(e.pointer)
        self.exemplars.upsert(e, from_clicks=prompted)

    def apply_click(self, lesion_id: int, click: Click) -> ClickResult:
        """Re-decode the clicked slice from this lesion's full click set there."""
        check_click_bounds(click, self.volume.shape)
        self.clicks.setdefault(lesion_id, []).append(click)
        self.memory.setdefault(lesion_id, MemoryBank(self.model.cfg.memory_capacity))
        self.revision += 1

        d = click.slice
        tokens = self._tokens(d)
        with ad.no_grad():
            res = self._decode_prompted(lesion_id, d, tokens)
            self._remember(lesion_id, d, True, res, tokens)
            self._offer_exemplar(lesion_id, d, True, res, tokens)
        plane = self._plane(res.mask_logits)

        cached = self.instance_masks.get(lesion_id)
        if cached is None:
            cached = MaskVolume(np.zeros(self.volume.shape, dtype=np.uint8),
                                "instance", "prompted", self.revision)
            self.instance_masks[lesion_id] = cached
        cached.data[:, :, d] = plane
        cached.provenance = "prompted"
        cached.revision = self.revision

        warning = click.label == 1 and not plane.any()
        return ClickResult(mask=plane, warning=warning, revision=self.revision)

    def propagate_memory(self, lesion_id: int) -> MaskVolume:
        """Sweep the lesion outward from its first prompted slice.

        Each direction starts from the pinned prompted entries alone, so a
        repeated call reproduces the same mask volume bit for bit.
        """
        clicks = self.clicks.get(lesion_id)
        if not clicks:
            raise ValueError(f"propagate: lesion {lesion_id} has no prompted slice")
        prompted_slices = sorted({c.slice for c in clicks})
        anchor = prompted_slices[0]
        bank = self.memory[lesion_id]
        depth = self.volume.shape[2]
        self.revision += 1

        data = np.zeros(self.volume.shape, dtype=np.uint8)
        with ad.no_grad():
            for sweep in (range(anchor, depth), range(anchor - 1, -1, -1)):
                bank.clear_non_prompted()
                for d in sweep:
                    tokens = self._tokens(d)
                    prompted = d in prompted_slices
                    if prompted:
                        res = self._decode_prompted(lesion_id, d, tokens)
                    else:
                        entries = bank.ordered()
                        if not entries:
                            continue    # nothing to condition on: skip the slice
                        cond = self.model.condition_on_memory(tokens, entries)
                        ptr = bank.latest_pointer()
                        ptok = Tensor(np.asarray(ptr).reshape(1, -1)) if ptr is not None else None
                        res = self.model.decode(cond, pointer_tokens=ptok)
                    data[:, :, d] = self._plane(res.mask_logits)
                    self._remember(lesion_id, d, prompted, res, tokens)
                    if not prompted:
                        self._offer_exemplar(lesion_id, d, False, res, tokens)

        out = MaskVolume(data, "instance", "propagated", self.revision)
        self.instance_masks[lesion_id] = out
        return out

    # -- stage 2: exemplar-based semantic segmentation -----------------------------

    def propagate_exemplars(self, slice_order: list[int] | None = None) -> MaskVolume:
        """Decode every slice against the exemplar bank; read-only on all state."""
        depth = self.volume.shape[2]
        order = list(range(depth)) if slice_order is None else slice_order
        if sorted(order) != list(range(depth)):
            raise ValueError("slice_order must be a permutation of all slice indices")
        limit = self.model.cfg.exemplar_context_limit
        data = np.zeros(self.volume.shape, dtype=np.uint8)
        with ad.no_grad():
            for d in order:
                ctx = self.exemplars.select_context(d, limit)
                cond = self.model.condition_on_exemplars(self._tokens(d), ctx, d)
                res = self.model.decode(cond)
                data[:, :, d] = self._plane(res.mask_logits)
        self.semantic = MaskVolume(data, "semantic", "exemplar", self.revision)
        return self.semantic

    # -- snapshots -------------------------------------------------------------------

    def snapshot(self, path) -> None:
        arrays: dict[str, np.ndarray] = {}

        def strip(state: dict, prefix: str) -> dict:
            out = {"capacity": state["capacity"], "counter": state["counter"], "entries": []}
            for i, e in enumerate(state["entries"]):
                slim = {}
                for k, v in e.items():
                    if isinstance(v, np.ndarray):
                        key = f"{prefix}.{i}.{k}"
                        arrays[key] = v
                        slim[k] = {"__array__": key}
                    elif v is None or isinstance(v, (int, bool)):
                        slim[k] = v
                    else:
                        slim[k] = v
                out["entries"].append(slim)
            return out

        banks = {"exemplars": strip(self.exemplars.to_state(), "ex"),
                 "memory": {str(lid): strip(b.to_state(), f"mem{lid}")
                            for lid, b in self.memory.items()}}
        masks = {"instance": {str(lid): {"rle": encode_mask(m.data),
                                         "provenance": m.provenance,
                                         "revision": m.revision}
                              for lid, m in self.instance_masks.items()},
                 "semantic": None if self.semantic is None else
                             {"rle": encode_mask(self.semantic.data),
                              "provenance": self.semantic.provenance,
                              "revision": self.semantic.revision}}
        meta = {"version": SNAPSHOT_VERSION, "revision": self.revision,
                "shape": list(self.volume.shape), "spacing": list(self.volume.spacing)}
        clicks = {str(lid): [{"x": c.x, "y": c.y, "slice": c.slice, "label": c.label}
                             for c in cl] for lid, cl in self.clicks.items()}

        buf = io.BytesIO()
        np.savez(buf, **arrays)
        with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
            zf.writestr("meta.json", json.dumps(meta))
            zf.writestr("clicks.json", json.dumps(clicks))
            zf.writestr("banks.json", json.dumps(banks))
            zf.writestr("masks.json", json.dumps(masks))
            zf.writestr("arrays.npz", buf.getvalue())

    @classmethod
    def restore(cls, model: SliceSegmenter, volume: Volume, path,
                normalize: bool = True) -> "Session":
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            if meta["version"] != SNAPSHOT_VERSION:
                raise ValueError(f"snapshot version {meta['version']} unsupported")
            if list(volume.shape) != meta["shape"]:
                raise ValueError(f"snapshot was taken on shape {meta['shape']}, "
                                 f"volume has {list(volume.shape)}")
            clicks = json.loads(zf.read("clicks.json"))
            banks = json.loads(zf.read("banks.json"))
            masks = json.loads(zf.read("masks.json"))
            arrays = np.load(io.BytesIO(zf.read("arrays.npz")))

            def fatten(state: dict) -> dict:
                for e in state["entries"]:
                    for k, v in list(e.items()):
                        if isinstance(v, dict) and "__array__" in v:
                            e[k] = arrays[v["__array__"]]
                return state

            sess = cls(model, volume, normalize=normalize)
            sess.revision = meta["revision"]
            sess.clicks = {int(lid): [Click(**c) for c in cl] for lid, cl in clicks.items()}
            sess.exemplars = ExemplarBank.from_state(fatten(banks["exemplars"]))
            sess.memory = {int(lid): MemoryBank.from_state(fatten(st))
                           for lid, st in banks["memory"].items()}
            sess.instance_masks = {
                int(lid): MaskVolume(decode_mask(m["rle"]), "instance",
                                     m["provenance"], m["revision"])
                for lid, m in masks["instance"].items()}
            if masks["semantic"] is not None:
                m = masks["semantic"]
                sess.semantic = MaskVolume(decode_mask(m["rle"]), "semantic",
                                           m["provenance"], m["revision"])
            return sess


@dataclass
class FullInferenceResult:
    final: MaskVolume                # postprocessed union
    union_raw: np.ndarray            # pre-postprocessing union, uint8
    semantic: MaskVolume
    instance: dict[int, MaskVolume] = field(default_factory=dict)


def full_inference(model: SliceSegmenter, volume: Volume,
                   clicks_by_lesion: dict[int, list[Click]],
                   postproc: PostprocConfig | None = None) -> FullInferenceResult:
    """Run both stages on a fresh session and postprocess the merged mask.

    Lesions are visited in sorted id order; with an empty click set only
    Stage 2's no-exemplar fallback contributes.
    """
    postproc = postproc or PostprocConfig()
    sess = Session(model, volume)
    for lid in sorted(clicks_by_lesion):
        for c in clicks_by_lesion[lid]:
            sess.apply_click(lid, c)
        sess.propagate_memory(lid)
    semantic = sess.propagate_exemplars()

    union = semantic.data.copy()
    if postproc.include_stage1:
        for m in sess.instance_masks.values():
            union |= m.data
    final = remove_small_components(union > 0, volume.spacing,
                                    postproc.min_component_mm3,
                                    connectivity=postproc.connectivity)
    if postproc.fill_holes:
        final = fill_holes(final)
    out = MaskVolume(final.astype(np.uint8), "semantic", "exemplar", sess.revision)
    return FullInferenceResult(final=out, union_raw=union, semantic=semantic,
                               instance=dict(sess.instance_masks))


class SessionSegmenter:
    """Adapter giving the evaluation harness its begin/click/mask view.

    Propagates the clicked lesion after every click so lesion masks are
    always scan-level. `use_semantic=False` turns the adapter into the
    Stage-1-only baseline.
    """

    def __init__(self, model: SliceSegmenter, use_semantic: bool = True):
        self.model = model
        self.use_semantic = use_semantic
        self.session: Session | None = None

    def begin(self, volume: Volume) -> None:
        self.session = Session(self.model, volume)

    def add_click(self, lesion_id: int, click: Click) -> None:
        self.session.apply_click(lesion_id, click)
        self.session.propagate_memory(lesion_id)

    def lesion_mask(self, lesion_id: int) -> np.ndarray:
        cached = self.session.instance_masks.get(lesion_id)
        if cached is None:    # queried before the first click: nothing yet
            return np.zeros(self.session.volume.shape, dtype=np.uint8)
        return cached.data

    def semantic_mask(self) -> np.ndarray | None:
        if not self.use_semantic:
            return None
        return self.session.propagate_exemplars().data
