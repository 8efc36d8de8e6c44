"""Slice segmentation network with prompt, memory, and exemplar conditioning.

One shared mask decoder serves three decode modes that differ only in how
the slice embedding was conditioned and which tokens accompany it:

  * prompt decode: raw embedding + click tokens (user interaction);
  * memory decode: embedding conditioned on the lesion's memory entries,
    plus the lesion's object pointer token (slice-to-slice propagation);
  * exemplar decode: embedding conditioned on the exemplar bank with no
    sparse tokens at all (scan-wide semantic segmentation).

The exemplar conditioning stack is structurally identical to the memory
conditioning stack and starts as a bitwise copy of its parameters; the two
diverge with training. A learned no-exemplar token stands in for the
context when the bank is empty, trained to suppress output.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

import exemseg.autodiff as ad
from exemseg.autodiff import Tensor
from exemseg.banks import Exemplar, MemoryEntry
from exemseg.checkpoint import load_tensors, save_tensors
from exemseg.layers import (ConditioningStack, LayerNorm, Linear, Mlp,
                            MultiheadAttention, TransformerBlock, sincos_1d, sincos_2d)


@dataclass(frozen=True)
class ModelConfig:
    input_extent: int = 128        # square slice extent fed to the network
    patch: int = 16                # patch embed kernel and stride
    channels: int = 64             # token width; positional and pointer dims track this
    encoder_blocks: int = 4
    encoder_heads: int = 1
    conditioning_layers: int = 4   # depth of the memory/exemplar stacks
    conditioning_heads: int = 1
    decoder_layers: int = 2
    memory_capacity: int = 7       # pinned prompted entry + recent window
    exemplar_capacity: int = 10
    exemplar_context_limit: int | None = None   # None: whole bank
    slice_pos_in_exemplars: bool = False  # add a slice-offset encoding to exemplar tokens
    shared_conditioning: bool = False     # exemplar path reuses the memory stack
    mlp_ratio: int = 4
    rope_base: float = 10000.0
    seed: int = 0

    @property
    def grid(self) -> int:
        if self.input_extent % self.patch:
            raise ValueError(f"input extent {self.input_extent} not divisible by patch {self.patch}")
        return self.input_extent // self.patch


@dataclass
class DecodeResult:
    mask_logits: Tensor      # (S, S), foreground at logit > 0
    iou: Tensor              # scalar in [0, 1]
    object_logit: Tensor     # scalar, lesion-visibility logit
    out_token: Tensor        # (C,) decoder readout token


class ImageEncoder:
    def __init__(self, rng, cfg: ModelConfig):
        c, g = cfg.channels, cfg.grid
        self.cfg = cfg
        self.patch_w = ad.param(rng, (cfg.patch, cfg.patch, 1, c), std=1.0 / cfg.patch,
                                name="enc.patch.w")
        self.patch_b = ad.zeros_param((c,), name="enc.patch.b")
        self.pos = ad.param(rng, (g * g, c), std=0.02, name="enc.pos")
        self.blocks = [TransformerBlock(rng, c, cfg.encoder_heads, f"enc.block{i}",
                                        cfg.mlp_ratio, cfg.rope_base)
                       for i in range(cfg.encoder_blocks)]

    def __call__(self, image) -> Tensor:
        s = self.cfg.input_extent
        img = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=np.float32))
        if img.shape != (s, s):
            raise ValueError(f"encoder: expected ({s}, {s}) slice, got {img.shape}")
        x = ad.conv2d(ad.reshape(img, (s, s, 1)), self.patch_w, self.patch_b,
                      stride=self.cfg.patch)
        g = self.cfg.grid
        tokens = ad.add(ad.reshape(x, (g * g, self.cfg.channels)), self.pos)
        for block in self.blocks:
            tokens = block(tokens)
        return tokens

    def params(self) -> dict:
        out = {self.patch_w.name: self.patch_w, self.patch_b.name: self.patch_b,
               self.pos.name: self.pos}
        for b in self.blocks:
            out.update(b.params())
        return out


class PromptEncoder:
    """Click tokens: fixed positional encoding plus a learned label embedding."""

    def __init__(self, rng, cfg: ModelConfig):
        self.cfg = cfg
        self.label_embed = ad.param(rng, (2, cfg.channels), std=0.02, name="prompt.label")

    def __call__(self, clicks: list[tuple[float, float, int]]) -> Tensor:
        """clicks: (x, y, label) in model pixel coordinates."""
        if not clicks:
            raise ValueError("prompt encoder: empty click list")
        xs = np.array([c[0] for c in clicks], dtype=np.float64)
        ys = np.array([c[1] for c in clicks], dtype=np.float64)
        labels = np.array([c[2] for c in clicks], dtype=np.int64)
        if labels.min() < 0 or labels.max() > 1:
            raise ValueError(f"prompt encoder: labels must be 0/1, got {labels.tolist()}")
        pos = sincos_2d(ys, xs, self.cfg.channels, float(self.cfg.input_extent))
        return ad.add(Tensor(pos), ad.getitem(self.label_embed, labels))

    def params(self) -> dict:
        return {self.label_embed.name: self.label_embed}


class MaskDecoder:
    """Two-way token/grid transformer with an upsampling mask head."""

    def __init__(self, rng, cfg: ModelConfig):
        c, g = cfg.channels, cfg.grid
        self.cfg = cfg
        self.out_token = ad.param(rng, (1, c), std=0.02, name="dec.out_token")
        self.pointer_in = Linear(rng, c, c, "dec.pointer_in")
        centers = (np.arange(g) + 0.5) * cfg.patch
        yy, xx = np.meshgrid(centers, centers, indexing="ij")
        self.grid_pos = sincos_2d(yy.ravel(), xx.ravel(), c, float(cfg.input_extent))
        self.layers = []
        for i in range(cfg.decoder_layers):
            p = f"dec.l{i}"
            self.layers.append({
                "ln_t1": LayerNorm(c, f"{p}.ln_t1"),
                "t_self": MultiheadAttention(rng, c, cfg.conditioning_heads, f"{p}.t_self"),
                "ln_t2": LayerNorm(c, f"{p}.ln_t2"),
                "t2g": MultiheadAttention(rng, c, cfg.conditioning_heads, f"{p}.t2g"),
                "ln_g1": LayerNorm(c, f"{p}.ln_g1"),
                "g2t": MultiheadAttention(rng, c, cfg.conditioning_heads, f"{p}.g2t"),
                "ln_t3": LayerNorm(c, f"{p}.ln_t3"),
                "t_mlp": Mlp(rng, c, c * cfg.mlp_ratio, f"{p}.t_mlp"),
                "ln_g2": LayerNorm(c, f"{p}.ln_g2"),
                "g_mlp": Mlp(rng, c, c * cfg.mlp_ratio, f"{p}.g_mlp"),
            })
        stages = int(math.log2(cfg.patch))
        if 2 ** stages != cfg.patch:
            raise ValueError(f"decoder: patch {cfg.patch} must be a power of two")
        self.up_w, self.up_b = [], []
        ch = c
        for i in range(stages):
            nxt = max(ch // 2, 4)
            # kernel == stride: each output pixel draws on one input position
            self.up_w.append(ad.param(rng, (ch, 2, 2, nxt), std=ch ** -0.5,
                                      name=f"dec.up{i}.w"))
            self.up_b.append(ad.zeros_param((nxt,), name=f"dec.up{i}.b"))
            ch = nxt
        self.mask_channels = ch
        self.hyper = Mlp(rng, c, c, "dec.hyper")
        self.hyper_out = Linear(rng, c, ch, "dec.hyper_out")
        self.iou_head = Mlp(rng, c, c, "dec.iou")
        self.iou_out = Linear(rng, c, 1, "dec.iou_out")
        self.obj_head = Mlp(rng, c, c, "dec.obj")
        self.obj_out = Linear(rng, c, 1, "dec.obj_out")

    def __call__(self, grid_tokens: Tensor, prompt_tokens: Tensor | None = None,
                 pointer_tokens: Tensor | None = None) -> DecodeResult:
        c, g = self.cfg.channels, self.cfg.grid
        if grid_tokens.shape != (g * g, c):
            raise ValueError(f"decoder: embedding shape {grid_tokens.shape} != ({g * g}, {c})")
        parts = [self.out_token]
        if prompt_tokens is not None:
            parts.append(prompt_tokens)
        if pointer_tokens is not None:
            parts.append(self.pointer_in(pointer_tokens))
        tokens = ad.concat(parts, axis=0) if len(parts) > 1 else self.out_token
        grid = ad.add(grid_tokens, Tensor(self.grid_pos))
        for layer in self.layers:
            t = layer["ln_t1"](tokens)
            tokens = ad.add(tokens, layer["t_self"](t, t))
            tokens = ad.add(tokens, layer["t2g"](layer["ln_t2"](tokens), grid))
            grid = ad.add(grid, layer["g2t"](layer["ln_g1"](grid), tokens))
            tokens = ad.add(tokens, layer["t_mlp"](layer["ln_t3"](tokens)))
            grid = ad.add(grid, layer["g_mlp"](layer["ln_g2"](grid)))
        out_tok = ad.reshape(tokens[0:1], (c,))

        x = ad.reshape(grid, (g, g, c))
        for w, b in zip(self.up_w, self.up_b):
            x = ad.conv_transpose2d(x, w, b, stride=2)
            if w is not self.up_w[-1]:
                x = ad.gelu(x)
        vec = self.hyper_out(ad.gelu(self.hyper(ad.reshape(out_tok, (1, c)))))
        logits = ad.sum_(ad.mul(x, ad.reshape(vec, (self.mask_channels,))), axis=-1)

        tok_row = ad.reshape(out_tok, (1, c))
        iou = ad.sigmoid(ad.reshape(self.iou_out(ad.gelu(self.iou_head(tok_row))), ()))
        obj = ad.reshape(self.obj_out(ad.gelu(self.obj_head(tok_row))), ())
        return DecodeResult(mask_logits=logits, iou=iou, object_logit=obj, out_token=out_tok)

    def params(self) -> dict:
        out = {self.out_token.name: self.out_token}
        out.update(self.pointer_in.params())
        for layer in self.layers:
            for mod in layer.values():
                out.update(mod.params())
        for w, b in zip(self.up_w, self.up_b):
            out[w.name] = w
            out[b.name] = b
        for mod in (self.hyper, self.hyper_out, self.iou_head, self.iou_out,
                    self.obj_head, self.obj_out):
            out.update(mod.params())
        return out


class MemoryEncoder:
    """Fuse a predicted mask with the unconditioned slice embedding into a
    memory feature grid; the same feature doubles as the exemplar visual
    embedding."""

    def __init__(self, rng, cfg: ModelConfig):
        c = cfg.channels
        self.cfg = cfg
        self.mask_proj = Linear(rng, 1, c, "mem.mask_proj", std=0.5)
        self.conv1_w = ad.param(rng, (3, 3, c, c), std=(9 * c) ** -0.5, name="mem.conv1.w")
        self.conv1_b = ad.zeros_param((c,), name="mem.conv1.b")
        self.conv2_w = ad.param(rng, (3, 3, c, c), std=(9 * c) ** -0.5, name="mem.conv2.w")
        self.conv2_b = ad.zeros_param((c,), name="mem.conv2.b")

    def __call__(self, mask_logits: Tensor, grid_tokens: Tensor) -> Tensor:
        s, g, c = self.cfg.input_extent, self.cfg.grid, self.cfg.channels
        if mask_logits.shape != (s, s):
            raise ValueError(f"memory encoder: mask shape {mask_logits.shape} != ({s}, {s})")
        m = ad.avg_pool2d(ad.sigmoid(mask_logits), s // g)           # (g, g)
        m = self.mask_proj(ad.reshape(m, (g * g, 1)))
        x = ad.reshape(ad.add(m, grid_tokens), (g, g, c))
        x = ad.gelu(ad.conv2d(x, self.conv1_w, self.conv1_b, pad=1))
        x = ad.conv2d(x, self.conv2_w, self.conv2_b, pad=1)
        return ad.reshape(x, (g * g, c))

    def params(self) -> dict:
        return {**self.mask_proj.params(),
                self.conv1_w.name: self.conv1_w, self.conv1_b.name: self.conv1_b,
                self.conv2_w.name: self.conv2_w, self.conv2_b.name: self.conv2_b}


def _feature_tensor(feature) -> Tensor:
    return feature if isinstance(feature, Tensor) else Tensor(np.asarray(feature))


def feature_array(feature) -> np.ndarray:
    """Plain array view of a bank payload that may be a Tensor."""
    return feature.data if isinstance(feature, Tensor) else np.asarray(feature)


class SliceSegmenter:
    """The full network: encoder, prompt encoder, decoder, memory encoder,
    and the two conditioning stacks."""

    def __init__(self, cfg: ModelConfig):
        cfg.grid   # validate divisibility early
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        c = cfg.channels
        self.encoder = ImageEncoder(rng, cfg)
        self.prompts = PromptEncoder(rng, cfg)
        self.decoder = MaskDecoder(rng, cfg)
        self.memory_encoder = MemoryEncoder(rng, cfg)
        self.memory_stack = ConditioningStack(rng, c, cfg.conditioning_heads,
                                              cfg.conditioning_layers, "memattn",
                                              cfg.mlp_ratio, cfg.rope_base)
        self.rank_embed = ad.param(rng, (cfg.memory_capacity, c), std=0.02,
                                   name="mem.rank_embed")
        self.mem_flag_embed = ad.param(rng, (2, c), std=0.02, name="mem.flag_embed")
        self.ex_flag_embed = ad.param(rng, (2, c), std=0.02, name="ex.flag_embed")
        self.ex_pointer_proj = Linear(rng, c, c, "ex.pointer_proj")
        self.pointer_out = Linear(rng, c, c, "pointer_out")
        self.no_exemplar_token = ad.param(rng, (1, c), std=0.02, name="ex.empty_token")
        if cfg.shared_conditioning:
            self.exemplar_stack = self.memory_stack
        else:
            self.exemplar_stack = ConditioningStack(rng, c, cfg.conditioning_heads,
                                                    cfg.conditioning_layers, "exattn",
                                                    cfg.mlp_ratio, cfg.rope_base)
            self._copy_memory_stack_into_exemplar_stack()
        self._grid_positions = np.arange(cfg.grid * cfg.grid, dtype=np.float64)

    def _copy_memory_stack_into_exemplar_stack(self) -> None:
        src = self.memory_stack.params()
        dst = self.exemplar_stack.params()
        for name, p in dst.items():
            twin = "memattn" + name[len("exattn"):]
            p.data = src[twin].data.copy()

    # -- forward pieces --------------------------------------------------------

    def encode_slice(self, image) -> Tensor:
        return self.encoder(image)

    def encode_prompts(self, clicks: list[tuple[float, float, int]]) -> Tensor:
        return self.prompts(clicks)

    def decode(self, grid_tokens: Tensor, prompt_tokens: Tensor | None = None,
               pointer_tokens: Tensor | None = None) -> DecodeResult:
        return self.decoder(grid_tokens, prompt_tokens, pointer_tokens)

    def encode_memory(self, mask_logits: Tensor, grid_tokens: Tensor) -> Tensor:
        return self.memory_encoder(mask_logits, grid_tokens)

    def condition_on_memory(self, grid_tokens: Tensor, entries: list[MemoryEntry],
                            include_positional: bool = True) -> Tensor:
        """Cross-attend the slice embedding into the lesion's memory entries."""
        if not entries:
            raise ValueError("memory conditioning: empty entry list")
        ctx_parts = []
        for rank, e in enumerate(entries):
            feat = _feature_tensor(e.feature)
            tok = feat
            if include_positional:
                r = min(rank, self.cfg.memory_capacity - 1)
                tok = ad.add(tok, self.rank_embed[r:r + 1])
            tok = ad.add(tok, self.mem_flag_embed[int(e.prompted):int(e.prompted) + 1])
            ctx_parts.append(tok)
        ctx = ad.concat(ctx_parts, axis=0) if len(ctx_parts) > 1 else ctx_parts[0]
        return self.memory_stack(grid_tokens, ctx, self._grid_positions)

    def condition_on_exemplars(self, grid_tokens: Tensor, exemplars: list[Exemplar],
                               current_slice: int) -> Tensor:
        """Cross-attend the slice embedding into exemplar tokens; with an
        empty context the learned no-exemplar token is the sole key."""
        if exemplars:
            ctx_parts = []
            for e in exemplars:
                tok = ad.add(_feature_tensor(e.z), ad.reshape(_feature_tensor(e.pos),
                                                              (1, self.cfg.channels)))
                tok = ad.add(tok, self.ex_flag_embed[int(e.prompted):int(e.prompted) + 1])
                ptr = ad.reshape(_feature_tensor(e.pointer), (1, self.cfg.channels))
                tok = ad.add(tok, self.ex_pointer_proj(ptr))
                if self.cfg.slice_pos_in_exemplars:
                    offset = sincos_1d([e.slice_index - current_slice], self.cfg.channels)
                    tok = ad.add(tok, Tensor(offset))
                ctx_parts.append(tok)
            ctx = ad.concat(ctx_parts, axis=0) if len(ctx_parts) > 1 else ctx_parts[0]
        else:
            ctx = self.no_exemplar_token
        return self.exemplar_stack(grid_tokens, ctx, self._grid_positions)

    def object_pointer(self, out_token: Tensor) -> Tensor:
        """Project the decoder readout into the object pointer space."""
        return ad.reshape(self.pointer_out(ad.reshape(out_token, (1, self.cfg.channels))),
                          (self.cfg.channels,))

    def make_exemplar(self, lesion_id: int, slice_index: int, prompted: bool,
                      mask_logits: Tensor, unconditioned_tokens: Tensor,
                      out_token: Tensor) -> Exemplar:
        """Build a bank record from a decoded, non-empty slice mask."""
        binary = mask_logits.data > 0
        if not binary.any():
            raise ValueError("make_exemplar: mask is empty after binarization")
        ys, xs = np.nonzero(binary)
        pos = sincos_2d([float(ys.mean())], [float(xs.mean())], self.cfg.channels,
                        float(self.cfg.input_extent))[0]
        z = self.encode_memory(mask_logits, unconditioned_tokens)
        return Exemplar(lesion_id=lesion_id, slice_index=slice_index, prompted=prompted,
                        z=z, pos=pos, pointer=self.object_pointer(out_token))

    # -- parameter plumbing ----------------------------------------------------

    def params(self) -> dict:
        out = {}
        for mod in (self.encoder, self.prompts, self.decoder, self.memory_encoder,
                    self.memory_stack, self.ex_pointer_proj, self.pointer_out):
            out.update(mod.params())
        if not self.cfg.shared_conditioning:
            out.update(self.exemplar_stack.params())
        for p in (self.rank_embed, self.mem_flag_embed, self.ex_flag_embed,
                  self.no_exemplar_token):
            out[p.name] = p
        return out

    def save(self, path) -> None:
        manifest = {"kind": "slice-segmenter", "config": asdict(self.cfg)}
        save_tensors(path, {k: v.data for k, v in self.params().items()}, manifest)

    @classmethod
    def load(cls, path) -> "SliceSegmenter":
        tensors, manifest = load_tensors(path)
        if manifest.get("kind") != "slice-segmenter":
            raise ValueError(f"checkpoint manifest kind {manifest.get('kind')!r} "
                             "is not a slice-segmenter")
        model = cls(ModelConfig(**manifest["config"]))
        params = model.params()
        missing = set(params) - set(tensors)
        extra = set(tensors) - set(params)
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing={sorted(missing)[:4]} "
                             f"extra={sorted(extra)[:4]}")
        for name, p in params.items():
            arr = tensors[name]
            if arr.shape != p.data.shape:
                raise ValueError(f"checkpoint: {name} has shape {arr.shape}, "
                                 f"model expects {p.data.shape}")
            p.data = arr.astype(p.data.dtype)
        return model
