"""Small neural building blocks over the autodiff tensor type.

Every layer exposes `params()` returning a flat name->Tensor mapping so
models can be checkpointed and optimized without framework machinery.
"""

from __future__ import annotations

import numpy as np

import exemseg.autodiff as ad
from exemseg.autodiff import Tensor


def sincos_1d(positions: np.ndarray, dim: int, scale: float = 1.0) -> np.ndarray:
    """Fixed sinusoidal encoding of scalar positions, shape (n, dim)."""
    if dim % 2:
        raise ValueError(f"sincos_1d: dim must be even, got {dim}")
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 1) * scale
    half = dim // 2
    freqs = 10000.0 ** (-np.arange(half) / max(half - 1, 1))
    ang = pos * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)


def sincos_2d(ys: np.ndarray, xs: np.ndarray, dim: int, extent: float) -> np.ndarray:
    """Fixed 2D positional encoding of (y, x) points normalized by extent."""
    if dim % 4:
        raise ValueError(f"sincos_2d: dim must be divisible by 4, got {dim}")
    ys = np.asarray(ys, dtype=np.float64) / extent
    xs = np.asarray(xs, dtype=np.float64) / extent
    half = dim // 2
    return np.concatenate([sincos_1d(ys * 2 * np.pi, half),
                           sincos_1d(xs * 2 * np.pi, half)], axis=1)


class Linear:
    def __init__(self, rng, din: int, dout: int, name: str, std: float | None = None):
        # fan-in scaling keeps activation variance flat through the depth
        self.w = ad.param(rng, (din, dout), std=std if std is not None else din ** -0.5,
                          name=f"{name}.w")
        self.b = ad.zeros_param((dout,), name=f"{name}.b")
        self.name = name

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.w), self.b)

    def params(self) -> dict:
        return {self.w.name: self.w, self.b.name: self.b}


class LayerNorm:
    def __init__(self, dim: int, name: str):
        self.gamma = Tensor(np.ones(dim, dtype=np.float32), requires_grad=True,
                            name=f"{name}.gamma")
        self.beta = ad.zeros_param((dim,), name=f"{name}.beta")
        self.name = name

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta)

    def params(self) -> dict:
        return {self.gamma.name: self.gamma, self.beta.name: self.beta}


class Mlp:
    def __init__(self, rng, dim: int, hidden: int, name: str):
        self.fc1 = Linear(rng, dim, hidden, f"{name}.fc1")
        self.fc2 = Linear(rng, hidden, dim, f"{name}.fc2")

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))

    def params(self) -> dict:
        return {**self.fc1.params(), **self.fc2.params()}


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, d = x.shape
    if d % heads:
        raise ValueError(f"attention: dim {d} not divisible by {heads} heads")
    return ad.transpose(ad.reshape(x, (n, heads, d // heads)), (1, 0, 2))


def _merge_heads(x: Tensor) -> Tensor:
    h, n, dh = x.shape
    return ad.reshape(ad.transpose(x, (1, 0, 2)), (n, h * dh))


class MultiheadAttention:
    """Projected scaled dot-product attention with optional rotary positions."""

    def __init__(self, rng, dim: int, heads: int, name: str, rope_base: float = 10000.0):
        self.heads = heads
        self.rope_base = rope_base
        self.q = Linear(rng, dim, dim, f"{name}.q")
        self.k = Linear(rng, dim, dim, f"{name}.k")
        self.v = Linear(rng, dim, dim, f"{name}.v")
        self.out = Linear(rng, dim, dim, f"{name}.out")

    def __call__(self, x: Tensor, ctx: Tensor, x_pos: np.ndarray | None = None,
                 ctx_pos: np.ndarray | None = None) -> Tensor:
        q = _split_heads(self.q(x), self.heads)
        k = _split_heads(self.k(ctx), self.heads)
        v = _split_heads(self.v(ctx), self.heads)
        rp = None
        if x_pos is not None:
            if ctx_pos is None:
                raise ValueError("attention: x_pos given without ctx_pos")
            rp = (x_pos, ctx_pos)
        out = ad.attention(q, k, v, rope_positions=rp, base=self.rope_base)
        return self.out(_merge_heads(out))

    def params(self) -> dict:
        return {**self.q.params(), **self.k.params(), **self.v.params(),
                **self.out.params()}


class TransformerBlock:
    """Pre-norm self-attention + MLP."""

    def __init__(self, rng, dim: int, heads: int, name: str, mlp_ratio: int = 4,
                 rope_base: float = 10000.0):
        self.ln1 = LayerNorm(dim, f"{name}.ln1")
        self.attn = MultiheadAttention(rng, dim, heads, f"{name}.attn", rope_base)
        self.ln2 = LayerNorm(dim, f"{name}.ln2")
        self.mlp = Mlp(rng, dim, dim * mlp_ratio, f"{name}.mlp")

    def __call__(self, x: Tensor, positions: np.ndarray | None = None) -> Tensor:
        h = self.ln1(x)
        x = ad.add(x, self.attn(h, h, positions, positions))
        x = ad.add(x, self.mlp(self.ln2(x)))
        return x

    def params(self) -> dict:
        return {**self.ln1.params(), **self.attn.params(),
                **self.ln2.params(), **self.mlp.params()}


class ConditioningLayer:
    """One layer of the conditioning stack: rotary self-attention on the
    query grid, cross-attention into context tokens, then an MLP."""

    def __init__(self, rng, dim: int, heads: int, name: str, mlp_ratio: int = 4,
                 rope_base: float = 10000.0):
        self.ln_self = LayerNorm(dim, f"{name}.ln_self")
        self.self_attn = MultiheadAttention(rng, dim, heads, f"{name}.self", rope_base)
        self.ln_cross = LayerNorm(dim, f"{name}.ln_cross")
        self.cross_attn = MultiheadAttention(rng, dim, heads, f"{name}.cross", rope_base)
        self.ln_mlp = LayerNorm(dim, f"{name}.ln_mlp")
        self.mlp = Mlp(rng, dim, dim * mlp_ratio, f"{name}.mlp")

    def __call__(self, x: Tensor, ctx: Tensor, positions: np.ndarray) -> Tensor:
        h = self.ln_self(x)
        x = ad.add(x, self.self_attn(h, h, positions, positions))
        x = ad.add(x, self.cross_attn(self.ln_cross(x), ctx))
        x = ad.add(x, self.mlp(self.ln_mlp(x)))
        return x

    def params(self) -> dict:
        return {**self.ln_self.params(), **self.self_attn.params(),
                **self.ln_cross.params(), **self.cross_attn.params(),
                **self.ln_mlp.params(), **self.mlp.params()}


class ConditioningStack:
    """Rotary transformer layers that condition a token grid on a set of
    context tokens (segmentation memory or exemplars)."""

    def __init__(self, rng, dim: int, heads: int, layers: int, name: str,
                 mlp_ratio: int = 4, rope_base: float = 10000.0):
        self.layers = [ConditioningLayer(rng, dim, heads, f"{name}.l{i}", mlp_ratio, rope_base)
                       for i in range(layers)]
        self.ln_out = LayerNorm(dim, f"{name}.ln_out")

    def __call__(self, x: Tensor, ctx: Tensor, positions: np.ndarray) -> Tensor:
        for layer in self.layers:
            x = layer(x, ctx, positions)
        return self.ln_out(x)

    def params(self) -> dict:
        out = {}
        for layer in self.layers:
            out.update(layer.params())
        out.update(self.ln_out.params())
        return out
