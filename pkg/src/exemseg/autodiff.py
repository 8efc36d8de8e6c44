"""Minimal reverse-mode automatic differentiation over numpy arrays.

Scope: exactly the dense ops needed by a small attention-based
encoder/decoder (matmul, elementwise arithmetic, reductions, reshapes,
softmax, layer norm, GELU/ReLU/sigmoid, 2D convolution and transposed
convolution, slicing/concat, rotary position embedding, scaled dot-product
attention). Arrays stay in whatever float dtype they were created with;
float32 is the working precision, float64 is used by gradient checks.

Graph edges are recorded as backward closures on each output tensor and
replayed in topological order, so `loss.backward()` is the whole API for
differentiation. Wrap inference code in `no_grad()` to skip graph taping.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf, expit

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph taping inside the block. Nestable."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """Array node in the autodiff graph.

    `data` is always a numpy float array. `grad` is filled (same shape,
    same dtype) by `backward()` for every tensor with requires_grad=True
    that participated in the graph.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- graph replay ---------------------------------------------------------

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable leaf."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / other)
        return mul(self, pow_(other, -1.0))

    def __rtruediv__(self, other):
        return mul(pow_(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_(self, p)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def param(rng: np.random.Generator, shape: Sequence[int], std: float = 0.02,
          name: str | None = None, dtype=np.float32) -> Tensor:
    """Trainable tensor initialized from N(0, std^2)."""
    data = (rng.standard_normal(shape) * std).astype(dtype)
    return Tensor(data, requires_grad=True, name=name)


def zeros_param(shape: Sequence[int], name: str | None = None, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, name=name)


def _make(out_data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad or p._parents for p in parents):
        return Tensor(out_data, requires_grad=True, _parents=parents, _backward=backward)
    return Tensor(out_data)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- arithmetic ------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), backward)


def pow_(a, p: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** p

    def backward(g):
        _accum(a, _unbroadcast(g * p * a.data ** (p - 1.0), a.shape))

    return _make(out, (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        _accum(a, _unbroadcast(ga, a.shape))
        _accum(b, _unbroadcast(gb, b.shape))

    return _make(out, (a, b), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def backward(g):
        _accum(a, g * out)

    return _make(out, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    out = np.log(a.data)

    def backward(g):
        _accum(a, g / a.data)

    return _make(out, (a,), backward)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def backward(g):
        _accum(a, g * 0.5 / out)

    return _make(out, (a,), backward)


def abs_(a) -> Tensor:
    a = as_tensor(a)
    out = np.abs(a.data)

    def backward(g):
        _accum(a, g * np.sign(a.data))

    return _make(out, (a,), backward)


# -- nonlinearities ----------------------------------------------------------------


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def backward(g):
        _accum(a, g * (a.data > 0))

    return _make(out, (a,), backward)


def gelu(a) -> Tensor:
    """Exact GELU: x * Phi(x) with the Gaussian CDF."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    out = x * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        _accum(a, g * (cdf + x * pdf))

    return _make(out, (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = expit(a.data)

    def backward(g):
        _accum(a, g * out * (1.0 - out))

    return _make(out, (a,), backward)


def softplus(a) -> Tensor:
    """log(1 + exp(x)), overflow-safe."""
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)

    def backward(g):
        _accum(a, g * expit(a.data))

    return _make(out, (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accum(a, out * (g - dot))

    return _make(out, (a,), backward)


# -- reductions and shape ops --------------------------------------------------------


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape).copy() if np.ndim(g) else np.full(a.shape, g, dtype=a.dtype))
            return
        gg = g
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            for ax in sorted(ax % a.ndim for ax in axes):
                gg = np.expand_dims(gg, ax)
        _accum(a, np.broadcast_to(gg, a.shape).copy())

    return _make(np.asarray(out), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.shape[ax]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.shape))

    return _make(out, (a,), backward)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)

    def backward(g):
        if axes is None:
            _accum(a, np.transpose(g))
        else:
            inv = np.argsort(axes)
            _accum(a, np.transpose(g, inv))

    return _make(out, (a,), backward)


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    out = a.data[key]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        _accum(a, full)

    return _make(np.asarray(out), (a,), backward)


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(p, g[tuple(idx)])

    return _make(out, tuple(parts), backward)


def stack(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    ax = axis % (parts[0].ndim + 1)
    expanded = [reshape(p, p.shape[:ax] + (1,) + p.shape[ax:]) for p in parts]
    return concat(expanded, axis=ax)


# -- normalization -----------------------------------------------------------------


def layer_norm(x, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x = as_tensor(x)
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ValueError(
            f"layer_norm: gamma/beta shapes {gamma.shape}/{beta.shape} "
            f"do not match feature dim of {x.shape}")
    mu = mean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = mean(mul(centered, centered), axis=-1, keepdims=True)
    inv = pow_(add(var, eps), -0.5)
    return add(mul(mul(centered, inv), gamma), beta)


# -- convolutions ---------------------------------------------------------------------


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2D convolution, channels-last.

    x: (H, W, Cin), w: (kh, kw, Cin, Cout), b: (Cout,) or None.
    Output: (Ho, Wo, Cout) with Ho = (H + 2*pad - kh)//stride + 1.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 4 or x.shape[2] != w.shape[2]:
        raise ValueError(f"conv2d: incompatible shapes x={x.shape} w={w.shape}")
    kh, kw, cin, cout = w.shape
    xp = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0))) if pad else x.data
    hp, wp = xp.shape[0], xp.shape[1]
    if hp < kh or wp < kw:
        raise ValueError(f"conv2d: kernel {w.shape[:2]} larger than padded input ({hp}, {wp})")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(0, 1))
    win = win[::stride, ::stride]                      # (Ho, Wo, Cin, kh, kw)
    cols = win.transpose(0, 1, 3, 4, 2).reshape(ho * wo, kh * kw * cin)
    w2 = w.data.reshape(kh * kw * cin, cout)
    out = cols @ w2
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
    out = out.reshape(ho, wo, cout)

    def backward(g):
        g2 = g.reshape(ho * wo, cout)
        _accum(w, (cols.T @ g2).reshape(w.shape))
        if b is not None:
            _accum(b, g2.sum(axis=0))
        dcols = (g2 @ w2.T).reshape(ho, wo, kh, kw, cin)
        dxp = np.zeros_like(xp)
        for di in range(kh):
            for dj in range(kw):
                dxp[di:di + ho * stride:stride, dj:dj + wo * stride:stride] += dcols[:, :, di, dj]
        _accum(x, dxp[pad:hp - pad, pad:wp - pad] if pad else dxp)

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, parents, backward)


def conv_transpose2d(x, w, b=None, stride: int = 2) -> Tensor:
    """Transposed convolution with kernel == stride (non-overlapping upsample).

    x: (h, w, Cin), w: (Cin, stride, stride, Cout). Output (h*s, w*s, Cout).
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 4 or w.shape[1] != stride or w.shape[2] != stride \
            or x.shape[2] != w.shape[0]:
        raise ValueError(f"conv_transpose2d: incompatible shapes x={x.shape} w={w.shape} stride={stride}")
    h, ww, cin = x.shape
    cout = w.shape[3]
    x2 = x.data.reshape(h * ww, cin)
    w2 = w.data.reshape(cin, stride * stride * cout)
    out = (x2 @ w2).reshape(h, ww, stride, stride, cout)
    out = out.transpose(0, 2, 1, 3, 4).reshape(h * stride, ww * stride, cout)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data

    def backward(g):
        g5 = g.reshape(h, stride, ww, stride, cout).transpose(0, 2, 1, 3, 4)
        g2 = g5.reshape(h * ww, stride * stride * cout)
        _accum(w, (x2.T @ g2).reshape(w.shape))
        if b is not None:
            _accum(b, g.sum(axis=(0, 1)))
        _accum(x, (g2 @ w2.T).reshape(x.shape))

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, parents, backward)


def avg_pool2d(x, factor: int) -> Tensor:
    """Non-overlapping mean pooling on (H, W) or (H, W, C)."""
    x = as_tensor(x)
    h, w = x.shape[0], x.shape[1]
    if h % factor or w % factor:
        raise ValueError(f"avg_pool2d: extents {(h, w)} not divisible by {factor}")
    rest = x.shape[2:]
    r = reshape(x, (h // factor, factor, w // factor, factor) + rest)
    return mean(r, axis=(1, 3))


# -- rotary position embedding and attention ---------------------------------------------


def rope_angles(positions: np.ndarray, dim: int, base: float = 10000.0) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables for rotary embedding, shape (n, dim//2)."""
    if dim % 2:
        raise ValueError(f"rope: head dim must be even, got {dim}")
    half = dim // 2
    freqs = base ** (-np.arange(half, dtype=np.float64) * 2.0 / dim)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * freqs[None, :]
    return np.cos(ang), np.sin(ang)


def rope(x, positions, base: float = 10000.0) -> Tensor:
    """Rotate consecutive feature pairs of x (..., n, d) by position-dependent angles.

    With all positions zero this is the identity.
    """
    x = as_tensor(x)
    n, d = x.shape[-2], x.shape[-1]
    positions = np.asarray(positions)
    if positions.shape != (n,):
        raise ValueError(f"rope: positions shape {positions.shape} does not match token count {n}")
    cos, sin = rope_angles(positions, d, base)
    cos = cos.astype(x.dtype)
    sin = sin.astype(x.dtype)
    xe = x[..., 0::2]
    xo = x[..., 1::2]
    ye = xe * cos - xo * sin
    yo = xe * sin + xo * cos
    pair = stack([ye, yo], axis=-1)                  # (..., n, d//2, 2)
    return reshape(pair, x.shape)


def attention(q, k, v, rope_positions: tuple | None = None, base: float = 10000.0) -> Tensor:
    """Scaled dot-product attention: softmax(q k^T / sqrt(d)) v.

    q: (..., nq, d), k: (..., nk, d), v: (..., nk, dv). If `rope_positions`
    is given as (q_pos, k_pos), rotary embedding is applied to q and k
    before the score computation.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"attention: q/k feature dims differ: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"attention: k/v token counts differ: {k.shape} vs {v.shape}")
    if rope_positions is not None:
        q_pos, k_pos = rope_positions
        q = rope(q, q_pos, base)
        k = rope(k, k_pos, base)
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = mul(matmul(q, k.swapaxes(-1, -2)), scale)
    return matmul(softmax(scores, axis=-1), v)
