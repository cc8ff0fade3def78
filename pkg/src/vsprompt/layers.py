"""Recognizer layers: convolution with learnable padding rings, attention, norms."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import (
    ShapeError,
    Tensor,
    add,
    matmul,
    pad_zero,
    record,
    relu,
    reshape,
    scale,
    softmax,
    transpose,
)


def pad_region_size(H: int, W: int, L: int, R: int, U: int, B: int) -> int:
    """Number of border cells added around an ``H x W`` map."""
    return H * (L + R) + W * (U + B) + (L + R) * (U + B)


@lru_cache(maxsize=None)
def border_indices(H: int, W: int, L: int, R: int, U: int, B: int) -> np.ndarray:
    """Flat positions in the padded ``(H+U+B) x (W+L+R)`` grid, in ring order.

    Ring order: the top rows, then the bottom rows (both full padded width),
    then the left columns of the middle band, then its right columns. Each
    block is walked row-major.
    """
    Hp, Wp = H + U + B, W + L + R
    grid = np.arange(Hp * Wp).reshape(Hp, Wp)
    parts = [
        grid[:U, :].ravel(),
        grid[U + H:, :].ravel(),
        grid[U:U + H, :L].ravel(),
        grid[U:U + H, L + W:].ravel(),
    ]
    idx = np.concatenate(parts)
    idx.flags.writeable = False
    return idx


@dataclass
class PaddingSpec:
    left: int = 0
    right: int = 0
    top: int = 0
    bottom: int = 0
    ring: Tensor | None = None

    def __post_init__(self):
        if min(self.left, self.right, self.top, self.bottom) < 0:
            raise ValueError(f"padding sizes must be non-negative, got {self.sizes}")

    @property
    def sizes(self) -> tuple[int, int, int, int]:
        return (self.left, self.right, self.top, self.bottom)

    @property
    def mode(self) -> str:
        return "zero" if self.ring is None else "prompt"

    @property
    def is_padded(self) -> bool:
        return any(self.sizes)

    def region_size(self, H: int, W: int) -> int:
        return pad_region_size(H, W, *self.sizes)

    def to_json(self) -> str:
        d = {"left": self.left, "right": self.right, "top": self.top, "bottom": self.bottom,
             "mode": self.mode}
        if self.ring is not None:
            d["ring_shape"] = list(self.ring.shape)
            d["ring"] = self.ring.data.ravel().tolist()
        return json.dumps(d)

    @classmethod
    def from_json(cls, text: str) -> "PaddingSpec":
        d = json.loads(text)
        ring = None
        if d["mode"] == "prompt":
            ring = Tensor(np.array(d["ring"], dtype=np.float64).reshape(d["ring_shape"]))
        return cls(d["left"], d["right"], d["top"], d["bottom"], ring)


def apply_padding(feature: Tensor, spec: PaddingSpec, channel_axis: int = -3) -> Tensor:
    """Pad the last two (spatial) axes with zeros or with the PaddingSpec's prompt ring.

    The ring has shape ``[S, C]`` and is shared by every position along the
    leading axes (batch, time).
    """
    L, R, U, B = spec.sizes
    H, W = feature.shape[-2:]
    if spec.ring is None:
        widths = [(0, 0)] * (feature.ndim - 2) + [(U, B), (L, R)]
        return pad_zero(feature, widths) if spec.is_padded else feature

    cax = channel_axis % feature.ndim
    if cax >= feature.ndim - 2:
        raise ShapeError("channel axis must precede the spatial axes")
    C = feature.shape[cax]
    S = pad_region_size(H, W, L, R, U, B)
    ring = spec.ring
    if ring.shape != (S, C):
        raise ShapeError(f"padding ring has shape {ring.shape}, expected ({S}, {C}) "
                         f"from pad_region_size({H}, {W}, {L}, {R}, {U}, {B}) = {S}")
    idx = border_indices(H, W, L, R, U, B)
    Hp, Wp = H + U + B, W + L + R
    lead = feature.shape[:-2]
    # ring.T laid out as [C, 1, ..., 1, S] to broadcast over axes between C and space
    between = feature.ndim - 2 - cax - 1
    ring_view_shape = (C,) + (1,) * between + (S,)
    sum_axes = tuple(i for i in range(feature.ndim - 2) if i != cax)

    out = np.zeros(lead + (Hp, Wp))
    out[..., U:U + H, L:L + W] = feature.data
    flat = out.reshape(lead + (Hp * Wp,))
    flat[..., idx] = ring.data.T.reshape(ring_view_shape)

    def _back(g):
        g_feat = g[..., U:U + H, L:L + W]
        g_border = g.reshape(lead + (Hp * Wp,))[..., idx]
        g_ring = g_border.sum(axis=sum_axes)  # [C, S]
        return g_feat, g_ring.T

    return record(out, (feature, ring), _back)


def conv_valid(x: Tensor, w: Tensor, b: Tensor | None, stride) -> Tensor:
    """Unpadded n-d cross-correlation; ``x`` is ``[N, C, *space]``, ``w`` is ``[O, C, *kernel]``."""
    nd = w.ndim - 2
    if x.ndim != nd + 2:
        raise ShapeError(f"conv input {x.shape} does not match {nd}-d kernel {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv channel mismatch: input {x.shape} vs kernel {w.shape}")
    stride = tuple(stride) if np.iterable(stride) else (stride,) * nd
    ksz = w.shape[2:]
    space = x.shape[2:]
    if any(s < k for s, k in zip(space, ksz)):
        raise ShapeError(f"conv input spatial size {space} smaller than kernel {ksz}")
    out_sz = tuple((s - k) // st + 1 for s, k, st in zip(space, ksz, stride))

    xd, wd = x.data, w.data
    win = sliding_window_view(xd, ksz, axis=tuple(range(2, 2 + nd)))
    win = win[(slice(None), slice(None)) + tuple(slice(None, None, st) for st in stride)]
    # win: [N, C, *out, *k]
    c_and_k = (1,) + tuple(range(2 + nd, 2 + 2 * nd))
    out = np.tensordot(win, wd, axes=(c_and_k, (1,) + tuple(range(2, 2 + nd))))  # [N, *out, O]
    out = np.moveaxis(out, -1, 1)
    if b is not None:
        out = out + b.data.reshape((1, -1) + (1,) * nd)
    inputs = (x, w) if b is None else (x, w, b)

    def _back(g):
        # g: [N, O, *out]
        gw = np.tensordot(g, win, axes=((0,) + tuple(range(2, 2 + nd)), (0,) + tuple(range(2, 2 + nd))))
        gx = None
        if x.requires_grad:
            gx = np.zeros_like(xd)
            gcols = np.tensordot(g, wd, axes=((1,), (0,)))  # [N, *out, C, *k]
            gcols = np.moveaxis(gcols, 1 + nd, 1)  # [N, C, *out, *k]
            for koff in np.ndindex(*ksz):
                sl = tuple(slice(k, k + st * (o - 1) + 1, st) for k, st, o in zip(koff, stride, out_sz))
                gx[(slice(None), slice(None)) + sl] += gcols[(Ellipsis,) + koff]
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0,) + tuple(range(2, 2 + nd))))
        return tuple(grads)

    return record(out, inputs, _back)


@dataclass
class ConvLayer:
    kernel: Tensor
    bias: Tensor
    stride: tuple[int, ...]
    padding: PaddingSpec = field(default_factory=PaddingSpec)
    layer_index: int = 0
    temporal_pad: int = 0

    @property
    def is_3d(self) -> bool:
        return self.kernel.ndim == 5

    def output_hw(self, H: int, W: int) -> tuple[int, int]:
        L, R, U, B = self.padding.sizes
        kh, kw = self.kernel.shape[-2:]
        sh, sw = self.stride[-2:]
        return (H + U + B - kh) // sh + 1, (W + L + R - kw) // sw + 1


def conv2d_forward(x: Tensor, layer: ConvLayer) -> Tensor:
    """``x``: ``[B, C, H, W]``."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects [B, C, H, W], got {x.shape}")
    return conv_valid(apply_padding(x, layer.padding, channel_axis=1), layer.kernel, layer.bias, layer.stride)


def conv3d_forward(x: Tensor, layer: ConvLayer) -> Tensor:
    """``x``: ``[B, C, T, H, W]``. Spatial padding follows the layer's PaddingSpec; time padding is zero."""
    if x.ndim != 5:
        raise ShapeError(f"conv3d expects [B, C, T, H, W], got {x.shape}")
    h = apply_padding(x, layer.padding, channel_axis=1)
    if layer.temporal_pad:
        p = layer.temporal_pad
        h = pad_zero(h, [(0, 0), (0, 0), (p, p), (0, 0), (0, 0)])
    return conv_valid(h, layer.kernel, layer.bias, layer.stride)


# ---------------------------------------------------------------- dense layers

def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x[..., Din] @ W[Din, Dout] + b``."""
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {W.shape}")
    y = matmul(x, W) if x.ndim >= 2 else reshape(matmul(reshape(x, (1, -1)), W), (W.shape[1],))
    return y if b is None else add(y, b)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    if gamma.shape != (x.shape[-1],) or beta.shape != gamma.shape:
        raise ShapeError(f"layer_norm: input {x.shape} vs gamma {gamma.shape} / beta {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data
    lead = tuple(range(xd.ndim - 1))

    def _back(g):
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return record(out, (x, gamma, beta), _back)


def positional_encoding(T: int, D: int) -> np.ndarray:
    """Fixed sinusoidal table ``[T, D]``: sines in the first half, cosines in the second."""
    half = D // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    ang = np.arange(T)[:, None] * freqs[None, :]
    pe = np.zeros((T, D))
    pe[:, :half] = np.sin(ang)
    pe[:, half:2 * half] = np.cos(ang)
    return pe


# ---------------------------------------------------------------- transformer

_BLOCK_PARAMS = ("ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                 "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")


@dataclass
class TransformerBlock:
    heads: int
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @property
    def dim(self) -> int:
        return self.wq.shape[0]

    def params(self) -> dict[str, Tensor]:
        return {k: getattr(self, k) for k in _BLOCK_PARAMS}

    @classmethod
    def init(cls, dim: int, heads: int, ffn_dim: int, rng: np.random.Generator) -> "TransformerBlock":
        def xavier(n_in, n_out):
            bound = math.sqrt(6.0 / (n_in + n_out))
            return Tensor(rng.uniform(-bound, bound, (n_in, n_out)))

        z = lambda n: Tensor(np.zeros(n))
        return cls(
            heads=heads,
            ln1_g=Tensor(np.ones(dim)), ln1_b=z(dim),
            wq=xavier(dim, dim), bq=z(dim),
            wk=xavier(dim, dim), bk=z(dim),
            wv=xavier(dim, dim), bv=z(dim),
            wo=xavier(dim, dim), bo=z(dim),
            ln2_g=Tensor(np.ones(dim)), ln2_b=z(dim),
            w1=xavier(dim, ffn_dim), b1=z(ffn_dim),
            w2=xavier(ffn_dim, dim), b2=z(dim),
        )


def self_attention(h: Tensor, block: TransformerBlock) -> tuple[Tensor, Tensor]:
    """Multi-head attention over ``h[..., T, D]``; returns (output, weights[..., heads, T, T])."""
    D = block.dim
    if h.shape[-1] != D:
        raise ShapeError(f"attention: input {h.shape} does not match model dim {D}")
    if D % block.heads:
        raise ShapeError(f"model dim {D} is not divisible by {block.heads} heads")
    T = h.shape[-2]
    lead = h.shape[:-2]
    dk = D // block.heads
    nl = len(lead)

    def split(t):  # [..., T, D] -> [..., heads, T, dk]
        t = reshape(t, lead + (T, block.heads, dk))
        return transpose(t, tuple(range(nl)) + (nl + 1, nl, nl + 2))

    q = split(linear(h, block.wq, block.bq))
    k = split(linear(h, block.wk, block.bk))
    v = split(linear(h, block.wv, block.bv))
    kt = transpose(k, tuple(range(nl + 1)) + (nl + 2, nl + 1))
    weights = softmax(scale(matmul(q, kt), 1.0 / math.sqrt(dk)), axis=-1)
    ctx = matmul(weights, v)
    ctx = transpose(ctx, tuple(range(nl)) + (nl + 1, nl, nl + 2))
    ctx = reshape(ctx, lead + (T, D))
    return linear(ctx, block.wo, block.bo), weights


def attention_block(x: Tensor, block: TransformerBlock) -> Tensor:
    """Pre-norm residual block: ``x + MHA(LN(x))`` followed by ``+ FFN(LN(.))``."""
    a, _ = self_attention(layer_norm(x, block.ln1_g, block.ln1_b), block)
    x = add(x, a)
    f = linear(relu(linear(layer_norm(x, block.ln2_g, block.ln2_b), block.w1, block.b1)), block.w2, block.b2)
    return add(x, f)

