"""Differentiable layers: convolution, bilinear sampling, deformable convolution,
PixelShuffle, channel/spatial attention and the residual block.

All ops work on NCHW tensors and register their own backward rule with the
autodiff engine. Convolutions are lowered to batched GEMMs over a tap-major
column buffer that is kept for the backward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .autodiff import Tensor, _sigmoid, add, concat_channels, make_node, note_kink, relu, sigmoid

__all__ = [
    "ConvParams",
    "AttentionParams",
    "conv2d",
    "bilinear_sample",
    "deformable_conv2d",
    "pixel_shuffle",
    "pixel_unshuffle",
    "apply_gate",
    "spatial_weighted_sum",
    "spatial_max",
    "channel_mean",
    "channel_max",
    "frequency_kernel",
    "attention_apply",
    "resblock",
    "kaiming_uniform",
]


@dataclass
class ConvParams:
    """Weights of one 2-D convolution. ``padding=None`` means 'same' padding."""

    weight: Tensor
    bias: Tensor | None = None
    stride: int = 1
    padding: int | None = None

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ValueError(f"conv weight must be (C_out, C_in, K_h, K_w), got {self.weight.shape}")
        c_out, _, kh, kw = self.weight.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"kernel sizes must be odd, got {kh}x{kw}")
        if self.bias is not None and self.bias.shape != (c_out,):
            raise ValueError(f"bias shape {self.bias.shape} does not match C_out={c_out}")
        if self.stride < 1:
            raise ValueError("stride must be positive")
        if self.padding is None:
            self.padding = (kh - 1) // 2
        elif self.padding < 0:
            raise ValueError("padding must be non-negative")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]

    def parameters(self) -> list[Tensor]:
        return [self.weight] if self.bias is None else [self.weight, self.bias]


def kaiming_uniform(rng: np.random.Generator, shape, a: float = math.sqrt(5), dtype=np.float32) -> np.ndarray:
    """Kaiming-uniform draw with fan-in = C_in * K_h * K_w and leaky slope ``a``.

    The default slope gives the usual conv-layer bound 1 / sqrt(fan_in);
    ``a=0`` is the plain He bound sqrt(6 / fan_in).
    """
    fan_in = int(np.prod(shape[1:]))
    bound = math.sqrt(6.0 / ((1 + a * a) * fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# convolution


def _out_size(size: int, k: int, pad: int, stride: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ValueError(
            f"conv output size is not a positive integer: (size {size} + 2*{pad} - {k}) / {stride} + 1"
        )
    return span // stride + 1


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Cross-correlation of ``x`` (N, C_in, H, W) with ``p`` plus bias."""
    if x.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = p.weight.shape
    if c != c_in:
        raise ValueError(f"conv2d: input has {c} channels, weight expects {c_in}")
    pad, stride = p.padding, p.stride
    ho = _out_size(h, kh, pad, stride)
    wo = _out_size(w, kw, pad, stride)
    wt = p.weight.data
    xd = x.data

    if kh == 1 and kw == 1 and pad == 0 and stride == 1:
        w2 = wt.reshape(c_out, c_in)
        x3 = xd.reshape(n, c, h * w)
        out = np.matmul(w2, x3)
        if p.bias is not None:
            out += p.bias.data[:, None]
        out = out.reshape(n, c_out, h, w)

        def backward(g):
            g3 = g.reshape(n, c_out, h * w)
            gx = np.matmul(w2.T, g3).reshape(xd.shape)
            gw = np.matmul(g3, x3.transpose(0, 2, 1)).sum(axis=0).reshape(wt.shape)
            gb = g3.sum(axis=(0, 2)) if p.bias is not None else None
            return (gx, gw, gb)

    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
        # tap-major columns: (N, Kh, Kw, C, Ho, Wo)
        cols = np.empty((n, kh, kw, c, ho, wo), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
        cols = cols.reshape(n, kh * kw * c, ho * wo)
        w2 = wt.transpose(0, 2, 3, 1).reshape(c_out, kh * kw * c)
        out = np.matmul(w2, cols)
        if p.bias is not None:
            out += p.bias.data[:, None]
        out = out.reshape(n, c_out, ho, wo)

        def backward(g):
            g3 = g.reshape(n, c_out, ho * wo)
            gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0)
            gw = gw.reshape(c_out, kh, kw, c).transpose(0, 3, 1, 2)
            gcols = np.matmul(w2.T, g3).reshape(n, kh, kw, c, ho, wo)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, i, j]
            gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
            gb = g3.sum(axis=(0, 2)) if p.bias is not None else None
            return (gx, gw, gb)

    out = np.ascontiguousarray(out)
    parents = (x, p.weight) if p.bias is None else (x, p.weight, p.bias)
    return make_node(out, parents, backward, "conv2d")


# ---------------------------------------------------------------------------
# bilinear sampling


class _BilinearPlan:
    """Four-neighbour gather/scatter at real positions with zero padding.

    ``py``/``px`` have shape (N, P) and index the H and W axes of a
    (N, C, H, W) map.
    """

    def __init__(self, shape, py: np.ndarray, px: np.ndarray):
        if not (np.all(np.isfinite(py)) and np.all(np.isfinite(px))):
            raise ValueError("bilinear sampling coordinates must be finite")
        n, c, h, w = shape
        self.shape = shape
        y0 = np.floor(py)
        x0 = np.floor(px)
        fy = py - y0
        fx = px - x0
        y0 = y0.astype(np.int64)
        x0 = x0.astype(np.int64)
        note_kink(np.stack([y0, x0]))
        dt = py.dtype
        self.fy, self.fx = fy, fx
        self.idx = []
        self.valid = []
        for dy in (0, 1):
            for dx in (0, 1):
                yi = y0 + dy
                xi = x0 + dx
                ok = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
                self.idx.append(np.where(ok, yi * w + xi, 0))
                self.valid.append(ok.astype(dt))
        wy = (1 - fy, fy)
        wx = (1 - fx, fx)
        self.wts = [wy[dy] * wx[dx] * self.valid[2 * dy + dx] for dy in (0, 1) for dx in (0, 1)]

    def gather(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        n, c, h, w = self.shape
        flat = x.reshape(n, c, h * w)
        vals = [np.take_along_axis(flat, ix[:, None, :], axis=2) for ix in self.idx]
        out = sum(v * wt[:, None, :] for v, wt in zip(vals, self.wts))
        return out, vals

    def scatter(self, g: np.ndarray) -> np.ndarray:
        """Adjoint of :meth:`gather` with respect to the sampled map."""
        n, c, h, w = self.shape
        base = (np.arange(n * c, dtype=np.int64) * (h * w)).reshape(n, c, 1)
        total = np.zeros(n * c * h * w, dtype=np.float64)
        for ix, wt in zip(self.idx, self.wts):
            lin = (base + ix[:, None, :]).ravel()
            total += np.bincount(lin, weights=(g * wt[:, None, :]).ravel(), minlength=n * c * h * w)
        return total.reshape(n, c, h, w).astype(g.dtype, copy=False)

    def coord_grads(self, g: np.ndarray, vals: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
        """Gradients with respect to (py, px), summed over channels."""
        v00, v01, v10, v11 = (v * ok[:, None, :] for v, ok in zip(vals, self.valid))
        fy = self.fy[:, None, :]
        fx = self.fx[:, None, :]
        d_dy = (1 - fx) * (v10 - v00) + fx * (v11 - v01)
        d_dx = (1 - fy) * (v01 - v00) + fy * (v11 - v10)
        return (g * d_dy).sum(axis=1), (g * d_dx).sum(axis=1)


def bilinear_sample(x: Tensor, coords: Tensor) -> Tensor:
    """Sample ``x`` (N, C, H, W) at real positions ``coords`` (N, 2, *S) holding (y, x).

    Returns (N, C, *S). Neighbours outside the map contribute zero.
    Differentiable with respect to both ``x`` and ``coords``.
    """
    if x.ndim != 4 or coords.ndim < 2 or coords.shape[1] != 2 or coords.shape[0] != x.shape[0]:
        raise ValueError(f"bilinear_sample: bad shapes x={x.shape} coords={coords.shape}")
    n, c = x.shape[:2]
    spatial = coords.shape[2:]
    cd = coords.data.reshape(n, 2, -1).astype(x.dtype, copy=False)
    plan = _BilinearPlan(x.shape, cd[:, 0], cd[:, 1])
    out, vals = plan.gather(x.data)

    def backward(g):
        g = g.reshape(n, c, -1)
        gy, gx_ = plan.coord_grads(g, vals)
        gc = np.stack([gy, gx_], axis=1).reshape(coords.shape)
        return (plan.scatter(g), gc)

    return make_node(out.reshape((n, c) + spatial), (x, coords), backward, "bilinear_sample")


# ---------------------------------------------------------------------------
# deformable convolution


def deformable_conv2d(x: Tensor, offsets: Tensor, p: ConvParams) -> Tensor:
    """Deformable convolution (no modulation mask, one offset group).

    ``offsets`` is (N, 2*K_h*K_w, H, W); channels ``2k`` and ``2k+1`` hold the
    (dy, dx) displacement of kernel tap ``k`` in row-major tap order.
    Stride 1 with 'same' padding.
    """
    if x.ndim != 4:
        raise ValueError(f"deformable_conv2d expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = p.weight.shape
    k = kh * kw
    if c != c_in:
        raise ValueError(f"deformable_conv2d: input has {c} channels, weight expects {c_in}")
    if p.stride != 1 or p.padding != (kh - 1) // 2 or kh != kw:
        raise ValueError("deformable_conv2d supports square kernels, stride 1, same padding only")
    if offsets.shape != (n, 2 * k, h, w):
        raise ValueError(f"offset field shape {offsets.shape} does not match expected {(n, 2 * k, h, w)}")
    od = offsets.data.astype(x.dtype, copy=False)
    if not np.all(np.isfinite(od)):
        raise ValueError("offset field contains non-finite values")
    pad = p.padding
    taps_y, taps_x = np.meshgrid(np.arange(kh) - pad, np.arange(kw) - pad, indexing="ij")
    gy, gx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    base_y = (taps_y.reshape(k, 1, 1) + gy[None]).astype(x.dtype)
    base_x = (taps_x.reshape(k, 1, 1) + gx[None]).astype(x.dtype)
    oy = od[:, 0::2]
    ox = od[:, 1::2]
    py = (base_y[None] + oy).reshape(n, -1)
    px = (base_x[None] + ox).reshape(n, -1)
    plan = _BilinearPlan(x.shape, py, px)
    cols, vals = plan.gather(x.data)  # (N, C, K*H*W)
    # same tap-major column layout and matmul as conv2d, so zero offsets agree bit for bit
    cols = np.ascontiguousarray(cols.reshape(n, c, k, h * w).transpose(0, 2, 1, 3)).reshape(n, k * c, h * w)
    w2 = p.weight.data.transpose(0, 2, 3, 1).reshape(c_out, k * c)
    out = np.matmul(w2, cols)
    if p.bias is not None:
        out += p.bias.data[:, None]
    out = out.reshape(n, c_out, h, w)

    def backward(g):
        g3 = g.reshape(n, c_out, h * w)
        gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0)
        gw = gw.reshape(c_out, kh, kw, c).transpose(0, 3, 1, 2)
        gcols = np.matmul(w2.T, g3).reshape(n, k, c, h * w)
        gcols = np.ascontiguousarray(gcols.transpose(0, 2, 1, 3)).reshape(n, c, -1)
        gxd = plan.scatter(gcols)
        g_py, g_px = plan.coord_grads(gcols, vals)
        goff = np.empty((n, 2 * k, h, w), dtype=g.dtype)
        goff[:, 0::2] = g_py.reshape(n, k, h, w)
        goff[:, 1::2] = g_px.reshape(n, k, h, w)
        gb = g3.sum(axis=(0, 2)) if p.bias is not None else None
        return (gxd, goff, gw, gb)

    parents = (x, offsets, p.weight) if p.bias is None else (x, offsets, p.weight, p.bias)
    return make_node(np.ascontiguousarray(out), parents, backward, "deformable_conv2d")


# ---------------------------------------------------------------------------
# sub-pixel rearrangement


def _shuffle(x: np.ndarray, r: int) -> np.ndarray:
    n, cr2, h, w = x.shape
    c = cr2 // (r * r)
    return x.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * r, w * r)


def _unshuffle(x: np.ndarray, r: int) -> np.ndarray:
    n, c, hr, wr = x.shape
    h, w = hr // r, wr // r
    return x.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h, w)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """(N, C*r^2, H, W) -> (N, C, rH, rW) with out[c, r*i+a, r*j+b] = x[c*r^2 + a*r + b, i, j]."""
    if r < 1 or x.ndim != 4 or x.shape[1] % (r * r):
        raise ValueError(f"pixel_shuffle: {x.shape[1] if x.ndim == 4 else x.shape} channels not divisible by r^2={r * r}")
    return make_node(np.ascontiguousarray(_shuffle(x.data, r)), (x,), lambda g: (_unshuffle(g, r),), "pixel_shuffle")


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    if r < 1 or x.ndim != 4 or x.shape[2] % r or x.shape[3] % r:
        raise ValueError(f"pixel_unshuffle: spatial size {x.shape[2:]} not divisible by {r}")
    return make_node(np.ascontiguousarray(_unshuffle(x.data, r)), (x,), lambda g: (_shuffle(g, r),), "pixel_unshuffle")


# ---------------------------------------------------------------------------
# pooling and gating primitives used by attention


def apply_gate(x: Tensor, gate: Tensor) -> Tensor:
    """Multiply ``x`` by a gate of shape (N, C, 1, 1) or (N, 1, H, W)."""
    n, c, h, w = x.shape
    if gate.shape not in ((n, c, 1, 1), (n, 1, h, w)):
        raise ValueError(f"gate shape {gate.shape} incompatible with {x.shape}")
    axes = (2, 3) if gate.shape[1] == c else (1,)
    xd, gd = x.data, gate.data

    def backward(g):
        return (g * gd, (g * xd).sum(axis=axes, keepdims=True))

    return make_node(xd * gd, (x, gate), backward, "gate")


def spatial_weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Per-channel inner product with a fixed (H, W) map -> (N, C, 1, 1)."""
    wts = np.asarray(weights, dtype=x.dtype)
    if wts.shape != x.shape[2:]:
        raise ValueError(f"weight map {wts.shape} does not match spatial size {x.shape[2:]}")
    out = np.einsum("nchw,hw->nc", x.data, wts)[:, :, None, None]
    return make_node(out, (x,), lambda g: (g * wts,), "spatial_sum")


def spatial_max(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    arg = flat.argmax(axis=2)
    note_kink(arg)

    def backward(g):
        gx = np.zeros_like(flat)
        np.put_along_axis(gx, arg[:, :, None], g.reshape(n, c, 1), axis=2)
        return (gx.reshape(x.shape),)

    return make_node(flat.max(axis=2).reshape(n, c, 1, 1), (x,), backward, "spatial_max")


def channel_mean(x: Tensor) -> Tensor:
    c = x.shape[1]
    return make_node(
        x.data.mean(axis=1, keepdims=True), (x,), lambda g: (np.broadcast_to(g / c, x.shape),), "channel_mean"
    )


def channel_max(x: Tensor) -> Tensor:
    arg = x.data.argmax(axis=1)[:, None]
    note_kink(arg)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, arg, g, axis=1)
        return (gx,)

    return make_node(np.take_along_axis(x.data, arg, axis=1), (x,), backward, "channel_max")


# ---------------------------------------------------------------------------
# attention

N_FREQ = 4
FREQ_PATCH = 8


def _adaptive_pool_matrix(size: int, bins: int) -> np.ndarray:
    m = np.zeros((bins, size))
    for i in range(bins):
        lo = (i * size) // bins
        hi = -((-(i + 1) * size) // bins)
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def _cosine_basis(n_freq: int, hp: int, wp: int) -> np.ndarray:
    """The ``n_freq`` lowest 2-D DCT-II patterns on an (hp, wp) grid, DC first."""
    pairs = sorted(((u, v) for u in range(hp) for v in range(wp)), key=lambda t: (t[0] + t[1], t))[:n_freq]
    hh = (np.arange(hp) + 0.5) / hp
    ww = (np.arange(wp) + 0.5) / wp
    return np.stack(
        [np.outer(np.cos(np.pi * u * hh), np.cos(np.pi * v * ww)) / (hp * wp) for u, v in pairs]
    )


@lru_cache(maxsize=32)
def frequency_kernel(h: int, w: int, n_freq: int = N_FREQ, patch: int = FREQ_PATCH) -> np.ndarray:
    """Summed cosine-basis projection lifted to an (h, w) map.

    The map is adaptive-average-pooled to a (patch, patch) grid and projected
    on each basis pattern; the projections are summed per channel. All steps
    are linear, so they fold into one fixed (h, w) weight map.
    """
    basis = _cosine_basis(n_freq, patch, patch)
    ph = _adaptive_pool_matrix(h, patch)
    pw = _adaptive_pool_matrix(w, patch)
    kern = sum(ph.T @ b @ pw for b in basis)
    kern.setflags(write=False)
    return kern


ATTENTION_KINDS = ("none", "attention-1", "attention-2")


@dataclass
class AttentionParams:
    """Channel gate MLP (two 1x1 convs) plus, for attention-1, a 7x7 spatial conv."""

    kind: str = "none"
    mlp_in: ConvParams | None = None
    mlp_out: ConvParams | None = None
    spatial: ConvParams | None = None
    n_freq: int = N_FREQ
    patch: int = FREQ_PATCH

    def __post_init__(self):
        if self.kind not in ATTENTION_KINDS:
            raise ValueError(f"unknown attention kind {self.kind!r}")
        if self.kind == "none":
            return
        if self.mlp_in is None or self.mlp_out is None:
            raise ValueError(f"{self.kind} needs channel MLP weights")
        hidden, channels = self.mlp_in.out_channels, self.mlp_in.in_channels
        if channels % hidden:
            raise ValueError(f"reduction hidden width {hidden} does not divide {channels} channels")
        if self.kind == "attention-1" and self.spatial is None:
            raise ValueError("attention-1 needs a spatial conv")

    @property
    def channels(self) -> int | None:
        return None if self.mlp_in is None else self.mlp_in.in_channels


def _channel_mlp(d: Tensor, p: AttentionParams) -> Tensor:
    return conv2d(relu(conv2d(d, p.mlp_in)), p.mlp_out)


def attention_apply(x: Tensor, p: AttentionParams) -> Tensor:
    if p.kind == "none":
        return x
    if x.shape[1] != p.channels:
        raise ValueError(f"attention expects {p.channels} channels, got {x.shape[1]}")
    h, w = x.shape[2:]
    if p.kind == "attention-1":
        avg = spatial_weighted_sum(x, np.full((h, w), 1.0 / (h * w)))
        pre = add(_channel_mlp(avg, p), _channel_mlp(spatial_max(x), p))
        y = apply_gate(x, sigmoid(pre))
        desc = concat_channels([channel_mean(y), channel_max(y)])
        return apply_gate(y, sigmoid(conv2d(desc, p.spatial)))
    desc = spatial_weighted_sum(x, frequency_kernel(h, w, p.n_freq, p.patch))
    return apply_gate(x, sigmoid(_channel_mlp(desc, p)))


def gate_values(x: np.ndarray, p: AttentionParams) -> np.ndarray:
    """Channel-gate activations for inspection (no graph)."""
    xt = Tensor(x)
    h, w = x.shape[2:]
    if p.kind == "attention-1":
        avg = spatial_weighted_sum(xt, np.full((h, w), 1.0 / (h * w)))
        pre = add(_channel_mlp(avg, p), _channel_mlp(spatial_max(xt), p))
    else:
        pre = _channel_mlp(spatial_weighted_sum(xt, frequency_kernel(h, w, p.n_freq, p.patch)), p)
    return _sigmoid(pre.data)


def resblock(x: Tensor, conv1: ConvParams, conv2: ConvParams, att: AttentionParams) -> Tensor:
    """x + attention(conv2(relu(conv1(x))))."""
    c = x.shape[1]
    for cp in (conv1, conv2):
        if cp.in_channels != c or cp.out_channels != c:
            raise ValueError(f"resblock convs must map {c} -> {c} channels, got {cp.in_channels} -> {cp.out_channels}")
    branch = conv2d(relu(conv2d(x, conv1)), conv2)
    return add(x, attention_apply(branch, att))
