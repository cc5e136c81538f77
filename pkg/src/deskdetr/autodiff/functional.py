"""Differentiable operations over :class:`Tensor`.

Each op computes its forward value with numpy and registers a closure that
maps the output gradient to one gradient per parent. Broadcasting follows
numpy; gradients are summed back to the parent shapes.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
from scipy import sparse, special

from ..errors import ConfigError, DimensionError
from .tensor import Tensor, default_dtype, make_result

# ---------------------------------------------------------------------------
# flop tracing


class FlopCount:
    """Accumulates multiply-add FLOPs (2 per MAC) of matmul, linear and conv ops."""

    def __init__(self) -> None:
        self.total = 0


_tracers: list[FlopCount] = []


@contextlib.contextmanager
def count_flops():
    counter = FlopCount()
    _tracers.append(counter)
    try:
        yield counter
    finally:
        _tracers.remove(counter)


def _add_flops(n: int) -> None:
    for counter in _tracers:
        counter.total += int(n)


# ---------------------------------------------------------------------------
# helpers


def _t(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else default_dtype()
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _t(b, a)
    b = _t(b)
    return _t(a, b), b


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make_result(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return make_result(ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (
            unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return make_result(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    p = float(exponent)
    out = ad**p

    def bw(g):
        return (g * p * ad ** (p - 1.0),)

    return make_result(out, (a,), bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return make_result(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (g * 0.5 / out,))


def abs(a: Tensor) -> Tensor:  # noqa: A001
    ad = a.data
    return make_result(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def clamp(a: Tensor, lo=None, hi=None) -> Tensor:
    ad = a.data
    out = np.clip(ad, lo, hi)
    mask = np.ones(ad.shape, dtype=bool)
    if lo is not None:
        mask &= ad >= lo
    if hi is not None:
        mask &= ad <= hi
    return make_result(out, (a,), lambda g: (g * mask,))


def maximum(a, b) -> Tensor:
    a, b = _pair(a, b)
    pick_a = a.data >= b.data
    out = np.where(pick_a, a.data, b.data)
    sa, sb = a.shape, b.shape
    return make_result(
        out,
        (a, b),
        lambda g: (unbroadcast(g * pick_a, sa), unbroadcast(g * ~pick_a, sb)),
    )


def minimum(a, b) -> Tensor:
    a, b = _pair(a, b)
    pick_a = a.data <= b.data
    out = np.where(pick_a, a.data, b.data)
    sa, sb = a.shape, b.shape
    return make_result(
        out,
        (a, b),
        lambda g: (unbroadcast(g * pick_a, sa), unbroadcast(g * ~pick_a, sb)),
    )


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = _pair(a, b)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape
    out = np.where(cond, a.data, b.data)
    return make_result(
        out,
        (a, b),
        lambda g: (unbroadcast(g * cond, sa), unbroadcast(g * ~cond, sb)),
    )


# ---------------------------------------------------------------------------
# activations


def sigmoid(a: Tensor) -> Tensor:
    out = special.expit(a.data)
    return make_result(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make_result(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result(a.data * mask, (a,), lambda g: (g * mask,))


def silu(a: Tensor) -> Tensor:
    ad = a.data
    s = special.expit(ad)
    return make_result(ad * s, (a,), lambda g: (g * s * (1.0 + ad * (1.0 - s)),))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    ad = a.data
    cdf = 0.5 * (1.0 + special.erf(ad * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * ad * ad)
    return make_result(ad * cdf, (a,), lambda g: (g * (cdf + ad * pdf),))


_ACTIVATIONS = {"relu": relu, "silu": silu, "gelu": gelu, "sigmoid": sigmoid, "tanh": tanh}


def activation(a: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(a)


def inverse_sigmoid(a: Tensor, eps: float = 1e-5) -> Tensor:
    a = clamp(a, 0.0, 1.0)
    return log(clamp(a, eps, None)) - log(clamp(1.0 - a, eps, None))


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return make_result(np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return sum(a, axes, keepdims) * (1.0 / max(count, 1))


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return make_result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def index(a: Tensor, idx) -> Tensor:
    if isinstance(idx, Tensor):
        idx = idx.data
    shape, dtype = a.shape, a.dtype
    basic = _is_basic(idx)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return make_result(a.data[idx], (a,), bw)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """``out[n, k] = a[n, idx[n, k]]`` for ``a`` of shape [N, T, ...]."""
    idx = np.asarray(idx)
    rows = np.arange(a.shape[0])[:, None]
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, (rows, idx), g)
        return (full,)

    return make_result(a.data[rows, idx], (a,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_t(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_t(t) for t in tensors]
    axis = axis % (tensors[0].ndim + 1)

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return make_result(np.stack([t.data for t in tensors], axis=axis), tensors, bw)


def split(a: Tensor, sizes, axis: int = -1) -> list[Tensor]:
    out, start = [], 0
    axis = axis % a.ndim
    for s in sizes:
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(start, start + s)
        out.append(index(a, tuple(sl)))
        start += s
    return out


def upsample_nearest2x(a: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling of the last two axes."""
    ad = a.data
    out = ad.repeat(2, axis=-2).repeat(2, axis=-1)
    lead = ad.shape[:-2]
    h, w = ad.shape[-2:]

    def bw(g):
        return (g.reshape(*lead, h, 2, w, 2).sum(axis=(-3, -1)),)

    return make_result(out, (a,), bw)


def detach(a: Tensor) -> Tensor:
    return a.detach()


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    out = ad @ bd
    if _tracers:
        _add_flops(2 * out.size * ad.shape[-1])
    return make_result(out, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` of shape [in, out]."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear shape mismatch: {x.shape} x {weight.shape}")
    xd, wd = x.data, weight.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd
    if bias is not None:
        out = out + bias.data
    out = out.reshape(*lead, wd.shape[1])
    if _tracers:
        _add_flops(2 * x2.shape[0] * wd.shape[0] * wd.shape[1])
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_result(out, parents, bw)


# ---------------------------------------------------------------------------
# convolution


def _pads(padding) -> tuple[int, int]:
    if isinstance(padding, (tuple, list)):
        return int(padding[0]), int(padding[1])
    return int(padding), int(padding)


def conv_output_extent(size: int, k: int, stride: int, pad) -> int:
    """Output extent of a convolution; ``pad`` is an int or (before, after)."""
    lo, hi = _pads(pad)
    span = size + lo + hi - k
    if span < 0:
        raise ConfigError(f"kernel {k} larger than padded extent {size + lo + hi}")
    if span % stride:
        raise ConfigError(
            f"non-integral conv output extent: ({size} + {lo} + {hi} - {k}) / {stride} + 1"
        )
    return span // stride + 1


def _patches(xc: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """[C*kh*kw, N*ho*wo] patch matrix from a padded channel-major input [C, N, H, W]."""
    c, n = xc.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xc.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xc[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
    return cols.reshape(c * kh * kw, n * ho * wo)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding=0) -> Tensor:
    """Cross-correlation over [N, C, H, W] (or unbatched [C, H, W]) input.

    ``padding`` is symmetric (int) or (before, after) on both spatial axes;
    extents that do not divide exactly raise ConfigError instead of flooring.
    Internally the input is laid out channel-major so patches and output
    gradients are contiguous GEMM operands.
    """
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    wd = weight.data
    n, c, h, w = xd.shape
    o, ci, kh, kw = wd.shape
    if ci != c:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs kernel {weight.shape}")
    ho = conv_output_extent(h, kh, stride, padding)
    wo = conv_output_extent(w, kw, stride, padding)
    plo, phi = _pads(padding)
    xc = xd.transpose(1, 0, 2, 3)
    if plo or phi:
        xc = np.pad(xc, ((0, 0), (0, 0), (plo, phi), (plo, phi)))
    if kh == 1 and kw == 1:
        cols = np.ascontiguousarray(xc[:, :, ::stride, ::stride]).reshape(c, -1)
    else:
        cols = _patches(xc, kh, kw, stride, ho, wo)
    wmat = wd.reshape(o, -1)
    out = wmat @ cols  # [O, N*ho*wo]
    if _tracers:
        _add_flops(2 * out.size * cols.shape[0])
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    if squeeze:
        out = out[0]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g4 = g[None] if squeeze else g
        go = np.ascontiguousarray(g4.transpose(1, 0, 2, 3)).reshape(o, -1)
        gw = (go @ cols.T).reshape(wd.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ go).reshape(c, kh, kw, n, ho, wo)
            gpad = np.zeros((c, n, h + plo + phi, w + plo + phi), dtype=xd.dtype)
            for i in range(kh):
                for j in range(kw):
                    gpad[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += gcols[:, i, j]
            gx = gpad[:, :, plo : plo + h, plo : plo + w].transpose(1, 0, 2, 3)
            gx = gx[0] if squeeze else np.ascontiguousarray(gx)
        if bias is None:
            return gx, gw
        return gx, gw, go.sum(axis=1)

    return make_result(np.ascontiguousarray(out), parents, bw)


# ---------------------------------------------------------------------------
# normalization / softmax / losses


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply gain and bias."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data
    parents = tuple(p for p in (x, gain, bias) if p is not None)

    def bw(g):
        grads = []
        dxhat = g * gain.data if gain is not None else g
        gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        grads.append(gx)
        lead = tuple(range(g.ndim - 1))
        if gain is not None:
            grads.append((g * xhat).sum(axis=lead))
        if bias is not None:
            grads.append(g.sum(axis=lead))
        return tuple(grads)

    return make_result(out, parents, bw)


def _channel_view(arr: np.ndarray, ndim: int) -> np.ndarray:
    # per-channel vector broadcast against [..., C, H, W]
    return arr.reshape((-1, 1, 1))


def batch_norm_train(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5):
    """Batch-statistics normalization over (N, H, W) of [N, C, H, W].

    Returns the output and the (mean, biased variance) used, so the caller
    can update running statistics.
    """
    xd = x.data
    axes = (0, 2, 3)
    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data.reshape(1, -1, 1, 1)
    out = xhat * gd + bias.data.reshape(1, -1, 1, 1)

    def bw(g):
        dxhat = g * gd
        gx = inv * (
            dxhat - dxhat.mean(axis=axes, keepdims=True) - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return make_result(out, (x, gain, bias), bw), mu.reshape(-1), var.reshape(-1)


def batch_norm_inference(x: Tensor, mean_: np.ndarray, var: np.ndarray, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Fixed-statistics normalization over the channel axis (-3)."""
    if np.any(np.asarray(var) < 0):
        raise ConfigError("batch_norm_inference: variance must be nonnegative")
    inv = 1.0 / np.sqrt(np.asarray(var, dtype=x.dtype) + eps)
    scale = _channel_view(gain.data * inv, x.ndim)
    shift = _channel_view(bias.data - np.asarray(mean_, dtype=x.dtype) * gain.data * inv, x.ndim)
    xd = x.data
    xhat = (xd - _channel_view(np.asarray(mean_, dtype=x.dtype), x.ndim)) * _channel_view(inv, x.ndim)
    lead = tuple(i for i in range(xd.ndim) if i != xd.ndim - 3)

    def bw(g):
        return g * scale, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_result(xd * scale + shift, (x, gain, bias), bw)


def bce_with_logits(x: Tensor, target: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy on logits against a constant target."""
    xd = x.data
    t = np.asarray(target, dtype=xd.dtype)
    out = np.maximum(xd, 0) - xd * t + np.log1p(np.exp(-np.abs(xd)))
    return make_result(out, (x,), lambda g: (g * (special.expit(xd) - t),))


# ---------------------------------------------------------------------------
# bilinear sampling


_DX = np.array([0, 1, 0, 1])
_DY = np.array([0, 0, 1, 1])
_SIGN = np.array([-1.0, 1.0])


def _interp_matrices(pts: np.ndarray, h: int, w: int, with_derivatives: bool):
    """Sparse [B*P, B*H*W] bilinear weights, optionally with d/dx and d/dy weights.

    Taps that fall outside the grid get weight zero, which is the
    zero-padding border rule.
    """
    b, p = pts.shape[:2]
    dtype = pts.dtype
    px = pts[..., 0] * dtype.type(w) - dtype.type(0.5)
    py = pts[..., 1] * dtype.type(h) - dtype.type(0.5)
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = px - x0
    fy = py - y0
    xi = x0.astype(np.int64)[..., None] + _DX
    yi = y0.astype(np.int64)[..., None] + _DY
    valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    base = (np.arange(b, dtype=np.int64) * (h * w))[:, None, None]
    cols = np.where(valid, base + yi * w + xi, 0).reshape(-1)
    index_dtype = np.int32 if b * h * w < 2**31 and 4 * b * p < 2**31 else np.int64
    cols = cols.astype(index_dtype)
    indptr = np.arange(0, 4 * b * p + 1, 4, dtype=index_dtype)
    shape = (b * p, b * h * w)
    wx = np.stack([1 - fx, fx], axis=-1)
    wy = np.stack([1 - fy, fy], axis=-1)

    def build(weights):
        m = sparse.csr_matrix(shape, dtype=dtype)
        m.data = np.where(valid, weights.reshape(b, p, 4), 0).astype(dtype).reshape(-1)
        m.indices = cols
        m.indptr = indptr
        return m

    interp = build(wy[..., :, None] * wx[..., None, :])
    if not with_derivatives:
        return interp, None, None
    ddx = build(wy[..., :, None] * _SIGN.astype(dtype))
    ddy = build(_SIGN.astype(dtype)[:, None] * wx[..., None, :])
    return interp, ddx, ddy


def sample_points(feature: Tensor, points: Tensor) -> Tensor:
    """Batched channels-last bilinear sampling.

    ``feature`` is [B, H, W, C], ``points`` is [B, P, 2] holding (x, y) in
    normalized image coordinates; returns [B, P, C]. Pixel (i, j) is centered
    at ((j + 0.5) / W, (i + 0.5) / H); taps outside the grid read zero.
    """
    fd = feature.data
    pd = points.data
    b, h, w, c = fd.shape
    if pd.ndim != 3 or pd.shape[0] != b or pd.shape[-1] != 2:
        raise DimensionError(f"sample_points shape mismatch: feature {fd.shape}, points {pd.shape}")
    p = pd.shape[1]
    flat_feat = fd.reshape(b * h * w, c)
    interp, ddx, ddy = _interp_matrices(pd, h, w, points.requires_grad)
    out = np.asarray(interp @ flat_feat, dtype=fd.dtype).reshape(b, p, c)

    def bw(g):
        gf = gp = None
        g2 = g.reshape(b * p, c)
        if feature.requires_grad:
            gf = np.asarray(interp.T @ g2, dtype=fd.dtype).reshape(fd.shape)
        if points.requires_grad:
            gx = np.einsum("pc,pc->p", g2, ddx @ flat_feat) * w
            gy = np.einsum("pc,pc->p", g2, ddy @ flat_feat) * h
            gp = np.stack([gx, gy], axis=-1).reshape(pd.shape).astype(pd.dtype)
        return gf, gp

    return make_result(out, (feature, points), bw)


def bilinear_sample(feature: Tensor, points) -> Tensor:
    """Sample a [C, H, W] feature at P normalized (x, y) points -> [C, P]."""
    points = _t(points, feature)
    feat = transpose(feature, (1, 2, 0)).reshape(1, feature.shape[1], feature.shape[2], feature.shape[0])
    pts = points.reshape(1, points.shape[0], 2)
    out = sample_points(feat, pts)
    return transpose(out.reshape(points.shape[0], feature.shape[0]), (1, 0))
