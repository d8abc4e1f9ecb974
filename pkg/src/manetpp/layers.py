"""Numpy layer kernels with hand-derived backward passes.

Every differentiable op comes as a pair: ``op(...) -> (out, cache)`` and
``op_backward(dout, cache) -> grads``.  Arrays follow NCHW layout and keep
whatever float dtype they are given, so the same code runs in float32 for
training and float64 for gradient checks.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import sparse

logger = logging.getLogger(__name__)

# VGG-M local response normalization: (size, k, alpha, beta)
LRN_DEFAULTS = (5, 2.0, 1e-4, 0.75)
# batch norm: (momentum, eps)
BN_DEFAULTS = (0.1, 1e-5)


@dataclass
class LayerAttrs:
    stride: int = 1
    dilation: int = 1
    padding: int = 0
    pool_window: int = 3
    dropout_rate: float = 0.5
    lrn_params: tuple = LRN_DEFAULTS
    bn_params: tuple = BN_DEFAULTS
    training_mode: bool = False

    def __post_init__(self):
        if self.stride < 1 or self.dilation < 1 or self.pool_window < 1:
            raise ValueError(f"stride, dilation and pool_window must be >= 1: {self}")
        if self.padding < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")


@dataclass(eq=False)
class ParamBlock:
    """A trainable array, its gradient accumulator and a weight-decay flag."""

    value: np.ndarray
    grad: np.ndarray = field(default=None)
    weight_decay_enabled: bool = True

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ValueError(f"grad shape {self.grad.shape} != value shape {self.value.shape}")

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, kernel: int, stride: int = 1, padding: int = 0,
                     dilation: int = 1) -> int:
    span = dilation * (kernel - 1) + 1
    return (size + 2 * padding - span) // stride + 1


def conv2d(x, w, b, attrs: LayerAttrs):
    """Dilated, strided 2-D convolution (cross-correlation) via im2col."""
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input and OIKK weights, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, i, kh, kw = w.shape
    if c != i:
        raise ValueError(f"conv2d channel mismatch: input has {c} channels, weights expect {i}")
    if b.shape != (o,):
        raise ValueError(f"conv2d bias shape {b.shape} != ({o},)")
    s, d, p = attrs.stride, attrs.dilation, attrs.padding
    ho = conv_output_size(h, kh, s, p, d)
    wo = conv_output_size(wd, kw, s, p, d)
    if ho < 1 or wo < 1:
        raise ValueError(
            f"conv2d output would be empty: input {h}x{wd}, kernel {kh}x{kw}, "
            f"stride {s}, padding {p}, dilation {d}")
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    span_h, span_w = d * (kh - 1) + 1, d * (kw - 1) + 1
    win = sliding_window_view(xp, (span_h, span_w), axis=(2, 3))
    win = win[:, :, : s * (ho - 1) + 1 : s, : s * (wo - 1) + 1 : s, ::d, ::d]
    # (N, Ho, Wo, C, kh, kw) -> rows of patches
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = w.reshape(o, -1)
    out = cols @ wmat.T + b
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    cache = (x.shape, cols, w, attrs, ho, wo)
    return np.ascontiguousarray(out), cache


def conv2d_backward(dout, cache, need_dx=True):
    """Returns (dx, dw, db); ``dx`` is None when ``need_dx`` is false."""
    xshape, cols, w, attrs, ho, wo = cache
    n, c, h, wd = xshape
    o, _, kh, kw = w.shape
    s, d, p = attrs.stride, attrs.dilation, attrs.padding
    dmat = dout.transpose(0, 2, 3, 1).reshape(-1, o)
    dw = (dmat.T @ cols).reshape(w.shape)
    db = dmat.sum(axis=0)
    if not need_dx:
        return None, dw, db
    # col2im in channels-last layout so each tap adds a contiguous run of channels
    dcols = (dmat @ w.reshape(o, -1)).reshape(n, ho, wo, c, kh, kw)
    dcols = np.ascontiguousarray(dcols.transpose(4, 5, 0, 1, 2, 3))
    dxp = np.zeros((n, h + 2 * p, wd + 2 * p, c), dtype=dout.dtype)
    for ki in range(kh):
        r0 = ki * d
        for kj in range(kw):
            c0 = kj * d
            dxp[:, r0 : r0 + s * (ho - 1) + 1 : s, c0 : c0 + s * (wo - 1) + 1 : s] += dcols[ki, kj]
    dx = dxp[:, p : p + h, p : p + wd] if p else dxp
    return np.ascontiguousarray(dx.transpose(0, 3, 1, 2)), dw, db


# ---------------------------------------------------------------------------
# fully connected / activations


def fully_connected(x, w, b):
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"fully_connected dimension mismatch: {x.shape} @ {w.shape}")
    if b.shape != (w.shape[1],):
        raise ValueError(f"fully_connected bias shape {b.shape} != ({w.shape[1]},)")
    return x @ w + b, (x, w)


def fully_connected_backward(dout, cache):
    x, w = cache
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def relu(x):
    return np.maximum(x, 0), x


def relu_backward(dout, cache):
    return dout * (cache > 0)


def dropout(x, rate: float, training: bool, rng: np.random.Generator | None):
    """Inverted dropout; identity outside training mode or at rate 0."""
    if not training or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * mask, mask


def dropout_backward(dout, mask):
    return dout if mask is None else dout * mask


def softmax2(z):
    """Row softmax with max subtraction.  Used for the (negative, positive) score pairs."""
    e = np.exp(z - z.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    return p, p


def softmax2_backward(dp, p):
    return p * (dp - (dp * p).sum(axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# local response normalization


def _channel_window_sum(a, size):
    # sum over channels c - size//2 .. c + (size-1)//2, zero padded
    half = size // 2
    n, c = a.shape[:2]
    padded = np.zeros((n, c + size) + a.shape[2:], dtype=a.dtype)
    padded[:, half + 1 : half + 1 + c] = a
    csum = np.cumsum(padded, axis=1)
    return csum[:, size : size + c] - csum[:, :c]


def lrn(x, attrs: LayerAttrs):
    """Cross-channel LRN: x_c / (k + alpha * sum_{window} x^2) ** beta."""
    size, k, alpha, beta = attrs.lrn_params
    if k <= 0:
        raise ValueError(f"LRN needs k > 0, got {k}")
    if size % 2 != 1:
        raise ValueError(f"LRN window must be odd, got {size}")
    scale = k + alpha * _channel_window_sum(x * x, size)
    out = x * scale ** (-beta)
    return out, (x, scale, attrs.lrn_params)


def lrn_backward(dout, cache):
    x, scale, (size, _, alpha, beta) = cache
    t = dout * x * scale ** (-beta - 1)
    # the centered window is symmetric, so the transpose is the same window sum
    return dout * scale ** (-beta) - 2 * alpha * beta * x * _channel_window_sum(t, size)


# ---------------------------------------------------------------------------
# IC layer: batch norm followed by dropout


@dataclass(eq=False)
class BatchNormState:
    gamma: ParamBlock
    beta: ParamBlock
    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def identity(cls, channels: int, dtype=np.float32):
        return cls(
            gamma=ParamBlock(np.ones(channels, dtype), weight_decay_enabled=False),
            beta=ParamBlock(np.zeros(channels, dtype), weight_decay_enabled=False),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
        )


def ic_layer(x, state: BatchNormState, attrs: LayerAttrs, rng=None):
    """Per-channel batch normalization then dropout (dropout only while training).

    In training mode the batch statistics are used and the running
    statistics are updated in place by ``momentum``.
    """
    momentum, eps = attrs.bn_params
    gamma = state.gamma.value.reshape(1, -1, 1, 1)
    shift = state.beta.value.reshape(1, -1, 1, 1)
    if attrs.training_mode:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        if x.shape[0] < 2 and m < 2:
            raise ValueError("ic_layer in training mode needs more than one value per channel")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        unbiased = var * (m / max(m - 1, 1))
        state.running_mean[...] = (1 - momentum) * state.running_mean + momentum * mean
        state.running_var[...] = (1 - momentum) * state.running_var + momentum * unbiased
    else:
        mean, var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
    y = gamma * xhat + shift
    out, mask = dropout(y, attrs.dropout_rate, attrs.training_mode, rng)
    return out, (xhat, inv_std.astype(x.dtype), gamma, mask, attrs.training_mode)


def ic_layer_backward(dout, cache):
    """Returns (dx, dgamma, dbeta)."""
    xhat, inv_std, gamma, mask, training = cache
    dy = dropout_backward(dout, mask)
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = dy * gamma
    inv = inv_std.reshape(1, -1, 1, 1)
    if not training:
        return dxhat * inv, dgamma, dbeta
    dx = inv * (dxhat - dxhat.mean(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True))
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# max pooling


def maxpool_nhwc(x, window: int, stride: int):
    """Max pooling over axes 1, 2 of a channels-last (N, H, W, C) array.

    Returns (out, arg) with ``arg`` the row-major window offset of the
    first maximum.
    """
    k, s = window, stride
    n, h, w, c = x.shape
    if k > h or k > w:
        raise ValueError(f"pool window {k} larger than spatial dims {h}x{w}")
    ho, wo = (h - k) // s + 1, (w - k) // s + 1

    def tap(j):
        ki, kj = divmod(j, k)
        return x[:, ki : ki + s * (ho - 1) + 1 : s, kj : kj + s * (wo - 1) + 1 : s]

    out = tap(0).copy()
    arg = np.zeros(out.shape, dtype=np.uint8)
    for j in range(1, k * k):
        # strict > keeps the earliest maximum on ties
        better = np.greater(tap(j), out)
        np.maximum(out, tap(j), out=out)
        arg *= ~better
        arg += better.view(np.uint8) * np.uint8(j)
    return out, arg


def maxpool_nhwc_backward(dout, arg, xshape, window: int, stride: int):
    k, s = window, stride
    _, ho, wo, _ = dout.shape
    dx = np.zeros(xshape, dtype=dout.dtype)
    for j in range(k * k):
        ki, kj = divmod(j, k)
        dx[:, ki : ki + s * (ho - 1) + 1 : s, kj : kj + s * (wo - 1) + 1 : s] += dout * (arg == j)
    return dx


def maxpool(x, attrs: LayerAttrs):
    """Window max with stride ``attrs.stride``; ties go to the first row-major element."""
    xt = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    out, arg = maxpool_nhwc(xt, attrs.pool_window, attrs.stride)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), (xt.shape, arg, attrs.pool_window, attrs.stride)


def maxpool_backward(dout, cache):
    xshape, arg, k, s = cache
    dx = maxpool_nhwc_backward(np.ascontiguousarray(dout.transpose(0, 2, 3, 1)), arg, xshape, k, s)
    return np.ascontiguousarray(dx.transpose(0, 3, 1, 2))


# ---------------------------------------------------------------------------
# RoIAlign


def _bilinear_taps(coord, size):
    """Low/high indices and weights along one axis for a vector of coordinates.

    Follows the usual RoIAlign border handling: points further than one
    cell outside the map contribute nothing, the rest are clamped.
    """
    valid = (coord >= -1.0) & (coord <= size)
    c = np.clip(coord, 0.0, None)
    low = np.floor(c).astype(np.int64)
    at_edge = low >= size - 1
    low = np.where(at_edge, size - 1, low)
    high = np.where(at_edge, size - 1, low + 1)
    c = np.where(at_edge, low.astype(coord.dtype), c)
    frac = c - low
    return low, high, 1.0 - frac, frac, valid


def roialign_matrix(boxes, height, width, spatial_scale, out_size=7, sampling=2,
                    offset=0.0, dtype=np.float64):
    """Sparse (CSR) interpolation matrix M with ``roialign = M @ features.reshape(C, H*W).T``.

    ``boxes`` is (n, 4) in image pixels (x, y, w, h).  Image coordinate
    ``p`` maps to feature coordinate ``(p - offset) * spatial_scale - 0.5``,
    so a box spanning pixel cells [k, k + 7) at scale 1 puts its bin centres
    on feature indices k .. k + 6.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    n = len(boxes)
    x0 = (boxes[:, 0] - offset) * spatial_scale - 0.5
    y0 = (boxes[:, 1] - offset) * spatial_scale - 0.5
    bw = boxes[:, 2] * spatial_scale / out_size
    bh = boxes[:, 3] * spatial_scale / out_size
    if np.any(boxes[:, 2] <= 0) or np.any(boxes[:, 3] <= 0):
        raise ValueError("roialign boxes need positive width and height")
    frac = (np.arange(out_size)[:, None] + (np.arange(sampling)[None, :] + 0.5) / sampling).ravel()
    # sample coordinates: (n, out_size * sampling) along each axis
    ys = y0[:, None] + bh[:, None] * frac[None, :]
    xs = x0[:, None] + bw[:, None] * frac[None, :]
    ylo, yhi, wy0, wy1, vy = _bilinear_taps(ys, height)
    xlo, xhi, wx0, wx1, vx = _bilinear_taps(xs, width)
    shape4 = (n, out_size, sampling, out_size, sampling)

    def grid(a, b):
        return a.reshape(n, out_size, sampling, 1, 1), b.reshape(n, 1, 1, out_size, sampling)

    rows = (np.arange(n)[:, None, None, None, None] * out_size * out_size
            + np.arange(out_size)[None, :, None, None, None] * out_size
            + np.arange(out_size)[None, None, None, :, None])
    rows = np.broadcast_to(rows, shape4)
    valid = np.broadcast_to(vy.reshape(n, out_size, sampling, 1, 1)
                            & vx.reshape(n, 1, 1, out_size, sampling), shape4)
    norm = 1.0 / (sampling * sampling)
    idx, vals = [], []
    for yi, wy in ((ylo, wy0), (yhi, wy1)):
        for xi, wx in ((xlo, wx0), (xhi, wx1)):
            yy, xx = grid(yi, xi)
            wyy, wxx = grid(wy, wx)
            cols = np.broadcast_to(yy * width + xx, shape4)
            idx.append((rows * (height * width) + cols).ravel())
            vals.append((np.broadcast_to(wyy * wxx * norm, shape4) * valid).ravel())
    flat = np.concatenate(idx)
    # duplicate (row, col) entries are summed by the COO -> CSR conversion
    m = sparse.coo_matrix((np.concatenate(vals), (flat // (height * width), flat % (height * width))),
                          shape=(n * out_size * out_size, height * width)).tocsr()
    if not np.all(valid.any(axis=(1, 2, 3, 4))):
        outside = np.flatnonzero(~valid.any(axis=(1, 2, 3, 4)))
        logger.info("roialign: %d box(es) entirely outside the feature map -> zero features",
                    len(outside))
    return m.astype(dtype, copy=False)


def roialign(features, boxes, spatial_scale, out_size=7, sampling=2, offset=0.0, matrix=None):
    """Bilinear RoIAlign of one feature map (C, H, W) or (1, C, H, W).

    Each of the ``out_size``^2 bins averages ``sampling``^2 bilinear samples.
    Returns (n, C, out_size, out_size).  ``matrix`` may carry a precomputed
    :func:`roialign_matrix` for the same boxes and map size.
    """
    f = features[0] if features.ndim == 4 else features
    if features.ndim == 4 and features.shape[0] != 1:
        raise ValueError("roialign takes a single feature map")
    c, h, w = f.shape
    m = matrix
    if m is None:
        m = roialign_matrix(boxes, h, w, spatial_scale, out_size, sampling, offset, dtype=f.dtype)
    out = m @ np.ascontiguousarray(f.reshape(c, h * w).T)  # (n*out*out, C)
    n = m.shape[0] // (out_size * out_size)
    out = out.reshape(n, out_size, out_size, c).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (m, features.shape, out_size)


def roialign_backward(dout, cache):
    m, fshape, out_size = cache
    c = dout.shape[1]
    g = dout.transpose(0, 2, 3, 1).reshape(-1, c)
    df = (m.T @ g).T
    return df.reshape(fshape)


# ---------------------------------------------------------------------------
# optimizer


def sgd_step(params, lr: float, weight_decay: float = 0.0):
    """value -= lr * (grad + weight_decay * value); gradients are zeroed afterwards.

    Shared blocks are updated once even if listed twice.
    """
    seen = set()
    for p in params:
        if id(p) in seen:
            continue
        seen.add(id(p))
        step = p.grad
        if weight_decay and p.weight_decay_enabled:
            step = step + weight_decay * p.value
        p.value -= (lr * step).astype(p.value.dtype, copy=False)
        p.zero_grad()


class Momentum:
    """Heavy-ball SGD: v = mu * v + (grad + wd * value); value -= lr * v.

    With ``mu = 0`` every step is identical to :func:`sgd_step`.  Velocities
    are keyed by block identity, so one instance serves a fixed model.
    """

    def __init__(self, mu: float = 0.9):
        if not 0.0 <= mu < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {mu}")
        self.mu = mu
        self.velocity = {}

    def step(self, params, lr: float, weight_decay: float = 0.0):
        if self.mu == 0.0:
            sgd_step(params, lr, weight_decay)
            return
        seen = set()
        for p in params:
            if id(p) in seen:
                continue
            seen.add(id(p))
            g = p.grad
            if weight_decay and p.weight_decay_enabled:
                g = g + weight_decay * p.value
            v = self.velocity.get(id(p))
            v = g.copy() if v is None else self.mu * v + g
            self.velocity[id(p)] = v
            p.value -= (lr * v).astype(p.value.dtype, copy=False)
            p.zero_grad()
