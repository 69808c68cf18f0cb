"""Forward/backward kernels on NCHW numpy arrays.

Every ``*_forward`` returns ``(out, cache)`` and the matching
``*_backward(dout, cache)`` returns the input gradient (plus parameter
gradients where the op has parameters).  'same' padding follows the
TensorFlow convention: output size ``ceil(n / stride)``, odd padding
goes to the bottom/right.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


def pad_amounts(size: int, k: int, stride: int, padding: str) -> tuple[int, int, int]:
    """Return (pad_before, pad_after, out_size) along one spatial axis."""
    if padding == "valid":
        if size < k:
            raise ShapeError(f"input size {size} smaller than kernel {k} with valid padding")
        return 0, 0, (size - k) // stride + 1
    if padding == "same":
        out = math.ceil(size / stride)
        total = max((out - 1) * stride + k - size, 0)
        return total // 2, total - total // 2, out
    raise ShapeError(f"padding must be 'same' or 'valid', got {padding!r}")


def _pad(x, k, stride, padding, value=0.0):
    t, b, ho = pad_amounts(x.shape[2], k, stride, padding)
    l, r, wo = pad_amounts(x.shape[3], k, stride, padding)
    if t or b or l or r:
        x = np.pad(x, ((0, 0), (0, 0), (t, b), (l, r)), constant_values=value)
    return x, (t, b, l, r), ho, wo


def _crop(dxp, pads):
    t, b, l, r = pads
    h, w = dxp.shape[2], dxp.shape[3]
    return dxp[:, :, t:h - b, l:w - r]


# ---------------------------------------------------------------- dense conv


def conv2d_forward(x, w, stride=1, padding="same"):
    """Cross-correlation of x (N, C, H, W) with w (C', C, k, k)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    k = w.shape[2]
    if k == 1 and padding in ("same", "valid"):
        xs = x[:, :, ::stride, ::stride]
        out = np.einsum("nchw,oc->nohw", xs, w[:, :, 0, 0], optimize=True)
        return out, (x.shape, xs, w, stride, None, None)
    xp, pads, ho, wo = _pad(x, k, stride, padding)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (x.shape, win, w, stride, pads, xp.shape)


def conv2d_backward(dout, cache):
    """Return (dx, dw)."""
    xshape, win, w, stride, pads, xpshape = cache
    k = w.shape[2]
    if pads is None:
        xs = win
        dw = np.einsum("nohw,nchw->oc", dout, xs, optimize=True)[:, :, None, None]
        dxs = np.einsum("nohw,oc->nchw", dout, w[:, :, 0, 0], optimize=True)
        dx = np.zeros(xshape, dtype=dout.dtype)
        dx[:, :, ::stride, ::stride] = dxs
        return dx, dw
    dw = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))
    ho, wo = dout.shape[2], dout.shape[3]
    dxp = np.zeros(xpshape, dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            contrib = np.einsum("nohw,oc->nchw", dout, w[:, :, i, j], optimize=True)
            dxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += contrib
    return _crop(dxp, pads), dw


# ----------------------------------------------------------- depthwise conv


def depthwise_forward(x, w, stride=1, padding="same"):
    """Per-channel correlation; w has shape (C, k, k)."""
    if x.ndim != 4 or w.ndim != 3 or x.shape[1] != w.shape[0] or w.shape[1] != w.shape[2]:
        raise ShapeError(f"depthwise: input {x.shape} incompatible with kernels {w.shape}")
    k = w.shape[1]
    xp, pads, ho, wo = _pad(x, k, stride, padding)
    out = np.zeros((x.shape[0], x.shape[1], ho, wo), dtype=np.result_type(x, w))
    for i in range(k):
        for j in range(k):
            sl = xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
            out += sl * w[None, :, i, j, None, None]
    return out, (xp, w, stride, pads)


def depthwise_backward(dout, cache):
    """Return (dx, dw)."""
    xp, w, stride, pads = cache
    k = w.shape[1]
    ho, wo = dout.shape[2], dout.shape[3]
    dxp = np.zeros_like(xp, dtype=dout.dtype)
    dw = np.empty_like(w, dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            rs = slice(i, i + stride * (ho - 1) + 1, stride)
            cs = slice(j, j + stride * (wo - 1) + 1, stride)
            dw[:, i, j] = np.einsum("nchw,nchw->c", dout, xp[:, :, rs, cs], optimize=True)
            dxp[:, :, rs, cs] += dout * w[None, :, i, j, None, None]
    return _crop(dxp, pads), dw


def separable_forward(x, dw, pw, stride=1, padding="same"):
    """Depthwise (C, k, k) followed by pointwise (C', C)."""
    if pw.ndim != 2 or pw.shape[1] != x.shape[1]:
        raise ShapeError(f"separable: pointwise {pw.shape} incompatible with input {x.shape}")
    mid, c1 = depthwise_forward(x, dw, stride, padding)
    out = np.einsum("nchw,oc->nohw", mid, pw, optimize=True)
    return out, (c1, mid, pw)


def separable_backward(dout, cache):
    """Return (dx, d_depthwise, d_pointwise)."""
    c1, mid, pw = cache
    dpw = np.einsum("nohw,nchw->oc", dout, mid, optimize=True)
    dmid = np.einsum("nohw,oc->nchw", dout, pw, optimize=True)
    dx, ddw = depthwise_backward(dmid, c1)
    return dx, ddw, dpw


# ---------------------------------------------------------------- batch norm


def batchnorm_forward(x, gamma, beta, running_mean, running_var, mode="train",
                      momentum=0.9, eps=1e-5):
    """Per-channel normalization; in train mode the running stats are updated in place."""
    if mode == "train":
        m = x.shape[0] * x.shape[2] * x.shape[3]
        if m == 0:
            raise ShapeError("batch norm needs a non-empty batch in train mode")
        mean = x.mean(axis=(0, 2, 3))
        xc = x - mean[None, :, None, None]
        var = np.mean(xc * xc, axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1 - momentum) * mean
        running_var *= momentum
        running_var += (1 - momentum) * var
    elif mode == "infer":
        mean, var = running_mean, running_var
        xc = x - mean[None, :, None, None]
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * inv[None, :, None, None]
    out = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    return out, (xhat, inv, gamma, mode)


def batchnorm_backward(dout, cache):
    """Return (dx, dgamma, dbeta)."""
    xhat, inv, gamma, mode = cache
    dgamma = np.einsum("nchw,nchw->c", dout, xhat, optimize=True)
    dbeta = dout.sum(axis=(0, 2, 3))
    dxhat = dout * gamma[None, :, None, None]
    if mode == "infer":
        return dxhat * inv[None, :, None, None], dgamma, dbeta
    m = dout.shape[0] * dout.shape[2] * dout.shape[3]
    s1 = dxhat.sum(axis=(0, 2, 3))
    s2 = np.einsum("nchw,nchw->c", dxhat, xhat, optimize=True)
    dx = (inv / m)[None, :, None, None] * (
        m * dxhat - s1[None, :, None, None] - xhat * s2[None, :, None, None]
    )
    return dx, dgamma, dbeta


# ------------------------------------------------------------------ pooling


def maxpool_forward(x, k=3, stride=2, padding="same"):
    xp, pads, ho, wo = _pad(x, k, stride, padding, value=-np.inf)
    out = None
    arg = np.zeros((x.shape[0], x.shape[1], ho, wo), dtype=np.int8)
    for i in range(k):
        for j in range(k):
            sl = xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
            if out is None:
                out = sl.copy()
                continue
            better = sl > out  # strict: ties keep the first window position
            out = np.where(better, sl, out)
            arg[better] = i * k + j
    return out, (xp.shape, arg, k, stride, pads)


def maxpool_backward(dout, cache):
    xpshape, arg, k, stride, pads = cache
    ho, wo = dout.shape[2], dout.shape[3]
    dxp = np.zeros(xpshape, dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            mask = arg == i * k + j
            dxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += dout * mask
    return _crop(dxp, pads)


def global_avg_pool_forward(x):
    if x.ndim != 4:
        raise ShapeError(f"global average pool needs rank-4 input, got {x.shape}")
    return x.mean(axis=(2, 3), keepdims=True), x.shape


def global_avg_pool_backward(dout, shape):
    h, w = shape[2], shape[3]
    return np.broadcast_to(dout / (h * w), shape).copy()


# -------------------------------------------------------------- activations


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


# --------------------------------------------------------------------- loss


def mse_loss(pred, target):
    """Mean squared error over all elements and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: prediction {pred.shape} vs target {target.shape}")
    diff = pred - target
    n = diff.size
    return float(np.sum(diff * diff) / n), 2.0 * diff / n
