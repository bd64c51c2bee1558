"""Forward/backward pairs for the standard layers.

All functions work on batches: images are ``(N, C, H, W)``, vectors are
``(N, D)``.  A single image ``(C, H, W)`` is accepted where noted and the
result keeps the caller's rank.  Backward functions take whatever the
forward returned as its cache and never mutate it.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DTYPE, ShapeError, check_finite, init_fan_scaled


class LabelError(ValueError):
    pass


def _batched(x):
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ShapeError(f"expected (C,H,W) or (N,C,H,W), got {x.shape}")
    return x, False


# ---------------------------------------------------------------- conv


def conv_params(rng, in_ch, out_ch, k=3):
    fan_in, fan_out = in_ch * k * k, out_ch * k * k
    return {"w": init_fan_scaled(rng, (out_ch, in_ch, k, k), fan_in, fan_out),
            "b": np.zeros(out_ch, dtype=DTYPE)}


def _cols(xp, kh, kw):
    # (C, N, Hp, Wp) -> (C*kh*kw, N*H*W); inner copies run along contiguous rows
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # C, N, H, W, kh, kw
    c, n, h, w = win.shape[:4]
    return win.transpose(0, 4, 5, 1, 2, 3).reshape(c * kh * kw, n * h * w)


def _pad(x, pad):
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x


def conv_cnhw_forward(x, p, pad=1):
    """Convolution on channel-major ``(C, N, H, W)`` maps.

    Returns ``(out, cols)``; ``cols`` is the im2col matrix kept for backward.
    """
    w, b = p["w"], p["b"]
    out_ch, in_ch, kh, kw = w.shape
    if x.shape[0] != in_ch:
        raise ShapeError(f"conv expects {in_ch} input channels, got {x.shape[0]}")
    cols = _cols(_pad(x, pad), kh, kw)
    n, h, wd = x.shape[1], x.shape[2] + 2 * pad - kh + 1, x.shape[3] + 2 * pad - kw + 1
    out = w.reshape(out_ch, -1) @ cols
    out += b[:, None]
    return out.reshape(out_ch, n, h, wd), cols


def conv_cnhw_backward(cols, x_shape, p, grad_out, pad=1, need_dx=True):
    """Returns ``(grad_x or None, {"w", "b"})`` for :func:`conv_cnhw_forward`."""
    w = p["w"]
    out_ch, in_ch, kh, kw = w.shape
    c, n, hh, ww = x_shape
    h_out, w_out = hh + 2 * pad - kh + 1, ww + 2 * pad - kw + 1
    if grad_out.shape != (out_ch, n, h_out, w_out):
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match conv output")
    g2 = grad_out.reshape(out_ch, -1)
    grads = {"w": (g2 @ cols.T).reshape(w.shape), "b": g2.sum(axis=1)}
    if not need_dx:
        return None, grads
    gcols = (w.reshape(out_ch, -1).T @ g2).reshape(c, kh, kw, n, h_out, w_out)
    gxp = np.zeros((c, n, hh + 2 * pad, ww + 2 * pad), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + h_out, j:j + w_out] += gcols[:, i, j]
    gx = gxp[:, :, pad:pad + hh, pad:pad + ww] if pad else gxp
    return gx, grads


def to_cnhw(x):
    return np.ascontiguousarray(np.swapaxes(x, 0, 1))


def conv2d_forward(x, p, pad=1):
    """Stride-1 cross-correlation with zero padding, plus bias.

    ``x`` is ``(C, H, W)`` or ``(N, C, H, W)``; the output has ``out_ch``
    channels and, for 3x3 kernels with ``pad=1``, the input's spatial size.
    """
    xb, single = _batched(x)
    out, _ = conv_cnhw_forward(to_cnhw(xb), p, pad)
    out = to_cnhw(out)
    return out[0] if single else out


def conv2d_backward(x, p, grad_out, pad=1):
    """Returns ``(grad_x, {"w": ..., "b": ...})``."""
    xb, single = _batched(x)
    gb = np.asarray(grad_out, dtype=DTYPE)
    if single:
        gb = gb[None]
    xc = to_cnhw(xb)
    kh, kw = p["w"].shape[2:]
    cols = _cols(_pad(xc, pad), kh, kw)
    gx, grads = conv_cnhw_backward(cols, xc.shape, p, to_cnhw(gb), pad)
    gx = to_cnhw(gx)
    return (gx[0] if single else gx), grads


# ---------------------------------------------------------------- pooling


def _quads(x, h2, w2):
    return (x[..., 0:2 * h2:2, 0:2 * w2:2], x[..., 0:2 * h2:2, 1:2 * w2:2],
            x[..., 1:2 * h2:2, 0:2 * w2:2], x[..., 1:2 * h2:2, 1:2 * w2:2])


def maxpool2_forward(x):
    """2x2/stride-2 max pool over the last two axes; odd trailing rows/cols are dropped.

    Returns ``(out, argmax)`` where ``argmax`` holds, per output cell, the
    window position 0..3 (row-major) of the first maximum.
    """
    x = np.asarray(x, dtype=DTYPE)
    h, w = x.shape[-2:]
    if h < 2 or w < 2:
        raise ShapeError("maxpool needs at least 2x2 input")
    a, b, c, d = _quads(x, h // 2, w // 2)
    top = np.maximum(a, b)
    bottom = np.maximum(c, d)
    out = np.maximum(top, bottom)
    arg = np.where(top >= bottom, np.where(a >= b, 0, 1), np.where(c >= d, 2, 3)).astype(np.uint8)
    return out, arg


def maxpool2_backward(x_shape, argmax, grad_out):
    g = np.asarray(grad_out, dtype=DTYPE)
    h, w = x_shape[-2:]
    if g.shape != tuple(x_shape[:-2]) + (h // 2, w // 2):
        raise ShapeError("grad_out does not match pooled shape")
    gx = np.zeros(x_shape, dtype=DTYPE)
    for k, view in enumerate(_quads(gx, h // 2, w // 2)):
        np.copyto(view, g, where=argmax == k)
    return gx


# ---------------------------------------------------------------- dense


def dense_params(rng, n_in, n_out):
    return {"w": init_fan_scaled(rng, (n_out, n_in), n_in, n_out),
            "b": np.zeros(n_out, dtype=DTYPE)}


def dense_forward(x, p):
    return x @ p["w"].T + p["b"]


def dense_backward(x, p, grad_out):
    return grad_out @ p["w"], {"w": grad_out.T @ x, "b": grad_out.sum(axis=0)}


def relu_backward(y, grad_out):
    """Backward of ReLU given its *output*."""
    return grad_out * (y > 0)


# ---------------------------------------------------------------- dropout


def dropout_forward(x, keep, rng=None, train=True):
    """Inverted dropout; returns ``(out, mask)``.  Eval mode is the identity."""
    if not train or keep >= 1.0:
        return x, None
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    mask = (rng.random(x.shape) < keep) / keep
    return x * mask, mask


def dropout_backward(mask, grad_out):
    return grad_out if mask is None else grad_out * mask


# ---------------------------------------------------------------- softmax / xent


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent_forward(logits, labels):
    """Mean negative log-likelihood over rows; returns ``(loss, probs)``."""
    labels = np.asarray(labels)
    k = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelError(f"labels must lie in [0, {k - 1}]")
    z = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logz
    picked = np.take_along_axis(logp, labels[:, None], axis=-1)[:, 0]
    loss = float(-picked.mean())
    check_finite(np.float64(loss), "loss")
    return loss, np.exp(logp)


def softmax_xent_backward(probs, labels):
    g = probs.copy()
    g[np.arange(len(labels)), labels] -= 1.0
    return g / len(labels)
