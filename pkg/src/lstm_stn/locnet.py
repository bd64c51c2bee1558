"""Recurrent localization network.

A conv stack turns the canvas into a feature vector once; an LSTM then runs
for a fixed number of steps on that same vector, and a linear head maps each
hidden state to the six affine parameters of one glimpse.

Parameter layout (nested dicts of float64 arrays)::

    {"conv": [{"w", "b"}, ...],          # 4 x conv 20@3x3
     "lstm": {"W": (4H, F), "U": (4H, H), "b": (4H,)},   # gate order i, f, o, g
     "head": {"w": (6, H), "b": (6,)}}
"""
import numpy as np

from . import layers
from .stn import IDENTITY
from .tensor import DTYPE, ShapeError, init_fan_scaled, relu, sigmoid

N_CONV = 4
LOC_FILTERS = 20
HIDDEN = 256
STEPS = 4


def conv_stack_params(rng, n_layers=N_CONV, filters=LOC_FILTERS, in_ch=1):
    stack = []
    for i in range(n_layers):
        stack.append(layers.conv_params(rng, in_ch if i == 0 else filters, filters))
    return stack


def feature_dim(side, n_layers=N_CONV, filters=LOC_FILTERS):
    for _ in range(n_layers):
        side //= 2
    return filters * side * side


def lstm_params(rng, n_in, hidden=HIDDEN):
    b = np.zeros(4 * hidden, dtype=DTYPE)
    b[hidden:2 * hidden] = 1.0  # forget gate
    return {"W": init_fan_scaled(rng, (4 * hidden, n_in), n_in, 4 * hidden),
            "U": init_fan_scaled(rng, (4 * hidden, hidden), hidden, 4 * hidden),
            "b": b}


def identity_head(n_in):
    return {"w": np.zeros((6, n_in), dtype=DTYPE), "b": IDENTITY.ravel().copy()}


def locnet_params(rng, side=100, hidden=HIDDEN, filters=LOC_FILTERS, n_conv=N_CONV):
    return {"conv": conv_stack_params(rng, n_conv, filters),
            "lstm": lstm_params(rng, feature_dim(side, n_conv, filters), hidden),
            "head": identity_head(hidden)}


# ---------------------------------------------------------------- features


def extract_features(u, stack):
    """Run ``(conv, ReLU, maxpool2)`` per layer and flatten; ``u`` is ``(N, 1, H, W)``."""
    side = min(u.shape[-2:])
    if side < 2 ** len(stack):
        raise ShapeError(f"input {u.shape[-2:]} too small for {len(stack)} pooling layers")
    cache = []
    x = layers.to_cnhw(u)
    for p in stack:
        a, cols = layers.conv_cnhw_forward(x, p)
        np.maximum(a, 0.0, out=a)
        y, arg = layers.maxpool2_forward(a)
        cache.append((x.shape, cols, a, arg))
        x = y
    feats = np.swapaxes(x, 0, 1).reshape(x.shape[1], -1)
    return feats, (cache, x.shape)


def extract_features_backward(cache, stack, grad_f, need_input_grad=True):
    """Returns ``(grad_u or None, per-layer grads)``."""
    layer_cache, out_shape = cache
    c, n, h, w = out_shape
    g = layers.to_cnhw(grad_f.reshape(n, c, h, w))
    grads = [None] * len(stack)
    for i in reversed(range(len(stack))):
        x_shape, cols, a, arg = layer_cache[i]
        g = layers.maxpool2_backward(a.shape, arg, g)
        g *= a > 0
        g, grads[i] = layers.conv_cnhw_backward(cols, x_shape, stack[i], g,
                                                need_dx=i > 0 or need_input_grad)
    return (None if g is None else layers.to_cnhw(g)), grads


# ---------------------------------------------------------------- LSTM


def lstm_step(x, prev, p):
    """One LSTM step without peepholes; ``prev`` is ``(c, h)``.  Returns ``((c, h), cache)``."""
    c_prev, h_prev = prev
    hid = p["U"].shape[1]
    if x.shape[-1] != p["W"].shape[1] or h_prev.shape[-1] != hid:
        raise ShapeError("LSTM input or state width mismatch")
    z = x @ p["W"].T + h_prev @ p["U"].T + p["b"]
    i = sigmoid(z[..., :hid])
    f = sigmoid(z[..., hid:2 * hid])
    o = sigmoid(z[..., 2 * hid:3 * hid])
    g = np.tanh(z[..., 3 * hid:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return (c, h), (x, c_prev, h_prev, i, f, o, g, tc)


def lstm_step_backward(cache, p, grad_c, grad_h):
    """Returns ``(grad_x, grad_c_prev, grad_h_prev, grads)``."""
    x, c_prev, h_prev, i, f, o, g, tc = cache
    do = grad_h * tc
    dc = grad_c + grad_h * o * (1.0 - tc * tc)
    di = dc * g
    dg = dc * i
    df = dc * c_prev
    dz = np.concatenate([di * i * (1 - i), df * f * (1 - f), do * o * (1 - o), dg * (1 - g * g)], axis=-1)
    grads = {"W": dz.T @ x, "U": dz.T @ h_prev, "b": dz.sum(axis=0)}
    return dz @ p["W"], dc * f, dz @ p["U"], grads


def _zeros_like_tree(tree):
    if isinstance(tree, dict):
        return {k: _zeros_like_tree(v) for k, v in tree.items()}
    if isinstance(tree, list):
        return [_zeros_like_tree(v) for v in tree]
    return np.zeros_like(tree)


def _accumulate(dst, src):
    for k, v in src.items():
        dst[k] += v


# ---------------------------------------------------------------- sequence


def localize_sequence(u, p, steps=STEPS):
    """Emit one affine transform per step: ``(N, steps, 2, 3)`` plus a cache.

    Features are extracted once and the same vector feeds every step; the
    state starts at zero.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    feats, fcache = extract_features(u, p["conv"])
    n = feats.shape[0]
    hid = p["lstm"]["U"].shape[1]
    state = (np.zeros((n, hid), dtype=DTYPE), np.zeros((n, hid), dtype=DTYPE))
    thetas, step_caches, hs = [], [], []
    for _ in range(steps):
        state, sc = lstm_step(feats, state, p["lstm"])
        step_caches.append(sc)
        hs.append(state[1])
        thetas.append(layers.dense_forward(state[1], p["head"]).reshape(n, 2, 3))
    return np.stack(thetas, axis=1), (fcache, step_caches, hs)


def localize_sequence_backward(cache, p, grad_thetas, need_input_grad=True):
    """Backpropagation through time; returns ``(grads, grad_u)``."""
    fcache, step_caches, hs = cache
    steps = len(step_caches)
    if grad_thetas.shape[1] != steps:
        raise ShapeError(f"expected gradients for {steps} steps, got {grad_thetas.shape[1]}")
    n = grad_thetas.shape[0]
    grads = {"lstm": _zeros_like_tree(p["lstm"]), "head": _zeros_like_tree(p["head"])}
    grad_feats = 0.0
    dc = np.zeros_like(hs[0])
    dh_next = np.zeros_like(hs[0])
    for t in reversed(range(steps)):
        gt = grad_thetas[:, t].reshape(n, 6)
        dh, hg = layers.dense_backward(hs[t], p["head"], gt)
        _accumulate(grads["head"], hg)
        dx, dc, dh_next, lg = lstm_step_backward(step_caches[t], p["lstm"], dc, dh + dh_next)
        _accumulate(grads["lstm"], lg)
        grad_feats = grad_feats + dx
    grad_u, grads["conv"] = extract_features_backward(fcache, p["conv"], grad_feats,
                                                      need_input_grad)
    return grads, grad_u
