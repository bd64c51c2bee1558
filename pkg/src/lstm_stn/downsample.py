"""Box-average down-sampling by an integer factor."""
import numpy as np

from .tensor import DTYPE, ShapeError


class DivisibilityError(ValueError):
    pass


def n_points(h, w, d):
    """Number of pixels per channel left after down-sampling by ``d``."""
    if h % d or w % d:
        raise DivisibilityError(f"d={d} does not divide {h}x{w}")
    return (h // d) * (w // d)


def avg_downsample(u, d):
    """Replace every ``d x d`` window of ``(..., H, W)`` by its mean.

    ``d`` must divide both H and W; nothing is silently cropped.
    """
    u = np.asarray(u, dtype=DTYPE)
    if d < 1:
        raise DivisibilityError("factor must be a positive integer")
    h, w = u.shape[-2:]
    if h % d or w % d:
        raise DivisibilityError(f"d={d} does not divide {h}x{w}")
    if d == 1:
        return u
    lead = u.shape[:-2]
    return u.reshape(lead + (h // d, d, w // d, d)).mean(axis=(-3, -1))


def avg_downsample_backward(grad_v, d, in_shape=None):
    g = np.asarray(grad_v, dtype=DTYPE)
    if in_shape is not None and tuple(in_shape[:-2]) + (in_shape[-2] // d, in_shape[-1] // d) != g.shape:
        raise ShapeError(f"grad {g.shape} does not match input {in_shape} at d={d}")
    if d == 1:
        return g
    return np.repeat(np.repeat(g, d, axis=-2), d, axis=-1) / (d * d)


def pad_to_multiple(u, d):
    """Zero-pad the trailing two axes symmetrically up to the next multiple of ``d``.

    Returns ``(padded, (top, left))``; used where a fixed-size map (100x100)
    has to be reduced by a factor that does not divide it.
    """
    h, w = u.shape[-2:]
    ph, pw = (-h) % d, (-w) % d
    if not ph and not pw:
        return u, (0, 0)
    top, left = ph // 2, pw // 2
    pads = [(0, 0)] * (u.ndim - 2) + [(top, ph - top), (left, pw - left)]
    return np.pad(u, pads), (top, left)


def crop_padding(g, shape, offset):
    top, left = offset
    h, w = shape[-2:]
    return g[..., top:top + h, left:left + w]
