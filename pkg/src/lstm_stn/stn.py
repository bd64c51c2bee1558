"""Affine grid generation and bilinear sampling with exact gradients.

Coordinates are normalized to [-1, 1] and corner-aligned: target index 0 maps
to -1 and index n-1 to +1 (a single-pixel axis maps to 0).  A source
coordinate is converted to pixel units by ``(x + 1) * (W - 1) / 2`` before the
tent kernel ``max(0, 1 - |x - m|) * max(0, 1 - |y - n|)`` is applied, so
identity parameters on a same-size grid reproduce the image exactly.

Pixels outside the image contribute nothing; samples that fall off the image
are black.

The sampler only visits the (at most four) pixels with nonzero kernel weight.
For coordinate gradients each sample is assigned to the cell
``(ceil(x) - 1, ceil(x)]``, i.e. the derivative at a kink is the left limit.
"""
import numpy as np

from .tensor import DTYPE, ShapeError

IDENTITY = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], dtype=DTYPE)


def _axis(n):
    if n == 1:
        return np.zeros(1, dtype=DTYPE)
    return np.linspace(-1.0, 1.0, n, dtype=DTYPE)


def target_coords(out_h, out_w):
    """Homogeneous target coordinates ``(out_h*out_w, 3)`` as rows (x_t, y_t, 1)."""
    if out_h < 1 or out_w < 1:
        raise ValueError("grid extents must be positive")
    yt, xt = np.meshgrid(_axis(out_h), _axis(out_w), indexing="ij")
    return np.stack([xt.ravel(), yt.ravel(), np.ones(out_h * out_w, dtype=DTYPE)], axis=1)


def affine_grid(theta, out_h, out_w):
    """Map every target pixel through ``theta``; returns ``(..., out_h, out_w, 2)``.

    ``theta`` is ``(2, 3)`` or batched ``(N, 2, 3)``.  Channel 0 of the result
    is x_s (columns) and channel 1 is y_s (rows).
    """
    theta = np.asarray(theta, dtype=DTYPE)
    t = target_coords(out_h, out_w)
    grid = t @ np.swapaxes(theta, -1, -2)
    return grid.reshape(theta.shape[:-2] + (out_h, out_w, 2))


def affine_grid_backward(grad_grid, out_h, out_w):
    """Gradient w.r.t. theta: sum over pixels of grad_coords outer (x_t, y_t, 1)."""
    g = np.asarray(grad_grid, dtype=DTYPE)
    if g.shape[-3:] != (out_h, out_w, 2):
        raise ShapeError(f"grad_grid shape {g.shape} does not match {(out_h, out_w, 2)}")
    t = target_coords(out_h, out_w)
    g = g.reshape(g.shape[:-3] + (out_h * out_w, 2))
    return np.swapaxes(g, -1, -2) @ t


def _prepare(u, grid):
    u = np.asarray(u, dtype=DTYPE)
    grid = np.asarray(grid, dtype=DTYPE)
    single = u.ndim == 3
    if single:
        u, grid = u[None], grid[None]
    if u.ndim != 4 or grid.ndim != 4 or grid.shape[0] != u.shape[0] or grid.shape[-1] != 2:
        raise ShapeError(f"bad sampler shapes u={u.shape} grid={grid.shape}")
    return u, grid, single


def _corners(grid, h, w):
    xp = (grid[..., 0] + 1.0) * (w - 1) / 2.0
    yp = (grid[..., 1] + 1.0) * (h - 1) / 2.0
    x0 = np.ceil(xp).astype(np.int64) - 1
    y0 = np.ceil(yp).astype(np.int64) - 1
    fx = xp - x0  # in (0, 1]
    fy = yp - y0
    return x0, y0, fx, fy


def _taps(x0, y0, fx, fy, h, w):
    # (dy, dx, weight, d weight / d xpix, d weight / d ypix, valid)
    for dy, wy, dwy in ((0, 1.0 - fy, -1.0), (1, fy, 1.0)):
        for dx, wx, dwx in ((0, 1.0 - fx, -1.0), (1, fx, 1.0)):
            yy, xx = y0 + dy, x0 + dx
            valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            yield yy, xx, wy * wx, dwx * wy, wx * dwy, valid


def bilinear_sample(u, grid):
    """Sample ``u`` (``(C,H,W)`` or ``(N,C,H,W)``) at ``grid`` source coordinates."""
    u, grid, single = _prepare(u, grid)
    n, c, h, w = u.shape
    oh, ow = grid.shape[1:3]
    x0, y0, fx, fy = _corners(grid, h, w)
    flat = u.reshape(n, c, h * w)
    bidx = np.arange(n)[:, None, None]
    out = np.zeros((n, c, oh, ow), dtype=DTYPE)
    for yy, xx, wt, _, _, valid in _taps(x0, y0, fx, fy, h, w):
        idx = np.where(valid, yy * w + xx, 0)
        vals = flat[bidx[..., None], np.arange(c)[None, :, None, None], idx[:, None]]
        out += vals * np.where(valid, wt, 0.0)[:, None]
    return out[0] if single else out


def bilinear_sample_backward(u, grid, grad_v):
    """Returns ``(grad_u, grad_grid)`` for the sampler."""
    u, grid, single = _prepare(u, grid)
    gv = np.asarray(grad_v, dtype=DTYPE)
    if single:
        gv = gv[None]
    n, c, h, w = u.shape
    oh, ow = grid.shape[1:3]
    if gv.shape != (n, c, oh, ow):
        raise ShapeError(f"grad_v shape {gv.shape} does not match sampler output")
    x0, y0, fx, fy = _corners(grid, h, w)
    flat = u.reshape(n, c, h * w)
    bidx = np.arange(n)[:, None, None]
    cidx = np.arange(c)[None, :, None, None]
    # one flat slot per (image, channel, pixel) for bincount scatter
    base = (np.arange(n)[:, None] * c + np.arange(c)[None, :]) * (h * w)
    grad_u = np.zeros(n * c * h * w, dtype=DTYPE)
    gx = np.zeros((n, oh, ow), dtype=DTYPE)
    gy = np.zeros((n, oh, ow), dtype=DTYPE)
    for yy, xx, wt, dwx, dwy, valid in _taps(x0, y0, fx, fy, h, w):
        idx = np.where(valid, yy * w + xx, 0)
        vals = flat[bidx[..., None], cidx, idx[:, None]]  # n, c, oh, ow
        vmask = valid[:, None]
        contrib = np.where(vmask, gv * wt[:, None], 0.0)
        slots = base[:, :, None, None] + idx[:, None]
        grad_u += np.bincount(slots.ravel(), weights=contrib.ravel(), minlength=grad_u.size)
        gvv = np.where(vmask, gv * vals, 0.0).sum(axis=1)
        gx += gvv * dwx
        gy += gvv * dwy
    grad_grid = np.stack([gx * (w - 1) / 2.0, gy * (h - 1) / 2.0], axis=-1)
    grad_u = grad_u.reshape(n, c, h, w)
    if single:
        return grad_u[0], grad_grid[0]
    return grad_u, grad_grid
