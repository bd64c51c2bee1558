"""Tensor primitives shared by every layer.

Tensors are plain ``numpy.ndarray`` objects of dtype float64, row-major.  The
helpers here add the shape and finiteness checks the rest of the package
relies on, the seeded generator used everywhere, and the ``TNSR`` binary
serialization used by checkpoints.

Random streams come from numpy's PCG64 bit generator.  A stream is a pure
function of its seed; child streams for parallel work are derived with
``child_rng(seed, index)`` so results never depend on scheduling.
"""
import struct

import numpy as np

DTYPE = np.float64
TENSOR_MAGIC = b"TNSR"


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


def make_rng(seed):
    return np.random.Generator(np.random.PCG64(seed))


def child_rng(seed, index):
    """Independent stream for work item ``index`` under a master ``seed``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index])))


def as_tensor(x):
    return np.asarray(x, dtype=DTYPE, order="C")


def check_finite(x, what="tensor"):
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return x


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return check_finite(a @ b, "matmul result")


def _binary(op, a, b):
    a = as_tensor(a)
    if np.ndim(b) != 0:
        b = as_tensor(b)
        if a.shape != b.shape:
            raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    with np.errstate(all="ignore"):  # check_finite reports it instead
        out = op(a, b if np.ndim(b) else float(b))
    return check_finite(out)


def ew_add(a, b):
    return _binary(np.add, a, b)


def ew_mul(a, b):
    return _binary(np.multiply, a, b)


def ew_map(fn, a):
    with np.errstate(all="ignore"):  # check_finite reports it instead
        out = as_tensor(fn(as_tensor(a)))
    return check_finite(out)


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=DTYPE)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x):
    return np.maximum(x, 0.0)


def init_fan_scaled(rng, shape, fan_in, fan_out):
    """Uniform draw in +-sqrt(6 / (fan_in + fan_out))."""
    if fan_in <= 0 or fan_out <= 0:
        raise ValueError("fan_in and fan_out must be positive")
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=tuple(shape)).astype(DTYPE)


def write_tensor(stream, x):
    """Little-endian: magic, u32 rank, u64 extents, raw f64 payload."""
    x = as_tensor(x)
    stream.write(TENSOR_MAGIC)
    stream.write(struct.pack("<I", x.ndim))
    stream.write(struct.pack(f"<{x.ndim}Q", *x.shape))
    stream.write(memoryview(x.astype("<f8", copy=False)).cast("B"))


def _read_exact(stream, n):
    buf = stream.read(n)
    if len(buf) != n:
        raise ValueError("truncated tensor record")
    return buf


def read_tensor(stream):
    if _read_exact(stream, 4) != TENSOR_MAGIC:
        raise ValueError("bad tensor magic")
    (rank,) = struct.unpack("<I", _read_exact(stream, 4))
    shape = struct.unpack(f"<{rank}Q", _read_exact(stream, 8 * rank))
    count = int(np.prod(shape, dtype=np.int64))
    data = np.empty(count, dtype="<f8")
    if stream.readinto(memoryview(data).cast("B")) != 8 * count:
        raise ValueError("truncated tensor record")
    return data.astype(DTYPE, copy=False).reshape(shape)


def skip_tensor(stream):
    """Advance past one tensor record without loading its payload."""
    if _read_exact(stream, 4) != TENSOR_MAGIC:
        raise ValueError("bad tensor magic")
    (rank,) = struct.unpack("<I", _read_exact(stream, 4))
    shape = struct.unpack(f"<{rank}Q", _read_exact(stream, 8 * rank))
    stream.seek(8 * int(np.prod(shape, dtype=np.int64)), 1)
