"""``CKPT`` checkpoint files.

Layout (little-endian)::

    magic   b"CKPT"
    u16     version (1)
    u32     length of the JSON metadata, then the UTF-8 JSON (model config,
            sorted keys)
    u32     parameter count, then per parameter:
                u16 name length, name (UTF-8), TNSR tensor record
    u32     optimizer slot count, then slots in the same record form
    u64     training step counter

Writing the same state twice produces identical bytes.
"""
import json
import struct
from dataclasses import dataclass, field

from .models import ModelConfig, build_model, flatten
from .tensor import read_tensor, skip_tensor, write_tensor

MAGIC = b"CKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    meta: dict
    params: dict
    slots: dict = field(default_factory=dict)
    step: int = 0


def _write_table(f, table):
    f.write(struct.pack("<I", len(table)))
    for name in sorted(table):
        raw = name.encode()
        f.write(struct.pack("<H", len(raw)))
        f.write(raw)
        write_tensor(f, table[name])


def _read_table(f, keep=True):
    (count,) = struct.unpack("<I", _read(f, 4))
    table = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", _read(f, 2))
        name = _read(f, n).decode()
        try:
            if keep:
                table[name] = read_tensor(f)
            else:
                skip_tensor(f)
        except ValueError as e:
            raise CheckpointError(str(e)) from None
    return table


def _read(f, n):
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint")
    return buf


def write_checkpoint(path, ckpt):
    meta = json.dumps(ckpt.meta, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HI", VERSION, len(meta)))
        f.write(meta)
        _write_table(f, ckpt.params)
        _write_table(f, ckpt.slots)
        f.write(struct.pack("<Q", ckpt.step))


def read_checkpoint(path, slots=True):
    """Parse a CKPT file; ``slots=False`` skips loading the optimizer slots."""
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise CheckpointError("bad CKPT magic")
        version, mlen = struct.unpack("<HI", _read(f, 6))
        if version != VERSION:
            raise CheckpointError(f"unsupported CKPT version {version}")
        meta = json.loads(_read(f, mlen).decode())
        params = _read_table(f)
        slots = _read_table(f, keep=slots)
        (step,) = struct.unpack("<Q", _read(f, 8))
        if f.read(1):
            raise CheckpointError("trailing bytes after checkpoint")
    return Checkpoint(meta, params, slots, step)


def save_model(path, model, slots=None, step=0, extra=None):
    meta = {"model": vars(model.config).copy()}
    if extra:
        meta.update(extra)
    write_checkpoint(path, Checkpoint(meta, dict(flatten(model.params)), slots or {}, step))


def load_model(path, slots=True):
    """Rebuild the model stored at ``path``; returns ``(model, checkpoint)``.

    Each loaded array is dropped once copied in, so ``checkpoint.params``
    comes back empty.
    """
    ckpt = read_checkpoint(path, slots)
    try:
        config = ModelConfig(**ckpt.meta["model"])
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"checkpoint has no usable model config: {e}") from None
    model = build_model(config)
    own = dict(flatten(model.params))
    if set(own) != set(ckpt.params):
        raise CheckpointError("checkpoint tensors do not match the model layout")
    for name, arr in own.items():
        if arr.shape != ckpt.params[name].shape:
            raise CheckpointError(f"shape mismatch for {name}")
    for name, arr in own.items():
        arr[...] = ckpt.params.pop(name)
    return model, ckpt
