"""MNIST ingestion and synthesis of cluttered four-digit canvases.

A canvas is 100x100 with four MNIST digits that share one rotation angle and
sit on a straight baseline, plus ten 6x6 clutter blocks cut from other digits.
Every example is a pure function of its 64-bit seed and the digit pool.

Container format (``SQMN``, little-endian)::

    magic  b"SQMN"
    u16    version (1)
    u64    example count
    u16    canvas height, u16 canvas width
    per example:
        height*width bytes   canvas, round(value * 255)
        4 bytes              labels in reading order
        f64                  rotation angle in radians
        u64                  generation seed
"""
import gzip
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import DTYPE, make_rng

CANVAS_SIZE = 100
DIGIT_SIZE = 28
N_DIGITS = 4
N_NOISE = 10
NOISE_SIZE = 6
DIGIT_STEP = 22
MAX_ANGLE = math.pi / 4
MASK_THRESHOLD = 0.05

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049
SPLIT_MAGIC = b"SQMN"
SPLIT_VERSION = 1

DESK_SIZES = {"train": 5000, "val": 1000, "test": 1000}
FULL_SIZES = {"train": 70000, "val": 20000, "test": 2000}
_ROLE_CODES = {"train": 0, "val": 1, "test": 2}


class IdxFormatError(ValueError):
    pass


class SplitFormatError(ValueError):
    pass


class GenerationError(RuntimeError):
    def __init__(self, seed, msg="could not place digits"):
        super().__init__(f"{msg} (seed={seed})")
        self.seed = seed


# ---------------------------------------------------------------- IDX


def parse_idx_images(data):
    """Decode an IDX image file (magic 2051) into an (n, rows, cols) array in [0, 1]."""
    if len(data) < 8:
        raise IdxFormatError("truncated IDX header")
    magic, count = struct.unpack(">II", data[:8])
    if magic != IMAGE_MAGIC:
        raise IdxFormatError(f"bad image magic {magic}")
    # the low byte of the magic is the number of dimensions
    if (magic & 0xFF) != 3:
        raise IdxFormatError("image file must have 3 dimensions")
    if len(data) < 16:
        raise IdxFormatError("truncated IDX header")
    rows, cols = struct.unpack(">II", data[8:16])
    need = count * rows * cols
    payload = data[16:]
    if len(payload) < need:
        raise IdxFormatError(f"truncated payload: need {need} bytes, got {len(payload)}")
    pixels = np.frombuffer(payload, dtype=np.uint8, count=need)
    return pixels.reshape(count, rows, cols).astype(DTYPE) / 255.0


def parse_idx_labels(data):
    if len(data) < 8:
        raise IdxFormatError("truncated IDX header")
    magic, count = struct.unpack(">II", data[:8])
    if magic != LABEL_MAGIC:
        raise IdxFormatError(f"bad label magic {magic}")
    if len(data) - 8 < count:
        raise IdxFormatError("truncated label payload")
    labels = np.frombuffer(data[8:], dtype=np.uint8, count=count).astype(np.int64)
    if labels.size and labels.max() > 9:
        raise IdxFormatError("label outside 0-9")
    return labels


def _read_maybe_gz(path):
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _find(mnist_dir, stem):
    for name in (stem, stem + ".gz"):
        p = Path(mnist_dir) / name
        if p.exists():
            return p
    raise FileNotFoundError(f"no {stem}[.gz] in {mnist_dir}")


@dataclass
class DigitPool:
    images: np.ndarray  # (n, 28, 28) in [0, 1]
    labels: np.ndarray  # (n,)

    def __len__(self):
        return len(self.labels)


def load_mnist(mnist_dir, split="train"):
    """Load ``train`` or ``t10k`` IDX files (raw or gzipped) from a directory."""
    images = parse_idx_images(_read_maybe_gz(_find(mnist_dir, f"{split}-images-idx3-ubyte")))
    labels = parse_idx_labels(_read_maybe_gz(_find(mnist_dir, f"{split}-labels-idx1-ubyte")))
    if len(images) != len(labels):
        raise IdxFormatError(f"{len(images)} images but {len(labels)} labels")
    return DigitPool(images, labels)


# ---------------------------------------------------------------- rotation


def rotated_size(angle, size=DIGIT_SIZE):
    c, s = abs(math.cos(angle)), abs(math.sin(angle))
    return int(math.ceil(size * (c + s) - 1e-9))


def rotate_digit(pixels, angle):
    """Rotate a square digit about its center by inverse mapping.

    The output is the tight axis-aligned box of the rotated square; returns
    ``(patch, mask)`` where mask marks ink above 0.05.  Positive angles turn
    the digit's x axis towards +y (rows grow downward).
    """
    n = pixels.shape[0]
    out = rotated_size(angle, n)
    c, s = math.cos(angle), math.sin(angle)
    src_c = (n - 1) / 2.0
    dst_c = (out - 1) / 2.0
    dy, dx = np.meshgrid(np.arange(out) - dst_c, np.arange(out) - dst_c, indexing="ij")
    sx = c * dx + s * dy + src_c
    sy = -s * dx + c * dy + src_c

    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx, fy = sx - x0, sy - y0
    patch = np.zeros((out, out), dtype=DTYPE)
    for oy, wy in ((0, 1.0 - fy), (1, fy)):
        for ox, wx in ((0, 1.0 - fx), (1, fx)):
            yy, xx = y0 + oy, x0 + ox
            ok = (yy >= 0) & (yy < n) & (xx >= 0) & (xx < n)
            vals = np.zeros_like(patch)
            vals[ok] = pixels[yy[ok], xx[ok]]
            patch += wy * wx * vals
    return patch, patch > MASK_THRESHOLD


# ---------------------------------------------------------------- canvases


@dataclass
class CanvasExample:
    canvas: np.ndarray
    labels: tuple
    angle: float
    seed: int
    anchors: list = field(default_factory=list)  # top-left (row, col) of each digit box
    patch_size: int = 0
    masks: list = field(default_factory=list)  # per-digit ink masks, patch-local
    noise_origins: list = field(default_factory=list)


def _baseline_offsets(angle, step=DIGIT_STEP):
    c, s = math.cos(angle), math.sin(angle)
    return [(int(round(i * step * s)), int(round(i * step * c))) for i in range(N_DIGITS)]


def _paste_max(canvas, patch, r, c):
    h, w = patch.shape
    np.maximum(canvas[r:r + h, c:c + w], patch, out=canvas[r:r + h, c:c + w])


def generate_canvas(pool, seed):
    """Build one cluttered canvas from ``pool``; deterministic in ``seed``."""
    if len(pool) == 0:
        raise ValueError("empty digit pool")
    rng = make_rng(seed)
    attempts = 0
    while True:
        angle = float(rng.uniform(-MAX_ANGLE, MAX_ANGLE))
        size = rotated_size(angle)
        offsets = _baseline_offsets(angle)
        rmin = min(o[0] for o in offsets)
        rmax = max(o[0] for o in offsets)
        cmax = max(o[1] for o in offsets)
        # first anchor range such that every box lands inside the canvas
        r_lo, r_hi = -rmin, CANVAS_SIZE - size - rmax
        c_lo, c_hi = 0, CANVAS_SIZE - size - cmax
        if r_hi < r_lo or c_hi < c_lo:
            attempts += 1
            if attempts >= 1000:
                raise GenerationError(seed)
            continue
        for _ in range(100):
            attempts += 1
            if attempts > 1000:
                raise GenerationError(seed)
            idx = rng.integers(0, len(pool), size=N_DIGITS)
            r0 = int(rng.integers(r_lo, r_hi + 1))
            c0 = int(rng.integers(c_lo, c_hi + 1))
            anchors = [(r0 + dr, c0 + dc) for dr, dc in offsets]
            patches = [rotate_digit(pool.images[i], angle) for i in idx]
            occupied = np.zeros((CANVAS_SIZE, CANVAS_SIZE), dtype=bool)
            clash = False
            for (r, c), (_, mask) in zip(anchors, patches):
                region = occupied[r:r + size, c:c + size]
                if np.any(region & mask):
                    clash = True
                    break
                region |= mask
            if not clash:
                break
        else:
            continue

        canvas = np.zeros((CANVAS_SIZE, CANVAS_SIZE), dtype=DTYPE)
        for (r, c), (patch, _) in zip(anchors, patches):
            _paste_max(canvas, patch, r, c)
        noise_origins = []
        for _ in range(N_NOISE):
            src = pool.images[rng.integers(0, len(pool))]
            # crop from the 20x20 core where MNIST ink lives
            sr, sc = rng.integers(4, DIGIT_SIZE - 4 - NOISE_SIZE + 1, size=2)
            r, c = rng.integers(0, CANVAS_SIZE - NOISE_SIZE + 1, size=2)
            _paste_max(canvas, src[sr:sr + NOISE_SIZE, sc:sc + NOISE_SIZE], int(r), int(c))
            noise_origins.append((int(r), int(c)))
        return CanvasExample(
            canvas=canvas,
            labels=tuple(int(pool.labels[i]) for i in idx),
            angle=angle,
            seed=int(seed),
            anchors=anchors,
            patch_size=size,
            masks=[m for _, m in patches],
            noise_origins=noise_origins,
        )


def example_seed(master_seed, role, index):
    ss = np.random.SeedSequence([master_seed, _ROLE_CODES[role], index])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass
class DatasetSplit:
    role: str
    examples: list

    def __len__(self):
        return len(self.examples)

    def arrays(self):
        """Stack into ``(canvases[n,1,H,W], labels[n,4])``."""
        if not self.examples:
            return (np.zeros((0, 1, CANVAS_SIZE, CANVAS_SIZE), dtype=DTYPE),
                    np.zeros((0, N_DIGITS), dtype=np.int64))
        x = np.stack([e.canvas for e in self.examples])[:, None].astype(DTYPE)
        y = np.array([e.labels for e in self.examples], dtype=np.int64)
        return x, y


def generate_split(pool, role, count, master_seed):
    examples = [generate_canvas(pool, example_seed(master_seed, role, i)) for i in range(count)]
    return DatasetSplit(role, examples)


# ---------------------------------------------------------------- container


def write_split(path, split):
    h = w = CANVAS_SIZE
    if split.examples:
        h, w = split.examples[0].canvas.shape
    with open(path, "wb") as f:
        f.write(SPLIT_MAGIC)
        f.write(struct.pack("<HQHH", SPLIT_VERSION, len(split), h, w))
        for e in split.examples:
            q = np.clip(np.rint(e.canvas * 255.0), 0, 255).astype(np.uint8)
            f.write(q.tobytes())
            f.write(bytes(e.labels))
            f.write(struct.pack("<dQ", e.angle, e.seed))


def read_split(path, role="train"):
    data = Path(path).read_bytes()
    if data[:4] != SPLIT_MAGIC:
        raise SplitFormatError("bad SQMN magic")
    if len(data) < 18:
        raise SplitFormatError("truncated SQMN header")
    version, count, h, w = struct.unpack("<HQHH", data[4:18])
    if version != SPLIT_VERSION:
        raise SplitFormatError(f"unsupported SQMN version {version}")
    rec = h * w + N_DIGITS + 16
    if len(data) != 18 + count * rec:
        raise SplitFormatError("truncated or oversized SQMN payload")
    examples = []
    off = 18
    for _ in range(count):
        canvas = np.frombuffer(data, np.uint8, h * w, off).reshape(h, w).astype(DTYPE) / 255.0
        off += h * w
        labels = tuple(data[off:off + N_DIGITS])
        off += N_DIGITS
        angle, seed = struct.unpack("<dQ", data[off:off + 16])
        off += 16
        examples.append(CanvasExample(canvas=canvas, labels=labels, angle=angle, seed=seed))
    return DatasetSplit(role, examples)


def read_split_arrays(path):
    """Memory-light reader: ``(canvases uint8 (n,H,W), labels (n,4), angles, seeds)``."""
    data = Path(path).read_bytes()
    if data[:4] != SPLIT_MAGIC:
        raise SplitFormatError("bad SQMN magic")
    if len(data) < 18:
        raise SplitFormatError("truncated SQMN header")
    version, count, h, w = struct.unpack("<HQHH", data[4:18])
    if version != SPLIT_VERSION:
        raise SplitFormatError(f"unsupported SQMN version {version}")
    rec = np.dtype([("canvas", "u1", (h, w)), ("labels", "u1", (N_DIGITS,)),
                    ("angle", "<f8"), ("seed", "<u8")])
    if len(data) != 18 + count * rec.itemsize:
        raise SplitFormatError("truncated or oversized SQMN payload")
    recs = np.frombuffer(data, dtype=rec, count=count, offset=18)
    return (recs["canvas"].copy(), recs["labels"].astype(np.int64), recs["angle"].copy(),
            recs["seed"].copy())
