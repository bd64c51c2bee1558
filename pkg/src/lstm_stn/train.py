"""Training loop, evaluation and glimpse export.

Everything here is driven by :class:`TrainConfig` so the CLI and the test
suite share one code path.  A run is reproducible from its config: weight
init, shuffling and dropout all draw from streams derived from ``seed``.
"""
import csv
import json
import logging
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import dataset, layers
from .checkpoint import load_model, save_model
from .models import ModelConfig, N_HEADS, build_model, flatten
from .tensor import DTYPE, NonFiniteError, child_rng

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "split", "loss", "per_digit_error", "wall_seconds"]
SPLIT_FILES = {"train": "train.sqmn", "val": "val.sqmn", "test": "test.sqmn"}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    model: str = "lstm-stn-cnn"
    d: int = 2
    epochs: int = 15
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    lr_halve_every: int = 10
    clip_norm: float = 0.0  # rescale the global gradient to at most this norm (0 = off)
    seed: int = 0
    mnist_dir: str = "data/mnist"
    data_dir: str = "runs/data"
    out_dir: str = "runs/train"
    deterministic: bool = False
    scale: str = "desk"
    train_limit: int = 0  # use only the first N training examples (0 = all)
    overrides: dict = field(default_factory=dict)  # extra ModelConfig fields

    def __post_init__(self):
        if self.d not in (1, 2, 3, 4):
            raise ValueError("d must be one of 1, 2, 3, 4")
        if self.scale not in ("desk", "full"):
            raise ValueError("scale must be 'desk' or 'full'")

    def model_config(self):
        return ModelConfig(kind=self.model, d=self.d, seed=self.seed, **self.overrides)


def split_sizes(scale):
    return dict(dataset.FULL_SIZES if scale == "full" else dataset.DESK_SIZES)


def default_batch_size(scale):
    return 256 if scale == "full" else 64


def lr_at(config, epoch):
    """Learning rate for 1-based ``epoch``: halved every ``lr_halve_every`` epochs."""
    return config.lr * 0.5 ** ((epoch - 1) // config.lr_halve_every)


def _single_thread():
    """Pin BLAS to one thread so reductions run in a fixed order."""
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - threadpoolctl ships with scikit-learn
        return nullcontext()
    return threadpool_limits(limits=1)


# ---------------------------------------------------------------- optimizer


def clip_global_norm(grads, max_norm):
    """Scale every gradient by one factor so the joint L2 norm is <= max_norm."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


class MomentumSGD:
    """Classic momentum: ``v <- mu * v - lr * g;  p <- p + v``."""

    def __init__(self, lr, momentum):
        self.lr = lr
        self.momentum = momentum
        self.velocity = {}

    def step(self, params, grads):
        for name, p in params.items():
            v = self.velocity.get(name)
            if v is None:
                v = self.velocity[name] = np.zeros_like(p)
            v *= self.momentum
            v -= self.lr * grads[name]
            p += v

    def slots(self):
        return {f"velocity/{k}": v for k, v in self.velocity.items()}

    def load_slots(self, slots):
        self.velocity = {k.split("/", 1)[1]: v.copy() for k, v in slots.items()
                         if k.startswith("velocity/")}


# ---------------------------------------------------------------- data


def gen_data(config, log_fn=log.info):
    """Write train/val/test SQMN files; train/val from MNIST train, test from MNIST t10k."""
    out = Path(config.data_dir)
    out.mkdir(parents=True, exist_ok=True)
    pools = {"train": dataset.load_mnist(config.mnist_dir, "train"),
             "test": dataset.load_mnist(config.mnist_dir, "t10k")}
    paths = {}
    for role, count in split_sizes(config.scale).items():
        pool = pools["test" if role == "test" else "train"]
        split = dataset.generate_split(pool, role, count, config.seed)
        paths[role] = out / SPLIT_FILES[role]
        dataset.write_split(paths[role], split)
        log_fn(f"wrote {count} {role} examples to {paths[role]}")
    return paths


def load_arrays(data_dir, role):
    canvases, labels, _, seeds = dataset.read_split_arrays(Path(data_dir) / SPLIT_FILES[role])
    return canvases, labels, seeds


def as_batch(canvases):
    return (canvases.astype(DTYPE) / 255.0)[:, None]


# ---------------------------------------------------------------- evaluation


def evaluate_arrays(model, canvases, labels, batch_size=100):
    """Mean loss and per-digit error over uint8 canvases."""
    total, wrong = 0.0, 0
    for i in range(0, len(canvases), batch_size):
        x = as_batch(canvases[i:i + batch_size])
        y = labels[i:i + batch_size]
        logits, _ = model.forward(x, train=False)
        n = len(y)
        loss, _ = layers.softmax_xent_forward(logits.reshape(n * N_HEADS, -1), y.reshape(-1))
        total += loss * n
        wrong += int((logits.argmax(-1) != y).sum())
    n = max(len(canvases), 1)
    return total / n, wrong / (N_HEADS * n)


def attention_focus(model, canvases):
    """Mean glimpse ink density divided by mean canvas ink density."""
    x = as_batch(canvases)
    views, _ = model.glimpses(x)
    return float(views.mean() / x.mean())


# ---------------------------------------------------------------- training


class MetricsLog:
    """Append-only CSV with header ``epoch,split,loss,per_digit_error,wall_seconds``."""

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.exists() or self.path.stat().st_size == 0:
            with open(self.path, "w", newline="") as f:
                csv.writer(f).writerow(METRICS_HEADER)

    def append(self, epoch, split, loss, err, wall):
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow([epoch, split, f"{loss:.6f}", f"{err:.6f}", f"{wall:.3f}"])


def train(config, log_fn=log.info, timing=True):
    """Run one training job; returns a summary dict (errors and file paths).

    ``timing=False`` writes 0 into the wall-clock column so two deterministic
    runs give byte-identical CSVs.
    """
    ctx = _single_thread() if config.deterministic else nullcontext()
    with ctx:
        return _train(config, log_fn, timing)


def _train(config, log_fn, timing):
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    xtr, ytr, seeds_tr = load_arrays(config.data_dir, "train")
    if config.train_limit:
        xtr, ytr, seeds_tr = (a[:config.train_limit] for a in (xtr, ytr, seeds_tr))
    xva, yva, _ = load_arrays(config.data_dir, "val")

    model = build_model(config.model_config())
    params = dict(flatten(model.params))
    opt = MomentumSGD(config.lr, config.momentum)
    metrics = MetricsLog(out / "metrics.csv")
    with open(out / "config.json", "w") as f:
        json.dump(asdict(config), f, indent=2, sort_keys=True)

    best_err, step = np.inf, 0
    start = time.time()
    for epoch in range(1, config.epochs + 1):
        opt.lr = lr_at(config, epoch)
        order = child_rng(config.seed, 2 * epoch).permutation(len(xtr))
        drop_rng = child_rng(config.seed, 2 * epoch + 1)
        loss_sum, wrong = 0.0, 0
        for b in range(0, len(order), config.batch_size):
            idx = order[b:b + config.batch_size]
            x, y = as_batch(xtr[idx]), ytr[idx]
            try:
                logits, cache = model.forward(x, train=True, rng=drop_rng)
                n = len(y)
                loss, probs = layers.softmax_xent_forward(logits.reshape(n * N_HEADS, -1),
                                                          y.reshape(-1))
            except NonFiniteError:
                loss = float("nan")
            if not np.isfinite(loss):
                dump = out / "diverged.json"
                dump.write_text(json.dumps({"epoch": epoch, "step": step,
                                            "example_seeds": [int(s) for s in seeds_tr[idx]]}))
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}; "
                                       f"batch seeds written to {dump}")
            grad = layers.softmax_xent_backward(probs, y.reshape(-1)).reshape(logits.shape)
            grads = dict(flatten(model.backward(cache, grad)))
            clip_global_norm(grads, config.clip_norm)
            opt.step(params, grads)
            step += 1
            loss_sum += loss * n
            wrong += int((logits.argmax(-1) != y).sum())
        wall = time.time() - start if timing else 0.0
        tr_loss, tr_err = loss_sum / len(order), wrong / (N_HEADS * len(order))
        metrics.append(epoch, "train", tr_loss, tr_err, wall)
        va_loss, va_err = evaluate_arrays(model, xva, yva)
        wall = time.time() - start if timing else 0.0
        metrics.append(epoch, "val", va_loss, va_err, wall)
        log_fn(f"epoch {epoch}: train loss {tr_loss:.4f} err {tr_err:.4f} | "
               f"val loss {va_loss:.4f} err {va_err:.4f} | lr {opt.lr:g}")
        extra = {"epoch": epoch, "val_error": va_err}
        if va_err < best_err:
            best_err = va_err
            save_model(out / "best.ckpt", model, opt.slots(), step, extra)
    save_model(out / "last.ckpt", model, opt.slots(), step, {"epoch": config.epochs})

    summary = {"best_val_error": float(best_err), "final_val_error": float(va_err),
               "best_checkpoint": str(out / "best.ckpt"), "last_checkpoint": str(out / "last.ckpt"),
               "metrics": str(out / "metrics.csv"), "steps": step}
    test_path = Path(config.data_dir) / SPLIT_FILES["test"]
    if test_path.exists():
        del model, params, opt, grads, cache, logits, probs, grad  # the large CNN needs the room
        best, _ = load_model(out / "best.ckpt", slots=False)
        xte, yte, _ = load_arrays(config.data_dir, "test")
        te_loss, te_err = evaluate_arrays(best, xte, yte)
        metrics.append(config.epochs, "test", te_loss, te_err,
                       time.time() - start if timing else 0.0)
        summary["test_error"] = float(te_err)
        log_fn(f"test per-digit error {100 * te_err:.1f}%")
    return summary


# ---------------------------------------------------------------- glimpses


def write_pgm(path, img):
    """Binary greymap (P5, maxval 255) from values in [0, 1]."""
    q = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    h, w = q.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(q.tobytes())


def read_pgm(path):
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError("only maxval 255 is supported")
    pixels = np.frombuffer(parts[4], dtype=np.uint8)
    if pixels.size != w * h:
        raise ValueError("PGM payload size mismatch")
    return pixels.reshape(h, w)


def dump_glimpses(model, canvases, index, out_dir):
    """Write the canvas and one image per glimpse (time order); returns the paths."""
    if not hasattr(model, "glimpses"):
        raise ValueError("glimpse export needs an LSTM-STN model")
    if not 0 <= index < len(canvases):
        raise IndexError(f"example index {index} out of range [0, {len(canvases)})")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    x = as_batch(canvases[index:index + 1])
    views, _ = model.glimpses(x)
    paths = [out / f"example{index:05d}_canvas.pgm"]
    write_pgm(paths[0], x[0, 0])
    for t in range(views.shape[1]):
        paths.append(out / f"example{index:05d}_glimpse{t + 1}.pgm")
        write_pgm(paths[-1], views[0, t, 0])
    return paths
