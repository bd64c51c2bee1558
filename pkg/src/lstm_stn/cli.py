"""Command-line driver: ``lstm-stn {gen-data,train,eval,dump-glimpses}``."""
import argparse
import json
import logging
import sys

from . import train as T
from .checkpoint import load_model
from .dataset import GenerationError
from .models import MODEL_KINDS

log = logging.getLogger("lstm_stn")


def _common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mnist-dir", default="data/mnist")
    p.add_argument("--data-dir", default="runs/data")
    p.add_argument("--out-dir", default="runs/train")
    p.add_argument("--scale", choices=("desk", "full"), default="desk")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded BLAS for bit-reproducible runs")


def build_parser():
    parser = argparse.ArgumentParser(prog="lstm-stn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render train/val/test canvases from MNIST")
    _common(p)

    p = sub.add_parser("train", help="train one model and write metrics and checkpoints")
    _common(p)
    p.add_argument("--model", choices=sorted(MODEL_KINDS), default="lstm-stn-cnn")
    p.add_argument("--d", type=int, choices=(1, 2, 3, 4), default=2)
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--batch-size", type=int, default=None,
                   help="default 64 at desk scale, 256 at full scale")
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--clip-norm", type=float, default=0.0,
                   help="clip the global gradient norm (0 = off)")
    p.add_argument("--train-limit", type=int, default=0, help="use only the first N examples")

    p = sub.add_parser("eval", help="per-digit error of one or more checkpoints")
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("--data-dir", default="runs/data")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--json", action="store_true", help="print results as JSON")

    p = sub.add_parser("dump-glimpses", help="write canvas and glimpses as PGM images")
    p.add_argument("checkpoint")
    p.add_argument("--data-dir", default="runs/data")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--index", type=int, nargs="+", default=[0])
    p.add_argument("--out-dir", default="runs/glimpses")
    return parser


def _train_config(args):
    bs = args.batch_size or T.default_batch_size(args.scale)
    return T.TrainConfig(model=args.model, d=args.d, epochs=args.epochs, batch_size=bs,
                         lr=args.lr, momentum=args.momentum, clip_norm=args.clip_norm,
                         seed=args.seed,
                         mnist_dir=args.mnist_dir, data_dir=args.data_dir, out_dir=args.out_dir,
                         deterministic=args.deterministic, scale=args.scale,
                         train_limit=args.train_limit)


def cmd_gen_data(args):
    T.gen_data(T.TrainConfig(seed=args.seed, mnist_dir=args.mnist_dir, data_dir=args.data_dir,
                             scale=args.scale))


def cmd_train(args):
    summary = T.train(_train_config(args), log_fn=log.info)
    print(json.dumps(summary, indent=2))


def cmd_eval(args):
    x, y, _ = T.load_arrays(args.data_dir, args.split)
    rows = []
    for path in args.checkpoints:
        model, _ = load_model(path, slots=False)
        loss, err = T.evaluate_arrays(model, x, y)
        rows.append({"checkpoint": path, "model": model.config.kind, "d": model.config.d,
                     "loss": loss, "per_digit_error": err})
    if args.json:
        print(json.dumps(rows, indent=2))
        return
    print(f"{'model':<14}{'d':>3}{'loss':>9}{'error %':>9}  checkpoint")
    for r in rows:
        print(f"{r['model']:<14}{r['d']:>3}{r['loss']:>9.4f}{100 * r['per_digit_error']:>9.1f}"
              f"  {r['checkpoint']}")


def cmd_dump_glimpses(args):
    model, _ = load_model(args.checkpoint, slots=False)
    x, _, _ = T.load_arrays(args.data_dir, args.split)
    for i in args.index:
        for path in T.dump_glimpses(model, x, i, args.out_dir):
            print(path)


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "dump-glimpses": cmd_dump_glimpses}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except (OSError, ValueError, IndexError, GenerationError, T.TrainingDiverged) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
