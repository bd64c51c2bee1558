"""Convert the digit subset bundled in the npm ``mnist`` package into IDX files.

The package (MIT, https://www.npmjs.com/package/mnist) ships 10000 MNIST digits
as JSON arrays of grey values already divided by 255.  This script restores the
byte values and writes the four standard gzipped IDX files, holding out the
last 20% of every class as the ``t10k`` split.

    npm pack mnist && mkdir npm && tar xzf mnist-1.1.0.tgz -C npm
    python scripts/npm_mnist_to_idx.py npm/package/src/digits data/mnist
"""
import argparse
import gzip
import json
import struct
from pathlib import Path

import numpy as np


def write_idx(path, images, labels):
    n = len(labels)
    with gzip.GzipFile(path[0], "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 2051, n, 28, 28))
        f.write(images.astype(np.uint8).tobytes())
    with gzip.GzipFile(path[1], "wb", mtime=0) as f:
        f.write(struct.pack(">II", 2049, n))
        f.write(labels.astype(np.uint8).tobytes())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("digits_dir", type=Path)
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--test-fraction", type=float, default=0.2)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    splits = {"train": ([], []), "t10k": ([], [])}
    for digit in range(10):
        raw = json.loads((args.digits_dir / f"{digit}.json").read_text())["data"]
        imgs = np.rint(np.asarray(raw, dtype=np.float64).reshape(-1, 28, 28) * 255.0)
        imgs = np.clip(imgs, 0, 255)
        n_test = int(round(len(imgs) * args.test_fraction))
        for name, part in (("train", imgs[:-n_test]), ("t10k", imgs[-n_test:])):
            splits[name][0].append(part)
            splits[name][1].append(np.full(len(part), digit))

    rng = np.random.default_rng(args.seed)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    for name, (imgs, labels) in splits.items():
        imgs, labels = np.concatenate(imgs), np.concatenate(labels)
        order = rng.permutation(len(labels))
        write_idx((args.out_dir / f"{name}-images-idx3-ubyte.gz",
                   args.out_dir / f"{name}-labels-idx1-ubyte.gz"),
                  imgs[order], labels[order])
        print(f"{name}: {len(labels)} digits")


if __name__ == "__main__":
    main()
