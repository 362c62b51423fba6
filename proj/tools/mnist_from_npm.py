#!/usr/bin/env python3
"""Convert the digit JSON files shipped in the `mnist` npm package to gzip IDX.

The package holds 10,000 MNIST digits as src/digits/<d>.json, each a flat
list of 784-pixel images with values in [0, 1]. This writes
train-{images-idx3,labels-idx1}-ubyte.gz and t10k-*.gz for `load_mnist`.

    npm pack mnist && tar xf mnist-*.tgz
    python3 tools/mnist_from_npm.py package data/mnist
"""

import argparse
import gzip
import json
import struct
from pathlib import Path

import numpy as np

PIXELS = 28 * 28


def load_digits(pkg: Path):
    images, labels = [], []
    for d in range(10):
        flat = np.asarray(json.loads((pkg / "src" / "digits" / f"{d}.json").read_text())["data"], dtype=np.float64)
        if flat.size % PIXELS:
            raise SystemExit(f"digit {d}: {flat.size} values is not a multiple of {PIXELS}")
        imgs = np.rint(flat.reshape(-1, PIXELS) * 255.0).clip(0, 255).astype(np.uint8)
        images.append(imgs)
        labels.append(np.full(len(imgs), d, dtype=np.uint8))
    return np.concatenate(images), np.concatenate(labels)


def write_idx(out: Path, prefix: str, images: np.ndarray, labels: np.ndarray) -> None:
    with gzip.GzipFile(out / f"{prefix}-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, len(images), 28, 28))
        f.write(images.tobytes())
    with gzip.GzipFile(out / f"{prefix}-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(labels.tobytes())


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("package", type=Path, help="unpacked npm package directory")
    ap.add_argument("out", type=Path, help="output directory")
    ap.add_argument("--test", type=int, default=2000, help="test images (default 2000)")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    images, labels = load_digits(args.package)
    order = np.random.default_rng(args.seed).permutation(len(images))
    images, labels = images[order], labels[order]
    n_test = args.test
    if not 0 < n_test < len(images):
        raise SystemExit(f"--test must be in (0, {len(images)})")
    args.out.mkdir(parents=True, exist_ok=True)
    write_idx(args.out, "train", images[n_test:], labels[n_test:])
    write_idx(args.out, "t10k", images[:n_test], labels[:n_test])
    counts = np.bincount(labels[n_test:], minlength=10)
    print(f"wrote {len(images) - n_test} train / {n_test} test images to {args.out}; train counts {counts.tolist()}")


if __name__ == "__main__":
    main()
