"""Convert the digit samples shipped in the npm ``mnist`` package to IDX files.

The package stores 10,000 28x28 MNIST digits as JSON arrays of pixel/255
values rounded to three decimals, one file per class. This script restores
8-bit pixels, makes a stratified 85/15 train/test split with a fixed seed and
writes gzip-compressed IDX files under the standard MNIST names.

    npm pack mnist && tar xzf mnist-*.tgz
    python scripts/convert_npm_digits.py package/src/digits tests/data/digits
"""

import argparse
import json
from pathlib import Path

import numpy as np

from bnnkit.data import write_idx


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("digits_dir", type=Path)
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--test-fraction", type=float, default=0.15)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    splits = {"train": ([], []), "test": ([], [])}
    for digit in range(10):
        raw = np.asarray(json.loads((args.digits_dir / f"{digit}.json").read_text())["data"])
        images = np.rint(raw.reshape(-1, 28, 28) * 255).clip(0, 255).astype(np.uint8)
        order = rng.permutation(len(images))
        n_test = int(round(len(images) * args.test_fraction))
        for name, idx in (("test", order[:n_test]), ("train", order[n_test:])):
            splits[name][0].append(images[idx])
            splits[name][1].append(np.full(len(idx), digit, np.uint8))

    args.out_dir.mkdir(parents=True, exist_ok=True)
    prefix = {"train": "train", "test": "t10k"}
    for name, (imgs, labs) in splits.items():
        imgs, labs = np.concatenate(imgs), np.concatenate(labs)
        perm = rng.permutation(len(labs))
        write_idx(args.out_dir / f"{prefix[name]}-images-idx3-ubyte.gz", imgs[perm])
        write_idx(args.out_dir / f"{prefix[name]}-labels-idx1-ubyte.gz", labs[perm])
        print(f"{name}: {len(labs)} images")


if __name__ == "__main__":
    main()
