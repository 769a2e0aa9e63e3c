"""Convert mlxtend's bundled 5,000-digit MNIST CSV into IDX files.

Usage: python scripts/make_mnist_subset.py path/to/mnist_5k.csv.gz data/mnist5k

The CSV ships inside the mlxtend wheel (mlxtend/data/data/mnist_5k.csv.gz);
``pip download --no-deps mlxtend`` fetches it without installing.  The CSV is
sorted by class, so each digit contributes its first 400 rows to the
training split and its last 100 rows to the test split (shuffled with a
fixed seed).
"""

import sys
from pathlib import Path

import numpy as np

from mbq.data import write_mnist_idx

PER_CLASS_TRAIN = 400


def main(src, out_dir):
    raw = np.loadtxt(src, delimiter=",", dtype=np.int64)
    images = raw[:, :-1].astype(np.uint8).reshape(-1, 28, 28)
    labels = raw[:, -1].astype(np.uint8)
    train, test = [], []
    for c in range(10):
        rows = np.flatnonzero(labels == c)
        train += rows[:PER_CLASS_TRAIN].tolist()
        test += rows[PER_CLASS_TRAIN:].tolist()
    rng = np.random.default_rng(0)
    train = rng.permutation(train)
    test = rng.permutation(test)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_mnist_idx(images[train], labels[train],
                    out / "train-images-idx3-ubyte.gz", out / "train-labels-idx1-ubyte.gz")
    write_mnist_idx(images[test], labels[test],
                    out / "t10k-images-idx3-ubyte.gz", out / "t10k-labels-idx1-ubyte.gz")
    print(f"wrote {len(train)} train / {len(test)} test samples to {out}")


if __name__ == "__main__":
    main(*sys.argv[1:3])
