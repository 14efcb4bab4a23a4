"""Write the 5000-digit MNIST subset bundled with mlxtend as standard IDX files.

The full MNIST archive is not always downloadable; mlxtend ships 500 real
digits per class.  This splits them 400/100 per class into train/test and
writes the four usual ``*-idx?-ubyte`` files.

    python scripts/make_mnist_subset.py --out data/mnist
"""

import argparse
from pathlib import Path

import numpy as np
from mlxtend.data import mnist_data

from stripeprune.data import MNIST_FILES, write_idx


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="data/mnist")
    ap.add_argument("--test-per-class", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    X, y = mnist_data()
    X = X.reshape(-1, 28, 28).astype(np.uint8)
    rng = np.random.default_rng(args.seed)
    train_idx, test_idx = [], []
    for label in range(10):
        idx = rng.permutation(np.flatnonzero(y == label))
        test_idx.extend(idx[:args.test_per_class])
        train_idx.extend(idx[args.test_per_class:])
    train_idx = rng.permutation(train_idx)
    test_idx = rng.permutation(test_idx)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / MNIST_FILES["train_images"], X[train_idx])
    write_idx(out / MNIST_FILES["train_labels"], y[train_idx])
    write_idx(out / MNIST_FILES["test_images"], X[test_idx])
    write_idx(out / MNIST_FILES["test_labels"], y[test_idx])
    print(f"wrote {len(train_idx)} train / {len(test_idx)} test digits to {out}")


if __name__ == "__main__":
    main()
