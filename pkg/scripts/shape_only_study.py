"""Shape-only training with different sets of trainable parameters.

Conv weights stay at their random initialization in every run; each row
lists which other parameter kinds receive updates and the final test
accuracy on the desk task.

    python scripts/shape_only_study.py
"""

import argparse
import time

from stripeprune.data import load_dataset
from stripeprune.train import TRAINABLE, TrainConfig, train

SETS = [
    ("skeleton", {"skeleton"}),
    ("none", set()),
    ("skeleton+bn", {"skeleton", "bn"}),
    ("bn", {"bn"}),
    ("skeleton+bn+linear", {"skeleton", "bn", "linear"}),
    ("bn+linear", {"bn", "linear"}),
]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data-dir", default="data/mnist")
    ap.add_argument("--lr", type=float, default=0.1)
    args = ap.parse_args()
    cfg = TrainConfig(data_dir=args.data_dir, widths=(8, 8, 16, 16), downsample=2, mode="shape-only", lr=args.lr)
    data = load_dataset(cfg.source())
    default = TRAINABLE["shape-only"]
    print("trainable,test_acc,best_acc,seconds")
    try:
        for name, kinds in SETS:
            TRAINABLE["shape-only"] = kinds
            start = time.perf_counter()
            result = train(cfg, data)
            best = max(row["test_acc"] for row in result.history)
            print(f"{name},{result.final['test_acc']:.2f},{best:.2f},{time.perf_counter() - start:.0f}", flush=True)
    finally:
        TRAINABLE["shape-only"] = default


if __name__ == "__main__":
    main()
