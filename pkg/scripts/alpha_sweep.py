"""Frozen-stripe counts over an alpha grid on the desk task, for several seeds.

By default the grid is the baseline alphas rescaled by the ratio of optimizer
steps between a 160-epoch CIFAR-10 schedule and the 20-epoch desk schedule
(about 99x), since the literal values barely move the skeleton in 1,260 steps.

    python scripts/alpha_sweep.py --scale 99 --seeds 0,1,2
"""

import argparse
import time

from stripeprune.data import load_dataset
from stripeprune.train import TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data-dir", default="data/mnist")
    ap.add_argument("--alphas", default="0.5e-5,1e-5,1.4e-5")
    ap.add_argument("--scale", type=float, default=99.0)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--delta", type=float, default=0.05)
    args = ap.parse_args()

    base = TrainConfig(data_dir=args.data_dir, widths=(8, 8, 16, 16), downsample=2).replace(delta=args.delta)
    data = load_dataset(base.source())
    print("seed,alpha,frozen_stripes,test_acc,seconds")
    for seed in (int(s) for s in args.seeds.split(",")):
        for alpha in (float(a) * args.scale for a in args.alphas.split(",")):
            start = time.perf_counter()
            result = train(base.replace(alpha=alpha, seed=seed), data)
            print(f"{seed},{alpha:g},{result.final['frozen_stripes']},{result.final['test_acc']:.2f},"
                  f"{time.perf_counter() - start:.0f}", flush=True)


if __name__ == "__main__":
    main()
