"""Command-line interface: ``python -m stripeprune <command> ...``.

Exit status is 0 on success, 1 on a usage error, 2 when a data, checkpoint
or model file is missing or malformed, and 3 when training diverges.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .data import DatasetSource, FormatError, load_dataset
from .engine import ExportError, bench_csv, bench_kernels, export_model, run_model
from .experiments import ABLATION_HEADER, COMPARE_HEADER, ablation_grid, compare_modes, rows_csv
from .fileformat import load_model, save_model
from .model import ARCHS, accuracy, load_checkpoint, save_checkpoint
from .prune import count_flops, shape_histogram, stripe_layers, stripe_ratio_per_position
from .sparsity import MODES, apply_threshold, frozen_stripes, fs_convs, stripe_norms, total_stripes
from .train import TrainConfig, TrainingDiverged, finetune, load_config, train, write_metrics

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("stripeprune")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _training_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training (override --config)")
    g.add_argument("--arch", choices=ARCHS)
    g.add_argument("--dataset", choices=("mnist", "cifar10"))
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--milestones", type=_ints, help="comma-separated epochs where lr drops 10x")
    g.add_argument("--weight-decay", type=float)
    g.add_argument("--alpha", type=float, help="L1 strength on the filter skeleton")
    g.add_argument("--delta", type=float, help="freeze threshold on |I|")
    g.add_argument("--sparsity-mode", choices=MODES)
    g.add_argument("--widths", type=_ints, help="comma-separated conv widths")
    g.add_argument("--downsample", type=int, help="average-pool input images by this factor")
    g.add_argument("--train-limit", type=int, help="use only the first N training images")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    common.add_argument("--data-dir", default=None, help="dataset directory")
    common.add_argument("--out", default="runs", help="output directory (default: runs)")
    common.add_argument("--config", default=None, help="flat 'key = value' config file")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="stripeprune", description="Stripe-wise filter pruning at desk scale.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("train", parents=[common], help="train an FS network")
    _training_flags(p)
    p.add_argument("--mode", choices=("standard", "shape-only", "frozen"),
                   help="shape-only pins conv weights at init; frozen also pins the skeleton")
    p.add_argument("--finetune", type=int, default=0, metavar="N", help="fine-tune N epochs after training")

    p = sub.add_parser("prune", parents=[common], help="apply the freeze rule to a checkpoint")
    p.add_argument("--checkpoint", default=None, help="default: <out>/model.npz")
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--sparsity-mode", choices=MODES, default=None)

    p = sub.add_parser("export", parents=[common], help="write a stripe-wise model file")
    p.add_argument("--checkpoint", default=None, help="default: <out>/model.npz")
    p.add_argument("--no-compact", action="store_true", help="keep filters that lost every stripe")
    p.add_argument("--float-width", type=int, choices=(4, 8), default=4)

    p = sub.add_parser("infer", parents=[common], help="evaluate an exported model on the test set")
    p.add_argument("--model", default=None, help="default: <out>/model.swpm")
    p.add_argument("--dataset", choices=("mnist", "cifar10"), default=None)

    p = sub.add_parser("bench", parents=[common], help="time dense vs stripe-wise kernels")
    p.add_argument("--sparsities", type=_floats, default=[0.0, 0.25, 0.5, 0.75, 0.9])
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--repeats", type=int, default=3)

    p = sub.add_parser("ablate", parents=[common], help="alpha x delta grid")
    _training_flags(p)
    p.add_argument("--alphas", type=_floats, required=True)
    p.add_argument("--deltas", type=_floats, required=True)

    p = sub.add_parser("compare", parents=[common], help="stripe vs group vs lasso at matched budgets")
    _training_flags(p)
    p.add_argument("--budgets", type=_floats, default=[0.0, 0.2, 0.4, 0.6, 0.8])
    p.add_argument("--finetune", type=int, default=0, metavar="N")

    p = sub.add_parser("report", parents=[common], help="cost, filter shapes and weight statistics")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--format", choices=("table", "kv"), default="table")
    return parser


def _config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    changes = {}
    for key in ("arch", "dataset", "epochs", "batch_size", "lr", "milestones", "weight_decay", "alpha", "delta",
                "sparsity_mode", "widths", "downsample", "train_limit", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            changes[key] = value
    if getattr(args, "mode", None):
        changes["mode"] = args.mode
    if args.data_dir:
        changes["data_dir"] = args.data_dir
    epochs = changes.get("epochs", cfg.epochs)
    if "milestones" not in changes and cfg.milestones and cfg.milestones[-1] >= epochs:
        # keep the schedule's shape (drops at 1/2 and 3/4) for short runs
        changes["milestones"] = tuple(sorted({m for m in (epochs // 2, 3 * epochs // 4) if 0 < m < epochs}))
    try:
        return cfg.replace(**changes)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out(args)
    data = load_dataset(cfg.source())
    result = train(cfg, data)
    write_metrics(result, out / "metrics.csv")
    if args.finetune:
        result = finetune(result, args.finetune, data)
        write_metrics(result, out / "finetune.csv")
    extra = {"config": _config_dict(cfg), "test_acc": result.final["test_acc"]}
    save_checkpoint(result.net, out / "model.npz", extra)
    print(result.metrics_csv(), end="")
    print(f"saved {out / 'model.npz'}; test accuracy {result.final['test_acc']:.2f}%, "
          f"frozen stripes {result.final['frozen_stripes']}/{total_stripes(result.net)}")
    return EXIT_OK


def _config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    sp = d.pop("sparsity")
    d.update(alpha=sp["alpha"], delta=sp["delta"], sparsity_mode=sp["mode"])
    return d


def cmd_prune(args) -> int:
    out = _out(args)
    path = Path(args.checkpoint or out / "model.npz")
    net, extra = load_checkpoint(path)
    mode = args.sparsity_mode or extra.get("config", {}).get("sparsity_mode", "stripe")
    newly = apply_threshold(net, args.delta, mode)
    save_checkpoint(net, out / "pruned.npz", extra)
    print(f"froze {newly} new stripe entries at delta={args.delta}; "
          f"{frozen_stripes(net)}/{total_stripes(net)} stripes pruned; saved {out / 'pruned.npz'}")
    return EXIT_OK


def cmd_export(args) -> int:
    out = _out(args)
    path = Path(args.checkpoint or out / "model.npz")
    net, _ = load_checkpoint(path)
    model = export_model(net, compact=not args.no_compact)
    target = out / "model.swpm"
    save_model(model, target, args.float_width)
    print(count_flops(model).to_table())
    print(f"wrote {target} ({target.stat().st_size} bytes)")
    return EXIT_OK


def _infer_source(model, dataset: str | None, data_dir: str | None) -> DatasetSource:
    c, h, _ = model.in_shape
    kind = dataset or ("mnist" if c == 1 else "cifar10")
    full = 28 if kind == "mnist" else 32
    if full % h:
        raise FormatError(f"model input {h}x{h} is not a downsampling of {kind} images")
    return DatasetSource(kind, data_dir or "data", downsample=full // h)


def cmd_infer(args) -> int:
    out = Path(args.out)
    model = load_model(args.model or out / "model.swpm")
    data = load_dataset(_infer_source(model, args.dataset, args.data_dir))
    acc = accuracy(run_model(model, data.test_x), data.test_y)
    print(f"test accuracy {acc:.2f}% on {len(data.test_y)} images")
    return EXIT_OK


def cmd_bench(args) -> int:
    rows = bench_kernels(n=args.channels, c=args.channels, hw=args.size, batch=args.batch,
                         sparsities=args.sparsities, repeats=args.repeats, seed=args.seed or 0)
    text = bench_csv(rows)
    (_out(args) / "bench.csv").write_text(text)
    print(text, end="")
    return EXIT_OK if all(r["checksum_ok"] for r in rows) else EXIT_DATA


def cmd_ablate(args) -> int:
    cfg = _config(args)
    rows = ablation_grid(cfg, args.alphas, args.deltas)
    text = rows_csv(rows, ABLATION_HEADER)
    (_out(args) / "ablation.csv").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _config(args)
    rows = compare_modes(cfg, args.budgets, finetune_epochs=args.finetune)
    text = rows_csv(rows, COMPARE_HEADER)
    (_out(args) / "compare.csv").write_text(text)
    print(text, end="")
    for row in rows:
        if row["empty_layers"]:
            print(f"warning: {row['mode']} at budget {row['budget']} left no stripes in {row['empty_layers']}")
    return EXIT_OK


def _weight_stats(net) -> list[str]:
    lines = ["# per-layer raw statistics: |I| over live entries, stripe L2 norms of W * I"]
    for conv in fs_convs(net):
        skel = conv.layer.skeleton
        live = np.abs(skel.values[~skel.frozen])
        merged = stripe_norms(conv.layer.effective_weight())
        q = np.quantile(live, [0, 0.5, 1]) if live.size else [np.nan] * 3
        mq = np.quantile(merged, [0.1, 0.5, 0.9])
        lines.append(f"{conv.name}: frozen {int(skel.frozen.sum())}/{skel.frozen.size}  "
                     f"|I| min/median/max {q[0]:.4g}/{q[1]:.4g}/{q[2]:.4g}  "
                     f"stripe norm p10/p50/p90 {mq[0]:.4g}/{mq[1]:.4g}/{mq[2]:.4g}")
    return lines


def cmd_report(args) -> int:
    out = Path(args.out)
    net = None
    if args.model:
        model = load_model(args.model)
    else:
        net, extra = load_checkpoint(args.checkpoint or out / "model.npz")
        model = export_model(net)
    cost = count_flops(model)
    if args.format == "kv":
        print(cost.to_kv(), end="")
        return EXIT_OK
    print(cost.to_table())
    print("\n# filter shapes per layer (bit i*K+j set = stripe kept), most frequent first")
    for layer, hist in zip(stripe_layers(model), shape_histogram(model)):
        top = ", ".join(f"{mask:#05x}x{freq}" for mask, freq in hist[:8])
        print(f"{layer.name}: {top}{' ...' if len(hist) > 8 else ''}")
    print("\n# kept-stripe ratio per kernel position (row-major)")
    for layer, ratio in zip(stripe_layers(model), stripe_ratio_per_position(model)):
        print(f"{layer.name}: " + " ".join(f"{r:.2f}" for r in ratio))
    if net is not None:
        print()
        print("\n".join(_weight_stats(net)))
    return EXIT_OK


COMMANDS = {"train": cmd_train, "prune": cmd_prune, "export": cmd_export, "infer": cmd_infer,
            "bench": cmd_bench, "ablate": cmd_ablate, "compare": cmd_compare, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, FormatError, ExportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
