"""Experiment harnesses: the alpha/delta ablation grid and the sparsity-mode comparison."""

from __future__ import annotations

import copy
import csv
import io
import itertools
from dataclasses import dataclass

import numpy as np

from .data import Dataset, load_dataset
from .engine import export_model, run_model
from .model import Network, accuracy
from .prune import count_flops
from .sparsity import MODES, fs_convs
from .train import TrainConfig, TrainResult, finetune, train

ABLATION_HEADER = ["alpha", "delta", "params", "flops", "accuracy"]
COMPARE_HEADER = ["mode", "budget", "pruned_fraction", "params", "flops", "accuracy", "finetuned_accuracy",
                  "empty_layers"]


def evaluate_exported(net: Network, data: Dataset) -> tuple[int, int, float]:
    """(params, flops, test accuracy) of the compacted stripe-wise export of ``net``."""
    model = export_model(net, probe=data.test_x[:8])
    cost = count_flops(model)
    acc = accuracy(run_model(model, data.test_x), data.test_y)
    return cost.total_params, cost.flops, acc


def ablation_grid(base: TrainConfig, alphas, deltas, data: Dataset | None = None, runner=train) -> list[dict]:
    """Train one model per (alpha, delta) cell and report its pruned cost and accuracy."""
    alphas, deltas = list(alphas), list(deltas)
    if not alphas or not deltas:
        raise ValueError("ablation grid needs at least one alpha and one delta")
    data = data if data is not None else load_dataset(base.source())
    rows = []
    for alpha, delta in itertools.product(alphas, deltas):
        result = runner(base.replace(alpha=alpha, delta=delta), data)
        params, flops, acc = evaluate_exported(result.net, data)
        rows.append({"alpha": alpha, "delta": delta, "params": params, "flops": flops, "accuracy": acc})
    return rows


# ---------------------------------------------------------------------------
# mode comparison

@dataclass
class _Unit:
    conv: object
    entry: tuple  # index into the skeleton array
    cost: int  # conv weight parameters removed with the unit
    score: float


def prunable_units(net: Network) -> list[_Unit]:
    """Every removable unit with its merged weight norm.

    A unit is one stripe (filter, i, j) for per-filter skeletons, or one
    kernel position (i, j) across all filters for a shared skeleton.  The
    score is the L2 norm of the merged weights the unit carries, which is
    |I| times the stripe norm, so skeleton and lasso-trained models are
    ranked on the same footing.
    """
    units = []
    for conv in fs_convs(net):
        W, skel = conv.layer.W, conv.layer.skeleton
        n, c, k, _ = W.shape
        norms = np.sqrt((W ** 2).sum(axis=1))  # (N, K, K)
        if skel.shared:
            group = np.sqrt((norms ** 2).sum(axis=0))
            for i, j in itertools.product(range(k), range(k)):
                if not skel.frozen[0, i, j]:
                    units.append(_Unit(conv, (0, i, j), n * c, float(abs(skel.values[0, i, j]) * group[i, j])))
        else:
            for f, i, j in itertools.product(range(n), range(k), range(k)):
                if not skel.frozen[f, i, j]:
                    units.append(_Unit(conv, (f, i, j), c, float(abs(skel.values[f, i, j]) * norms[f, i, j])))
    return units


def conv_weight_total(net: Network) -> int:
    return sum(conv.layer.W.size for conv in fs_convs(net))


def prune_to_budget(net: Network, fraction: float) -> tuple[Network, float]:
    """Copy of ``net`` with the weakest units frozen until ``fraction`` of conv weights is gone.

    Already-frozen stripes count toward the budget.  Returns the pruned copy
    and the fraction actually removed (units are indivisible).
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"budget fraction must lie in [0, 1], got {fraction}")
    net = copy.deepcopy(net)
    total = conv_weight_total(net)
    removed = sum(int(conv.layer.skeleton.frozen.sum()) * conv.layer.W.shape[1]
                  * (conv.layer.W.shape[0] if conv.layer.skeleton.shared else 1) for conv in fs_convs(net))
    target = fraction * total
    for unit in sorted(prunable_units(net), key=lambda u: u.score):
        if removed >= target:
            break
        skel = unit.conv.layer.skeleton
        skel.frozen[unit.entry] = True
        skel.values[unit.entry] = 0.0
        removed += unit.cost
    return net, removed / total


def empty_layers(net: Network) -> list[str]:
    """Names of conv layers whose every stripe is pruned."""
    return [conv.name for conv in fs_convs(net) if conv.layer.skeleton.frozen.all()]


def compare_modes(cfg: TrainConfig, budgets, data: Dataset | None = None, modes=MODES,
                  finetune_epochs: int = 0, runner=train) -> list[dict]:
    """Train one model per sparsity mode with the same seed, then sweep pruning budgets.

    Each budget is a fraction of conv weight parameters to remove, applied by
    global ranking of merged unit norms.  Accuracy is always reported without
    fine-tuning; with ``finetune_epochs`` a second column holds the accuracy
    after that much fine-tuning.
    """
    budgets = sorted(float(b) for b in budgets)
    data = data if data is not None else load_dataset(cfg.source())
    rows = []
    for mode in modes:
        result: TrainResult = runner(cfg.replace(sparsity_mode=mode), data)
        for budget in budgets:
            pruned, achieved = prune_to_budget(result.net, budget)
            params, flops, acc = evaluate_exported(pruned, data)
            tuned = ""
            if finetune_epochs:
                done = finetune(TrainResult(pruned, [], result.config), finetune_epochs, data)
                tuned = evaluate_exported(done.net, data)[2]
            rows.append({"mode": mode, "budget": budget, "pruned_fraction": achieved, "params": params,
                         "flops": flops, "accuracy": acc, "finetuned_accuracy": tuned,
                         "empty_layers": ";".join(empty_layers(pruned))})
    return rows


def rows_csv(rows: list[dict], header: list[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=header, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()

