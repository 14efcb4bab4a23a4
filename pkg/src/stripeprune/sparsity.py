"""Sparsity penalties and the threshold-freeze rule.

Three regularization modes share the same machinery:

``stripe``
    one skeleton scalar per (filter, i, j); L1 penalty on the skeleton.
``group``
    one (K, K) skeleton per layer shared by all filters; L1 penalty on it.
``lasso-weights``
    the skeleton is a fixed 0/1 mask; a group-lasso penalty acts directly on
    the weight stripes ``W[n, :, i, j]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import FsConv2d, Module

MODES = ("stripe", "group", "lasso-weights")
_NORM_FLOOR = 1e-12


class ModeError(ValueError):
    """Operation invoked under a sparsity mode it does not support."""


@dataclass
class SparsityConfig:
    alpha: float = 1e-5
    delta: float = 0.05
    mode: str = "stripe"

    def __post_init__(self):
        if self.alpha < 0 or self.delta < 0:
            raise ValueError(f"alpha and delta must be non-negative (alpha={self.alpha}, delta={self.delta})")
        if self.mode not in MODES:
            raise ValueError(f"unknown sparsity mode {self.mode!r}; expected one of {MODES}")


def fs_convs(model: Module) -> list[FsConv2d]:
    return [m for m in model.modules() if isinstance(m, FsConv2d)]


def skeleton_penalty(model: Module, mode: str = "stripe") -> float:
    if mode not in ("stripe", "group"):
        raise ModeError(f"skeleton penalty is undefined in {mode!r} mode")
    return float(sum(np.abs(conv.layer.skeleton.values).sum() for conv in fs_convs(model)))


def skeleton_penalty_grad(model: Module, alpha: float, mode: str = "stripe") -> list[np.ndarray]:
    """Subgradient ``alpha * sign(I)`` per layer, zero on frozen entries."""
    if mode not in ("stripe", "group"):
        raise ModeError(f"skeleton penalty is undefined in {mode!r} mode")
    grads = []
    for conv in fs_convs(model):
        skel = conv.layer.skeleton
        g = alpha * np.sign(skel.values)
        g[skel.frozen] = 0.0
        grads.append(g)
    return grads


def group_penalty_view(model: Module, mode: str = "group") -> float:
    if mode != "group":
        raise ModeError(f"group penalty requested in {mode!r} mode")
    convs = fs_convs(model)
    if any(not c.layer.skeleton.shared for c in convs):
        raise ModeError("group penalty needs every layer to use a shared (K, K) skeleton")
    return float(sum(np.abs(c.layer.skeleton.values).sum() for c in convs))


def stripe_norms(W: np.ndarray) -> np.ndarray:
    """L2 norm of every stripe ``W[n, :, i, j]``, shape (N, K, K)."""
    return np.sqrt((W * W).sum(axis=1))


def lasso_weight_penalty(model: Module, mode: str = "lasso-weights") -> tuple[float, list[np.ndarray]]:
    """Group-lasso value over weight stripes and its gradient w.r.t. each W."""
    if mode != "lasso-weights":
        raise ModeError(f"weight group-lasso requested in {mode!r} mode")
    total = 0.0
    grads = []
    for conv in fs_convs(model):
        W = conv.layer.W
        norms = stripe_norms(W)
        total += float(norms.sum())
        safe = np.where(norms < _NORM_FLOOR, np.inf, norms)
        grads.append(W / safe[:, None, :, :])
    return total, grads


def apply_threshold(model: Module, delta: float, mode: str = "stripe") -> int:
    """Freeze every live stripe whose importance is below ``delta``.

    Importance is ``|I|`` in the skeleton modes and the stripe's weight norm in
    ``lasso-weights`` mode.  Frozen skeleton entries are set to exactly zero and
    stay frozen.  Returns the number of entries that changed state.
    """
    if delta < 0:
        raise ValueError("delta must be non-negative")
    changed = 0
    for conv in fs_convs(model):
        skel = conv.layer.skeleton
        if mode == "lasso-weights":
            score = stripe_norms(conv.layer.W)
            if skel.shared:
                raise ModeError("lasso-weights mode needs a per-filter skeleton mask")
        elif mode in ("stripe", "group"):
            score = np.abs(skel.values)
        else:
            raise ModeError(f"unknown sparsity mode {mode!r}")
        newly = (score < delta) & ~skel.frozen
        skel.frozen |= newly
        skel.values[skel.frozen] = 0.0
        changed += int(newly.sum())
    return changed


def frozen_stripes(model: Module) -> int:
    """Number of pruned (filter, i, j) stripes, counting a shared entry once per filter."""
    total = 0
    for conv in fs_convs(model):
        skel = conv.layer.skeleton
        per_entry = conv.layer.W.shape[0] if skel.shared else 1
        total += int(skel.frozen.sum()) * per_entry
    return total


def total_stripes(model: Module) -> int:
    return sum(c.layer.W.shape[0] * c.layer.W.shape[2] ** 2 for c in fs_convs(model))
