"""SGD training of Filter-Skeleton networks with the sparsity objective.

Every step minimises ``data_loss(f(x, W * I), y) + alpha * penalty``, where
the penalty depends on the sparsity mode (see :mod:`stripeprune.sparsity`).
After each epoch the freeze rule removes stripes whose importance fell below
``delta``.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import Dataset, DatasetSource, augment, batches, load_dataset
from .layers import softmax_xent
from .model import Network, accuracy, build_network, predict
from .sparsity import (SparsityConfig, apply_threshold, frozen_stripes, fs_convs, lasso_weight_penalty,
                       skeleton_penalty, skeleton_penalty_grad)

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "data_loss", "penalty", "test_acc", "frozen_stripes"]
TRAIN_MODES = ("standard", "shape-only", "frozen")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    arch: str = "tiny-vgg"
    dataset: str = "mnist"
    data_dir: str = "data"
    epochs: int = 20
    batch_size: int = 64
    lr: float = 0.1
    milestones: tuple[int, ...] = (10, 15)
    momentum: float = 0.9
    weight_decay: float = 1e-4
    sparsity: SparsityConfig = field(default_factory=SparsityConfig)
    seed: int = 0
    mode: str = "standard"
    widths: tuple[int, ...] | None = None
    downsample: int = 1
    train_limit: int | None = None
    augment: bool | None = None
    finetune: int = 0

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError(f"milestones must be strictly increasing: {self.milestones}")
        if self.milestones and self.milestones[-1] >= self.epochs:
            raise ValueError(f"milestones {self.milestones} must be < epochs ({self.epochs})")
        if self.mode not in TRAIN_MODES:
            raise ValueError(f"unknown training mode {self.mode!r}; expected one of {TRAIN_MODES}")
        if self.widths is not None:
            self.widths = tuple(int(w) for w in self.widths)

    def lr_at(self, epoch: int) -> float:
        """Step schedule: divide by 10 at every milestone already reached (0-based epochs)."""
        return self.lr * 0.1 ** sum(1 for m in self.milestones if epoch >= m)

    def source(self) -> DatasetSource:
        src = DatasetSource.default(self.dataset, self.data_dir, self.downsample)
        if self.augment is not None:
            src.crop_pad = 4 if self.augment else 0
            src.hflip = bool(self.augment)
        return src

    def replace(self, **changes) -> "TrainConfig":
        sp = changes.pop("sparsity", None) or SparsityConfig(**asdict(self.sparsity))
        for key in ("alpha", "delta"):
            if key in changes:
                setattr(sp, key, float(changes.pop(key)))
        if "sparsity_mode" in changes:
            sp.mode = changes.pop("sparsity_mode")
        base = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "sparsity"}
        return TrainConfig(**(base | changes), sparsity=SparsityConfig(sp.alpha, sp.delta, sp.mode))


def _coerce(text: str, default):
    text = text.strip()
    if isinstance(default, bool) or text.lower() in ("true", "false"):
        return text.lower() in ("1", "true", "yes")
    if isinstance(default, tuple) or "," in text:
        return tuple(int(t) for t in text.replace(" ", "").split(",") if t)
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return None if text.lower() == "none" else text


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Apply flat ``key = value`` lines (``#`` comments allowed) on top of ``base``."""
    base = base or TrainConfig()
    known = {f.name for f in fields(TrainConfig)} | {"alpha", "delta", "sparsity_mode"}
    changes = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in known:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        default = getattr(base, key, None) if hasattr(base, key) else None
        changes[key] = _coerce(value, default)
    return base.replace(**changes)


def load_config(path: str | Path, base: TrainConfig | None = None) -> TrainConfig:
    return parse_config_text(Path(path).read_text(), base)


# ---------------------------------------------------------------------------

# Parameter kinds updated per training mode.  "frozen" is the control for
# shape-only training: identical except that the skeleton is pinned too.
TRAINABLE = {
    "standard": {"conv", "skeleton", "bn", "linear"},
    "shape-only": {"skeleton", "bn", "linear"},
    "frozen": {"bn", "linear"},
}


class SGD:
    """Momentum SGD with decoupled handling of skeleton entries.

    Weight decay is added to the gradient of every decayed parameter (skeleton
    values are never decayed).  Frozen skeleton entries get no gradient, no
    momentum, and are re-pinned to exactly zero after each step.
    """

    def __init__(self, params, lr: float, momentum: float, weight_decay: float):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = [np.zeros_like(p.value) for p in self.params]

    def step(self):
        for p, buf in zip(self.params, self.buffers):
            g = p.grad
            if self.weight_decay and p.decay:
                g = g + self.weight_decay * p.value
            if p.frozen is not None:
                g = np.where(p.frozen, 0.0, g)
            buf *= self.momentum
            buf += g
            if p.frozen is not None:
                buf[p.frozen] = 0.0
            p.value -= self.lr * buf
            if p.frozen is not None:
                p.value[p.frozen] = 0.0


def penalty_value(net: Network, mode: str) -> float:
    if mode == "lasso-weights":
        return lasso_weight_penalty(net, mode)[0]
    return skeleton_penalty(net, mode)


def add_penalty_grads(net: Network, sp: SparsityConfig) -> None:
    if sp.alpha == 0:
        return
    convs = fs_convs(net)
    if sp.mode == "lasso-weights":
        _, grads = lasso_weight_penalty(net, sp.mode)
        for conv, g in zip(convs, grads):
            conv._w.grad += sp.alpha * g
    else:
        for conv, g in zip(convs, skeleton_penalty_grad(net, sp.alpha, sp.mode)):
            conv._i.grad += g


def objective(net: Network, x: np.ndarray, y: np.ndarray, sp: SparsityConfig,
              train: bool = False) -> tuple[float, float, float]:
    """(total, data_loss, penalty) with total = data_loss + alpha * penalty."""
    data_loss, _ = softmax_xent(net.forward(x, train), y)
    penalty = penalty_value(net, sp.mode)
    return data_loss + sp.alpha * penalty, data_loss, penalty


@dataclass
class TrainResult:
    net: Network
    history: list[dict]
    config: TrainConfig

    @property
    def final(self) -> dict:
        return self.history[-1]

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for row in self.history:
            writer.writerow([row["epoch"], repr(row["data_loss"]), repr(row["penalty"]),
                             repr(row["test_acc"]), row["frozen_stripes"]])
        return buf.getvalue()


def make_network(cfg: TrainConfig, data: Dataset, rng: np.random.Generator) -> Network:
    return build_network(cfg.arch, data.in_shape, data.num_classes, cfg.widths, rng,
                         shared_skeleton=cfg.sparsity.mode == "group")


def train(cfg: TrainConfig, data: Dataset | None = None, net: Network | None = None) -> TrainResult:
    data = data if data is not None else load_dataset(cfg.source())
    src = cfg.source()
    init_seq, order_seq, aug_seq = np.random.SeedSequence(cfg.seed).spawn(3)
    if net is None:
        net = make_network(cfg, data, np.random.default_rng(init_seq))
    order_rng = np.random.default_rng(order_seq)
    aug_rng = np.random.default_rng(aug_seq)

    trainable = set(TRAINABLE[cfg.mode])
    if cfg.sparsity.mode == "lasso-weights":
        trainable.discard("skeleton")
    params = [p for p in net.params() if p.kind in trainable]
    opt = SGD(params, cfg.lr, cfg.momentum, cfg.weight_decay)
    sp = cfg.sparsity
    train_x, train_y = data.train_x, data.train_y
    if cfg.train_limit:
        train_x, train_y = train_x[:cfg.train_limit], train_y[:cfg.train_limit]

    history = []
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr_at(epoch)
        losses, conv_update = [], 0.0
        for idx in batches(len(train_x), cfg.batch_size, order_rng):
            xb = augment(train_x[idx], aug_rng, src.crop_pad, src.hflip)
            for p in net.params():
                p.zero_grad()
            loss, dlogits = softmax_xent(net.forward(xb, train=True), train_y[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss in epoch {epoch + 1}")
            net.backward(dlogits)
            add_penalty_grads(net, sp)
            before = [c.layer.W.copy() for c in fs_convs(net)] if cfg.mode != "standard" else None
            opt.step()
            if before is not None:
                conv_update += sum(float(np.abs(c.layer.W - b).sum()) for c, b in zip(fs_convs(net), before))
            losses.append(loss)
        apply_threshold(net, sp.delta, sp.mode)
        test_acc = accuracy(predict(net, data.test_x), data.test_y)
        row = {"epoch": epoch + 1, "data_loss": float(np.mean(losses)), "penalty": penalty_value(net, sp.mode),
               "test_acc": test_acc, "frozen_stripes": frozen_stripes(net), "lr": opt.lr,
               "conv_weight_update": conv_update}
        if not math.isfinite(row["data_loss"]):
            raise TrainingDiverged(f"non-finite loss in epoch {epoch + 1}")
        log.info("epoch %d loss %.4f penalty %.2f acc %.2f frozen %d", row["epoch"], row["data_loss"],
                 row["penalty"], row["test_acc"], row["frozen_stripes"])
        history.append(row)
    return TrainResult(net, history, cfg)


def train_shape_only(cfg: TrainConfig, data: Dataset | None = None) -> TrainResult:
    """Train with the conv weights pinned at their random initialization."""
    if cfg.mode not in ("shape-only", "frozen"):
        raise ValueError(f"train_shape_only needs mode 'shape-only' (or the 'frozen' control), got {cfg.mode!r}")
    return train(cfg, data)


def finetune(result: TrainResult, epochs: int, data: Dataset, lr: float = 0.01) -> TrainResult:
    """Continue training with the current freeze pattern and no sparsity pressure."""
    cfg = result.config.replace(epochs=epochs, milestones=(), lr=lr, alpha=0.0, delta=0.0)
    return train(cfg, data, net=result.net)


def write_metrics(result: TrainResult, path: str | Path) -> None:
    Path(path).write_text(result.metrics_csv())
