"""Stripe extraction and cost accounting for pruned models.

FLOP convention: one multiply-accumulate counts as 2 FLOPs.
Index convention: every kept stripe stores one (n, i, j) index entry, which is
charged as one parameter; the dense-bitmap alternative (N*K*K bits per layer)
is reported alongside.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .layers import FsConvLayer
from .tensor import conv_output_hw

INDEX_BYTES = 6  # (n, i, j) packed as three u16


@dataclass(frozen=True)
class StripeRecord:
    filter: int
    offset: tuple[int, int]
    weights: np.ndarray


@dataclass(eq=False)
class StripeLayer:
    """Kept stripes of one conv layer, stored as parallel arrays.

    ``index`` is an (S, 3) int array of (filter, i, j) sorted lexicographically
    and ``weights`` the matching (S, C) stripe vectors.  ``bias`` optionally
    holds one scalar per stripe, added wherever that stripe's window lies
    inside the input (it carries the contribution of compacted-away constant
    input channels).  ``dense_filters`` remembers the filter count before any
    filter compaction so accounting stays relative to the original layer.
    """

    index: np.ndarray
    weights: np.ndarray
    n_filters: int
    in_channels: int
    k: int
    stride: int = 1
    pad: int | None = None
    bias: np.ndarray | None = None
    dense_filters: int | None = None
    name: str = ""

    def __post_init__(self):
        self.index = np.asarray(self.index, dtype=np.int64).reshape(-1, 3)
        self.weights = np.asarray(self.weights).reshape(len(self.index), self.in_channels)
        if self.pad is None:
            self.pad = (self.k - 1) // 2
        if self.dense_filters is None:
            self.dense_filters = self.n_filters
        if len(self.index):
            order = np.lexsort((self.index[:, 2], self.index[:, 1], self.index[:, 0]))
            self.index = self.index[order]
            self.weights = self.weights[order]
            if self.bias is not None:
                self.bias = np.asarray(self.bias)[order]
            if np.any(np.all(np.diff(self.index, axis=0) == 0, axis=1)):
                raise ValueError("duplicate (filter, i, j) stripe")
            if self.index.min() < 0 or self.index[:, 0].max() >= self.n_filters or self.index[:, 1:].max() >= self.k:
                raise ValueError("stripe index out of layer bounds")

    @property
    def num_stripes(self) -> int:
        return len(self.index)

    @property
    def stripes(self) -> list[StripeRecord]:
        return [StripeRecord(int(n), (int(i), int(j)), self.weights[s])
                for s, (n, i, j) in enumerate(self.index)]

    @property
    def surviving_filters(self) -> list[int]:
        return sorted(set(self.index[:, 0].tolist()))

    def keep_mask(self) -> np.ndarray:
        """Boolean (N, K, K) map of kept stripe positions."""
        mask = np.zeros((self.n_filters, self.k, self.k), dtype=bool)
        mask[self.index[:, 0], self.index[:, 1], self.index[:, 2]] = True
        return mask

    @cached_property
    def by_offset(self) -> list[tuple[int, int, np.ndarray, np.ndarray, np.ndarray | None]]:
        """Stripes grouped per kernel offset: (i, j, filters, weight matrix, bias)."""
        groups = []
        pos = self.index[:, 1] * self.k + self.index[:, 2]
        for flat in np.unique(pos):
            sel = np.flatnonzero(pos == flat)
            bias = None if self.bias is None else self.bias[sel]
            groups.append((int(flat // self.k), int(flat % self.k), self.index[sel, 0], self.weights[sel], bias))
        return groups


def extract_stripes(layer: FsConvLayer, name: str = "") -> StripeLayer:
    """Kept stripes of an FS layer with the skeleton merged into the weights."""
    n, c, k, _ = layer.W.shape
    skel = layer.skeleton
    frozen = np.broadcast_to(skel.frozen, (n, k, k))
    values = np.broadcast_to(skel.values, (n, k, k))
    keep = ~frozen
    ns, is_, js = np.nonzero(keep)
    weights = layer.W[ns, :, is_, js] * values[ns, is_, js][:, None]
    return StripeLayer(np.stack([ns, is_, js], axis=1), weights, n, c, k, layer.stride, layer.pad, name=name)


# ---------------------------------------------------------------------------
# accounting

@dataclass
class LayerCost:
    name: str
    kind: str
    weight_params: int = 0
    index_entries: int = 0
    dense_weight_params: int = 0
    other_params: int = 0
    flops: int = 0
    dense_flops: int = 0
    bitmap_bits: int = 0

    @property
    def pruning_ratio(self) -> float:
        if not self.dense_weight_params:
            return 0.0
        return 1.0 - self.weight_params / self.dense_weight_params


@dataclass
class CostReport:
    layers: list[LayerCost] = field(default_factory=list)

    def _sum(self, attr: str) -> int:
        return sum(getattr(layer, attr) for layer in self.layers)

    @property
    def weight_params(self) -> int:
        return self._sum("weight_params")

    @property
    def index_entries(self) -> int:
        return self._sum("index_entries")

    @property
    def other_params(self) -> int:
        return self._sum("other_params")

    @property
    def total_params(self) -> int:
        return self.weight_params + self.index_entries + self.other_params

    @property
    def dense_params(self) -> int:
        return self._sum("dense_weight_params") + self.other_params

    @property
    def flops(self) -> int:
        return self._sum("flops")

    @property
    def dense_flops(self) -> int:
        return self._sum("dense_flops")

    @property
    def bitmap_bits(self) -> int:
        return self._sum("bitmap_bits")

    @property
    def pruning_ratio(self) -> float:
        dense = self._sum("dense_weight_params")
        return 1.0 - self.weight_params / dense if dense else 0.0

    def to_table(self) -> str:
        lines = ["# FLOPs: 1 multiply-accumulate = 2 FLOPs; index entries: one (n,i,j) per kept stripe",
                 f"{'layer':<16}{'kind':<8}{'weights':>10}{'indexes':>9}{'other':>8}{'ratio':>8}{'flops':>13}"]
        for lc in self.layers:
            lines.append(f"{lc.name:<16}{lc.kind:<8}{lc.weight_params:>10}{lc.index_entries:>9}"
                         f"{lc.other_params:>8}{lc.pruning_ratio:>8.3f}{lc.flops:>13}")
        lines.append(f"{'total':<24}{self.weight_params:>10}{self.index_entries:>9}{self.other_params:>8}"
                     f"{self.pruning_ratio:>8.3f}{self.flops:>13}")
        lines.append(f"total params {self.total_params} (dense {self.dense_params}); "
                     f"index bytes {self.index_entries * INDEX_BYTES}; dense bitmap bits {self.bitmap_bits}; "
                     f"flops {self.flops} (dense {self.dense_flops})")
        return "\n".join(lines)

    def to_kv(self) -> str:
        out = []
        for lc in self.layers:
            for metric in ("weight_params", "index_entries", "other_params", "dense_weight_params",
                           "flops", "dense_flops", "bitmap_bits"):
                out.append(f"{lc.name}.{metric} {getattr(lc, metric)}")
            out.append(f"{lc.name}.pruning_ratio {lc.pruning_ratio!r}")
        for metric in ("weight_params", "index_entries", "other_params", "total_params", "dense_params",
                       "flops", "dense_flops", "bitmap_bits"):
            out.append(f"total.{metric} {getattr(self, metric)}")
        out.append(f"total.pruning_ratio {self.pruning_ratio!r}")
        return "\n".join(out) + "\n"


def stripe_layer_cost(layer: StripeLayer, out_hw: tuple[int, int] | None = None) -> LayerCost:
    c, k = layer.in_channels, layer.k
    kept = layer.num_stripes
    lc = LayerCost(layer.name or "conv", "stripe", weight_params=kept * c, index_entries=kept,
                   dense_weight_params=layer.dense_filters * c * k * k,
                   other_params=0 if layer.bias is None else kept,
                   bitmap_bits=layer.dense_filters * k * k)
    if out_hw is not None:
        hw = out_hw[0] * out_hw[1]
        lc.flops = kept * c * 2 * hw
        lc.dense_flops = layer.dense_filters * c * k * k * 2 * hw
    return lc


def _walk_costs(layers, shape, report: CostReport, with_flops: bool):
    from . import engine  # engine imports this module

    for idx, layer in enumerate(layers):
        c, h, w = shape
        if isinstance(layer, StripeLayer):
            ho, wo = conv_output_hw(h, w, layer.k, layer.stride, layer.pad)
            report.layers.append(stripe_layer_cost(layer, (ho, wo) if with_flops else None))
            shape = (layer.n_filters, ho, wo)
        elif isinstance(layer, engine.Affine):
            n = len(layer.scale)
            report.layers.append(LayerCost(layer.name or "affine", "affine", other_params=2 * n,
                                           flops=2 * n * h * w if with_flops else 0,
                                           dense_flops=2 * n * h * w if with_flops else 0))
        elif isinstance(layer, engine.LinearSpec):
            o, i = layer.weight.shape
            report.layers.append(LayerCost(layer.name or "linear", "linear", other_params=o * i + o,
                                           flops=2 * o * i if with_flops else 0,
                                           dense_flops=2 * o * i if with_flops else 0))
            shape = (o, 1, 1)
        elif isinstance(layer, engine.MaxPoolSpec):
            shape = (c, h // 2, w // 2)
        elif isinstance(layer, engine.GapSpec):
            shape = (c, 1, 1)
        elif isinstance(layer, engine.ResidualSpec):
            body_shape = _walk_costs(layer.body, shape, report, with_flops)
            _walk_costs(layer.shortcut, shape, report, with_flops)
            shape = body_shape
    return shape


def _as_layers(model) -> tuple[list, tuple[int, int, int] | None]:
    if isinstance(model, StripeLayer):
        return [model], None
    if isinstance(model, (list, tuple)):
        return list(model), None
    return model.layers, tuple(model.in_shape)


def count_params(model) -> CostReport:
    """Parameter accounting for a StripeModel, a list of layers or a single StripeLayer."""
    layers, in_shape = _as_layers(model)
    report = CostReport()
    if in_shape is None:
        for layer in layers:
            if isinstance(layer, StripeLayer):
                report.layers.append(stripe_layer_cost(layer))
        return report
    _walk_costs(layers, in_shape, report, with_flops=False)
    return report


def count_flops(model, input_hw: tuple[int, int] | None = None) -> CostReport:
    """Parameter and FLOP accounting; ``input_hw`` overrides the model's input size."""
    layers, in_shape = _as_layers(model)
    if input_hw is None and in_shape is None:
        raise ValueError("input_hw is required for a bare layer list")
    first = next(l for l in layers if isinstance(l, StripeLayer)) if in_shape is None else None
    c = in_shape[0] if in_shape is not None else first.in_channels
    shape = (c, *(input_hw or in_shape[1:]))
    report = CostReport()
    _walk_costs(layers, shape, report, with_flops=True)
    return report


def stripe_layers(model) -> list[StripeLayer]:
    from . import engine

    layers, _ = _as_layers(model)
    found = []
    for layer in layers:
        if isinstance(layer, StripeLayer):
            found.append(layer)
        elif isinstance(layer, engine.ResidualSpec):
            found.extend(stripe_layers(layer.body) + stripe_layers(layer.shortcut))
    return found


def filter_bitmasks(layer: StripeLayer) -> np.ndarray:
    """One K*K-bit pattern per dense filter; bit ``i*K + j`` set when stripe (i, j) is kept.

    Filters removed by compaction appear as all-zero patterns.
    """
    masks = np.zeros(layer.dense_filters, dtype=np.int64)
    bits = layer.index[:, 1] * layer.k + layer.index[:, 2]
    np.bitwise_or.at(masks, layer.index[:, 0], np.left_shift(1, bits))
    return masks


def shape_histogram(model) -> list[list[tuple[int, int]]]:
    """Per layer: (bitmask, frequency) sorted by descending frequency then ascending mask."""
    out = []
    for layer in stripe_layers(model):
        if layer.k * layer.k > 16:
            raise ValueError(f"kernel {layer.k}x{layer.k} does not fit a 16-bit shape mask")
        counts = Counter(filter_bitmasks(layer).tolist())
        out.append(sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])))
    return out


def stripe_ratio_per_position(model) -> list[np.ndarray]:
    """Per layer: fraction of (dense) filters keeping each of the K*K positions."""
    out = []
    for layer in stripe_layers(model):
        counts = np.bincount(layer.index[:, 1] * layer.k + layer.index[:, 2], minlength=layer.k * layer.k)
        out.append(counts / layer.dense_filters)
    return out
