"""Inference on pruned models with stripe-wise convolution.

Each kept stripe is a 1x1 convolution applied to the input shifted by the
stripe's kernel offset; a filter's output is the sum over its stripes.  The
kernel below groups stripes by offset so that one shifted view of the input
serves every filter that kept that position.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .layers import (BatchNorm2d, FsConv2d, GlobalAvgPool, Linear, MaxPool2, Module, ReLU, Residual,
                     Sequential, conv2d)
from .prune import StripeLayer, extract_stripes
from .tensor import ShapeError, as_tensor4, conv_output_hw, pad_spatial


class ExportError(RuntimeError):
    pass


def _shifted(xp: np.ndarray, i: int, j: int, stride: int, ho: int, wo: int) -> np.ndarray:
    return xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]


def stripe_conv_forward(layer: StripeLayer, x: np.ndarray) -> np.ndarray:
    if x.ndim != 4 or x.shape[1] != layer.in_channels:
        raise ShapeError(f"stripe layer expects {layer.in_channels} input channels, got shape {x.shape}")
    b, _, h, w = x.shape
    ho, wo = conv_output_hw(h, w, layer.k, layer.stride, layer.pad)
    out = np.zeros((b, layer.n_filters, ho, wo), dtype=np.result_type(x, layer.weights))
    if layer.num_stripes == 0:
        return out
    xp = pad_spatial(x, layer.pad)
    if layer.bias is not None:
        inside = pad_spatial(np.ones((1, 1, h, w), dtype=out.dtype), layer.pad)
    for i, j, filters, wmat, bias in layer.by_offset:
        shifted = _shifted(xp, i, j, layer.stride, ho, wo)
        contrib = np.einsum("nc,bchw->bnhw", wmat, shifted, optimize=True)
        if bias is not None:
            contrib = contrib + bias[None, :, None, None] * _shifted(inside, i, j, layer.stride, ho, wo)
        out[:, filters] += contrib
    return out


def stripe_conv_reference(layer: StripeLayer, x: np.ndarray) -> np.ndarray:
    """One stripe at a time, no grouping; used as a cross-check of the grouped kernel."""
    b, _, h, w = x.shape
    ho, wo = conv_output_hw(h, w, layer.k, layer.stride, layer.pad)
    out = np.zeros((b, layer.n_filters, ho, wo), dtype=np.result_type(x, layer.weights))
    xp = pad_spatial(x, layer.pad)
    inside = pad_spatial(np.ones((1, 1, h, w)), layer.pad)
    for s, (n, i, j) in enumerate(layer.index):
        shifted = _shifted(xp, i, j, layer.stride, ho, wo)
        out[:, n] += np.tensordot(layer.weights[s], shifted, axes=([0], [1]))
        if layer.bias is not None:
            out[:, n] += layer.bias[s] * _shifted(inside, i, j, layer.stride, ho, wo)[0, 0]
    return out


# ---------------------------------------------------------------------------
# inference layer specs

@dataclass(eq=False)
class Affine:
    scale: np.ndarray
    shift: np.ndarray
    name: str = ""

    def forward(self, x):
        return x * self.scale[None, :, None, None] + self.shift[None, :, None, None]


@dataclass(eq=False)
class ReLUSpec:
    def forward(self, x):
        return np.maximum(x, 0.0)


@dataclass(eq=False)
class MaxPoolSpec:
    def forward(self, x):
        b, c, h, w = x.shape
        h2, w2 = h // 2, w // 2
        return x[:, :, :2 * h2, :2 * w2].reshape(b, c, h2, 2, w2, 2).max(axis=(3, 5))


@dataclass(eq=False)
class GapSpec:
    def forward(self, x):
        return x.mean(axis=(2, 3))


@dataclass(eq=False)
class LinearSpec:
    weight: np.ndarray
    bias: np.ndarray
    name: str = ""

    def forward(self, x):
        return x @ self.weight.T + self.bias


@dataclass(eq=False)
class ResidualSpec:
    body: list
    shortcut: list = field(default_factory=list)

    def forward(self, x):
        return _run_layers(self.body, x) + _run_layers(self.shortcut, x)


def _forward(layer, x):
    if isinstance(layer, StripeLayer):
        return stripe_conv_forward(layer, x)
    return layer.forward(x)


def _run_layers(layers, x):
    for layer in layers:
        x = _forward(layer, x)
    return x


@dataclass(eq=False)
class StripeModel:
    layers: list
    in_shape: tuple[int, int, int]
    num_classes: int

    def __post_init__(self):
        self.in_shape = tuple(int(v) for v in self.in_shape)


def run_model(model: StripeModel, batch: np.ndarray, batch_size: int = 256) -> np.ndarray:
    batch = as_tensor4(batch, dtype=np.result_type(batch, np.float32))
    if tuple(batch.shape[1:]) != model.in_shape:
        raise ShapeError(f"model expects inputs of shape {model.in_shape}, got {batch.shape[1:]}")
    chunks = [_run_layers(model.layers, batch[i:i + batch_size]) for i in range(0, len(batch), batch_size)]
    logits = np.concatenate(chunks, axis=0)
    if logits.shape[1:] != (model.num_classes,):
        raise ShapeError(f"model produced logits of shape {logits.shape}")
    return logits


# ---------------------------------------------------------------------------
# export from a trained FS network

def _convert(modules) -> list:
    out = []
    for m in modules:
        if isinstance(m, FsConv2d):
            out.append(extract_stripes(m.layer, m.name))
        elif isinstance(m, BatchNorm2d):
            scale, shift = m.folded()
            out.append(Affine(scale.copy(), shift.copy(), m.name))
        elif isinstance(m, ReLU):
            out.append(ReLUSpec())
        elif isinstance(m, MaxPool2):
            out.append(MaxPoolSpec())
        elif isinstance(m, GlobalAvgPool):
            out.append(GapSpec())
        elif isinstance(m, Linear):
            out.append(LinearSpec(m.weight.value.copy(), m.bias.value.copy(), m.name))
        elif isinstance(m, Residual):
            out.append(ResidualSpec(_convert(m.body.layers), _convert(m.shortcut.layers)))
        elif isinstance(m, Sequential):
            out.extend(_convert(m.layers))
        else:
            raise ExportError(f"cannot export layer {type(m).__name__}")
    return out


def _drop_filters(layer: StripeLayer, dead: np.ndarray) -> StripeLayer:
    keep = np.setdiff1d(np.arange(layer.n_filters), dead)
    remap = np.full(layer.n_filters, -1)
    remap[keep] = np.arange(len(keep))
    index = layer.index.copy()
    index[:, 0] = remap[index[:, 0]]
    return StripeLayer(index, layer.weights, len(keep), layer.in_channels, layer.k, layer.stride, layer.pad,
                       layer.bias, layer.dense_filters, layer.name)


def _drop_inputs(layer: StripeLayer, dead: np.ndarray, const: np.ndarray) -> StripeLayer:
    """Remove constant input channels, folding their contribution into per-stripe bias."""
    keep = np.setdiff1d(np.arange(layer.in_channels), dead)
    bias = layer.weights[:, dead] @ const
    if layer.bias is not None:
        bias = bias + layer.bias
    has_bias = layer.bias is not None or np.any(bias != 0)
    return StripeLayer(layer.index, layer.weights[:, keep], layer.n_filters, len(keep), layer.k, layer.stride,
                       layer.pad, bias if has_bias else None, layer.dense_filters, layer.name)


def _compact(layers: list) -> list:
    """Remove filters that lost every stripe.

    A stripeless filter outputs exactly zero, so after the following affine /
    ReLU / max-pool chain its channel is a known constant.  That constant is
    folded into the next consumer (per-stripe bias of the next stripe layer, or
    the bias of a linear layer behind global pooling) and the channel is
    dropped everywhere in between.  Residual outputs are left untouched.
    """
    layers = list(layers)
    for idx, layer in enumerate(layers):
        if isinstance(layer, ResidualSpec):
            layers[idx] = ResidualSpec(_compact(layer.body), _compact(layer.shortcut))
            continue
        if not isinstance(layer, StripeLayer):
            continue
        dead = np.setdiff1d(np.arange(layer.n_filters), layer.surviving_filters)
        if not len(dead):
            continue
        const = np.zeros(len(dead))
        between = []
        j = idx + 1
        consumer = None
        while j < len(layers):
            nxt = layers[j]
            if isinstance(nxt, Affine):
                const = const * nxt.scale[dead] + nxt.shift[dead]
            elif isinstance(nxt, ReLUSpec):
                const = np.maximum(const, 0.0)
            elif isinstance(nxt, (MaxPoolSpec, GapSpec)):
                pass
            elif isinstance(nxt, StripeLayer):
                consumer = j
                break
            elif isinstance(nxt, LinearSpec) and any(isinstance(layers[t], GapSpec) for t in between):
                consumer = j
                break
            else:
                break
            between.append(j)
            j += 1
        if consumer is None or len(dead) == layer.n_filters:
            continue  # a fully pruned layer keeps its (zero) channels
        keep = np.setdiff1d(np.arange(layer.n_filters), dead)
        layers[idx] = _drop_filters(layer, dead)
        for t in between:
            if isinstance(layers[t], Affine):
                layers[t] = Affine(layers[t].scale[keep], layers[t].shift[keep], layers[t].name)
        tgt = layers[consumer]
        if isinstance(tgt, StripeLayer):
            layers[consumer] = _drop_inputs(tgt, dead, const)
        else:
            layers[consumer] = LinearSpec(tgt.weight[:, keep], tgt.bias + tgt.weight[:, dead] @ const, tgt.name)
    return layers


def export_model(net, compact: bool = True, probe: np.ndarray | None = None, tol: float = 1e-8,
                 seed: int = 0) -> StripeModel:
    """Convert a trained FS network into a StripeModel and verify it.

    Batch-norm layers become per-channel affines after the stripe sum.  The
    exported logits are compared with the network's eval-mode logits on
    ``probe`` (random inputs by default); a mismatch above ``tol`` raises
    :class:`ExportError`.
    """
    layers = _convert(net.layers)
    if compact:
        layers = _compact(layers)
    model = StripeModel(layers, net.in_shape, net.num_classes)
    if probe is None:
        probe = np.random.default_rng(seed).normal(size=(4, *net.in_shape))
    ref = net.forward(probe, train=False)
    got = run_model(model, probe)
    err = float(np.max(np.abs(ref - got)))
    if not err <= tol:
        raise ExportError(f"exported logits differ from the FS network by {err:.3e} (tolerance {tol:g})")
    return model


def cast_model(model: StripeModel, dtype) -> StripeModel:
    def cast(layers):
        out = []
        for l in layers:
            if isinstance(l, StripeLayer):
                out.append(StripeLayer(l.index, l.weights.astype(dtype), l.n_filters, l.in_channels, l.k, l.stride,
                                       l.pad, None if l.bias is None else l.bias.astype(dtype),
                                       l.dense_filters, l.name))
            elif isinstance(l, Affine):
                out.append(Affine(l.scale.astype(dtype), l.shift.astype(dtype), l.name))
            elif isinstance(l, LinearSpec):
                out.append(LinearSpec(l.weight.astype(dtype), l.bias.astype(dtype), l.name))
            elif isinstance(l, ResidualSpec):
                out.append(ResidualSpec(cast(l.body), cast(l.shortcut)))
            else:
                out.append(l)
        return out

    return StripeModel(cast(model.layers), model.in_shape, model.num_classes)


# ---------------------------------------------------------------------------
# benchmark

BENCH_HEADER = "sparsity,dense_ms,stripe_ms,checksum_ok"


def bench_kernels(n: int = 64, c: int = 64, k: int = 3, hw: int = 16, batch: int = 8,
                  sparsities=(0.0, 0.25, 0.5, 0.75, 0.9), repeats: int = 5, seed: int = 0,
                  tol: float = 1e-6) -> list[dict]:
    """Time dense vs stripe-wise convolution (float32) on synthetic data.

    The dense kernel convolves with the masked weight tensor; both outputs are
    compared at every grid point.
    """
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(batch, c, hw, hw)).astype(np.float32)
    W = rng.normal(size=(n, c, k, k)).astype(np.float32) / np.float32(np.sqrt(c * k * k))
    pad = (k - 1) // 2
    rows = []
    for sparsity in sparsities:
        keep = rng.random((n, k, k)) >= sparsity
        masked = W * keep[:, None]
        ns, is_, js = np.nonzero(keep)
        layer = StripeLayer(np.stack([ns, is_, js], 1), W[ns, :, is_, js], n, c, k, 1, pad)

        def timed(fn):
            best = np.inf
            for _ in range(repeats):
                t0 = time.perf_counter()
                out = fn()
                best = min(best, time.perf_counter() - t0)
            return out, best * 1e3

        dense_out, dense_ms = timed(lambda: conv2d(x, masked, 1, pad))
        stripe_out, stripe_ms = timed(lambda: stripe_conv_forward(layer, x))
        ok = bool(np.max(np.abs(dense_out - stripe_out)) < tol)
        rows.append({"sparsity": float(sparsity), "dense_ms": dense_ms, "stripe_ms": stripe_ms, "checksum_ok": ok})
    return rows


def bench_csv(rows: list[dict]) -> str:
    lines = [BENCH_HEADER]
    for r in rows:
        lines.append(f"{r['sparsity']:g},{r['dense_ms']:.4f},{r['stripe_ms']:.4f},{str(r['checksum_ok']).lower()}")
    return "\n".join(lines) + "\n"
