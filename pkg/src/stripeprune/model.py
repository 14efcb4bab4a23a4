"""Desk-scale networks built from Filter-Skeleton convolutions, plus checkpoints."""

from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np

from .data import FormatError
from .layers import (BatchNorm2d, FsConv2d, GlobalAvgPool, Linear, MaxPool2, Module, ReLU, Residual,
                     Sequential)

ARCHS = ("tiny-vgg", "tiny-resnet")
DEFAULT_WIDTHS = {"tiny-vgg": (32, 32, 64, 64), "tiny-resnet": (16, 32)}


class Network(Sequential):
    """A sequential FS network that remembers how it was built."""

    def __init__(self, layers, arch: str, in_shape: tuple[int, int, int], num_classes: int,
                 widths: tuple[int, ...], shared_skeleton: bool):
        super().__init__(layers)
        self.arch = arch
        self.in_shape = tuple(in_shape)
        self.num_classes = num_classes
        self.widths = tuple(widths)
        self.shared_skeleton = shared_skeleton

    def named_params(self) -> dict:
        return {p.name: p for p in self.params()}

    def batchnorms(self) -> list[BatchNorm2d]:
        return [m for m in self.modules() if isinstance(m, BatchNorm2d)]

    def meta(self) -> dict:
        return {"arch": self.arch, "in_shape": list(self.in_shape), "num_classes": self.num_classes,
                "widths": list(self.widths), "shared_skeleton": self.shared_skeleton}


def _conv_bn(rng, c_in, c_out, name, k=3, stride=1, shared=False):
    return [FsConv2d.init(rng, c_in, c_out, k, stride, shared, name=f"{name}.conv"),
            BatchNorm2d(c_out, name=f"{name}.bn")]


def build_network(arch: str, in_shape: tuple[int, int, int], num_classes: int,
                  widths: tuple[int, ...] | None = None, rng: np.random.Generator | None = None,
                  shared_skeleton: bool = False) -> Network:
    if arch not in ARCHS:
        raise ValueError(f"unknown arch {arch!r}; expected one of {ARCHS}")
    widths = tuple(widths or DEFAULT_WIDTHS[arch])
    rng = rng if rng is not None else np.random.default_rng(0)
    c_in = in_shape[0]
    sh = shared_skeleton

    if arch == "tiny-vgg":
        if len(widths) != 4:
            raise ValueError("tiny-vgg takes four widths")
        w1, w2, w3, w4 = widths
        layers = [*_conv_bn(rng, c_in, w1, "l1", shared=sh), ReLU(),
                  *_conv_bn(rng, w1, w2, "l2", shared=sh), ReLU(), MaxPool2(),
                  *_conv_bn(rng, w2, w3, "l3", shared=sh), ReLU(),
                  *_conv_bn(rng, w3, w4, "l4", shared=sh), ReLU(), MaxPool2(),
                  GlobalAvgPool(), Linear.init(rng, w4, num_classes)]
    else:
        if len(widths) != 2:
            raise ValueError("tiny-resnet takes two widths")
        w1, w2 = widths
        block1 = Residual(Sequential([*_conv_bn(rng, w1, w1, "b1.c1", shared=sh), ReLU(),
                                      *_conv_bn(rng, w1, w1, "b1.c2", shared=sh)]))
        block2 = Residual(Sequential([*_conv_bn(rng, w1, w2, "b2.c1", stride=2, shared=sh), ReLU(),
                                      *_conv_bn(rng, w2, w2, "b2.c2", shared=sh)]),
                          Sequential(_conv_bn(rng, w1, w2, "b2.down", k=1, stride=2, shared=sh)))
        layers = [*_conv_bn(rng, c_in, w1, "stem", shared=sh), ReLU(),
                  block1, ReLU(), block2, ReLU(),
                  GlobalAvgPool(), Linear.init(rng, w2, num_classes)]
    return Network(layers, arch, in_shape, num_classes, widths, shared_skeleton)


def predict(net: Module, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode logits, computed in chunks."""
    out = [net.forward(x[i:i + batch_size], train=False) for i in range(0, len(x), batch_size)]
    return np.concatenate(out, axis=0)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((logits.argmax(axis=1) == labels).mean() * 100.0)


def save_checkpoint(net: Network, path: str | Path, extra: dict | None = None) -> None:
    arrays = {}
    for p in net.params():
        arrays[f"param/{p.name}"] = p.value
        if p.frozen is not None:
            arrays[f"frozen/{p.name}"] = p.frozen
    for bn in net.batchnorms():
        arrays[f"running_mean/{bn.name}"] = bn.running_mean
        arrays[f"running_var/{bn.name}"] = bn.running_var
    meta = net.meta() | {"extra": extra or {}}
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> tuple[Network, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint: {path}")
    try:
        with np.load(path) as data:
            meta = json.loads(bytes(data["meta"]).decode())
            net = build_network(meta["arch"], tuple(meta["in_shape"]), meta["num_classes"],
                                tuple(meta["widths"]), shared_skeleton=meta["shared_skeleton"])
            for p in net.params():
                p.value[...] = data[f"param/{p.name}"]
                if p.frozen is not None:
                    p.frozen[...] = data[f"frozen/{p.name}"]
            for bn in net.batchnorms():
                bn.running_mean[...] = data[f"running_mean/{bn.name}"]
                bn.running_var[...] = data[f"running_var/{bn.name}"]
    except (KeyError, ValueError, OSError, zipfile.BadZipFile) as exc:
        raise FormatError(f"unreadable checkpoint {path}: {exc}") from None
    return net, meta.get("extra", {})
