"""Filter-Skeleton convolution and the auxiliary layers used to build networks.

The convolution weight ``W`` has shape (N, C, K, K) and is always used through
the effective weight ``W * I`` where the skeleton ``I`` has shape (G, K, K) and
is broadcast over the channel axis.  ``G == N`` gives one scalar per stripe;
``G == 1`` shares one (K, K) pattern across all filters of the layer (the
group-wise variant).

All spatial indexing is 0-based: output position (h, w) with kernel offset
(i, j) reads input position (h*stride - pad + i, w*stride - pad + j), and
anything outside the feature map reads as zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DTYPE, ShapeError, as_tensor4, conv_output_hw, pad_spatial


@dataclass
class FilterSkeleton:
    values: np.ndarray
    frozen: np.ndarray

    @classmethod
    def ones(cls, groups: int, k: int) -> "FilterSkeleton":
        return cls(np.ones((groups, k, k), dtype=DTYPE), np.zeros((groups, k, k), dtype=bool))

    @property
    def shared(self) -> bool:
        return self.values.shape[0] == 1

    def copy(self) -> "FilterSkeleton":
        return FilterSkeleton(self.values.copy(), self.frozen.copy())


@dataclass
class FsConvLayer:
    W: np.ndarray
    skeleton: FilterSkeleton
    stride: int = 1
    pad: int | None = None

    def __post_init__(self):
        n, c, k, k2 = self.W.shape
        if k != k2 or k % 2 == 0:
            raise ShapeError(f"only square odd kernels are supported, got {k}x{k2}")
        g, sk, sk2 = self.skeleton.values.shape
        if (sk, sk2) != (k, k) or g not in (1, n):
            raise ShapeError(f"skeleton shape {self.skeleton.values.shape} does not match weights {self.W.shape}")
        if self.stride not in (1, 2):
            raise ShapeError(f"stride must be 1 or 2, got {self.stride}")
        if self.pad is None:
            self.pad = (k - 1) // 2

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.W.shape

    def effective_weight(self) -> np.ndarray:
        return self.W * self.skeleton.values[:, None, :, :]

    def copy(self) -> "FsConvLayer":
        return FsConvLayer(self.W.copy(), self.skeleton.copy(), self.stride, self.pad)


@dataclass
class LayerGrads:
    dW: np.ndarray
    dI: np.ndarray
    dX: np.ndarray


def _windows(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """Strided view of shape (B, C, Ho, Wo, K, K) over the zero-padded input."""
    ho, wo = conv_output_hw(x.shape[2], x.shape[3], k, stride, pad)
    win = sliding_window_view(pad_spatial(x, pad), (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride][:, :, :ho, :wo]


def im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """Patch matrix of shape (B*Ho*Wo, C*K*K), rows in (b, h, w) order."""
    win = _windows(x, k, stride, pad)
    b, c, ho, wo = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * ho * wo, c * k * k)


def conv2d(x: np.ndarray, weight: np.ndarray, stride: int = 1, pad: int = 0,
           cols: np.ndarray | None = None) -> np.ndarray:
    """Plain dense convolution (cross-correlation) without bias."""
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels, weight expects {weight.shape[1]}")
    n, _, k, _ = weight.shape
    ho, wo = conv_output_hw(x.shape[2], x.shape[3], k, stride, pad)
    if cols is None:
        cols = im2col(x, k, stride, pad)
    out = cols @ weight.reshape(n, -1).T
    return np.ascontiguousarray(out.reshape(x.shape[0], ho, wo, n).transpose(0, 3, 1, 2))


def fs_conv_forward(layer: FsConvLayer, x: np.ndarray, cols: np.ndarray | None = None) -> np.ndarray:
    x = as_tensor4(x, dtype=layer.W.dtype)
    return conv2d(x, layer.effective_weight(), layer.stride, layer.pad, cols)


def fs_conv_backward(layer: FsConvLayer, x: np.ndarray, dout: np.ndarray,
                     cols: np.ndarray | None = None) -> LayerGrads:
    """Gradients w.r.t. weights, skeleton and input.

    ``cols`` may carry the patch matrix already built by the forward pass.
    """
    n, c, k, _ = layer.W.shape
    x = as_tensor4(x, dtype=layer.W.dtype)
    b, _, h, w = x.shape
    ho, wo = conv_output_hw(h, w, k, layer.stride, layer.pad)
    if dout.shape != (b, n, ho, wo):
        raise ShapeError(f"dOut shape {dout.shape} != forward output shape {(b, n, ho, wo)}")
    s, p = layer.stride, layer.pad
    I = layer.skeleton.values[:, None, :, :]
    if cols is None:
        cols = im2col(x, k, s, p)

    dmat = dout.transpose(0, 2, 3, 1).reshape(-1, n)  # (B*Ho*Wo, N)
    d_eff = (dmat.T @ cols).reshape(n, c, k, k)
    dW = d_eff * I
    dI = (d_eff * layer.W).sum(axis=1)
    if layer.skeleton.shared:
        dI = dI.sum(axis=0, keepdims=True)
    dI[layer.skeleton.frozen] = 0.0

    dcols = (dmat @ layer.effective_weight().reshape(n, -1)).reshape(b, ho, wo, c, k, k)
    dxp = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += dcols[..., i, j].transpose(0, 3, 1, 2)
    return LayerGrads(dW, dI, np.ascontiguousarray(dxp[:, :, p:p + h, p:p + w]))


def merge_skeleton(layer: FsConvLayer) -> FsConvLayer:
    """Fold the skeleton into the weights; the result carries an all-ones skeleton."""
    groups = layer.skeleton.values.shape[0]
    return FsConvLayer(layer.effective_weight(), FilterSkeleton.ones(groups, layer.W.shape[2]),
                       layer.stride, layer.pad)


# ---------------------------------------------------------------------------
# trainable modules

@dataclass
class Param:
    name: str
    value: np.ndarray
    kind: str  # conv | skeleton | bn | linear
    grad: np.ndarray | None = None
    frozen: np.ndarray | None = None  # entries pinned to zero (skeleton only)
    decay: bool = True

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)


class Module:
    def forward(self, x, train: bool = False):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def params(self) -> list[Param]:
        return []

    def children(self) -> list["Module"]:
        return []

    def modules(self):
        yield self
        for child in self.children():
            yield from child.modules()


class FsConv2d(Module):
    def __init__(self, layer: FsConvLayer, name: str = "conv"):
        self.layer = layer
        self.name = name
        self._x = None
        self._w = Param(f"{name}.weight", layer.W, "conv")
        self._i = Param(f"{name}.skeleton", layer.skeleton.values, "skeleton",
                        frozen=layer.skeleton.frozen, decay=False)

    @classmethod
    def init(cls, rng: np.random.Generator, c_in: int, c_out: int, k: int = 3, stride: int = 1,
             shared_skeleton: bool = False, name: str = "conv") -> "FsConv2d":
        std = np.sqrt(2.0 / (c_in * k * k))
        W = rng.normal(0.0, std, size=(c_out, c_in, k, k))
        skel = FilterSkeleton.ones(1 if shared_skeleton else c_out, k)
        return cls(FsConvLayer(W, skel, stride), name)

    def forward(self, x, train=False):
        self._x = x
        self._cols = im2col(x, self.layer.W.shape[2], self.layer.stride, self.layer.pad)
        return fs_conv_forward(self.layer, x, self._cols)

    def backward(self, dout):
        g = fs_conv_backward(self.layer, self._x, dout, self._cols)
        self._w.grad += g.dW
        self._i.grad += g.dI
        return g.dX

    def params(self):
        return [self._w, self._i]


class ReLU(Module):
    def forward(self, x, train=False):
        self._mask = x > 0
        return np.maximum(x, 0.0)  # keeps NaN visible so divergence is caught

    def backward(self, dout):
        return np.where(self._mask, dout, 0.0)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


class MaxPool2(Module):
    """2x2 max pooling with stride 2; odd trailing rows/cols are dropped."""

    def forward(self, x, train=False):
        b, c, h, w = x.shape
        h2, w2 = h // 2, w // 2
        if h2 < 1 or w2 < 1:
            raise ShapeError(f"cannot 2x2-pool a {h}x{w} map")
        self._in_shape = x.shape
        blocks = x[:, :, :2 * h2, :2 * w2].reshape(b, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
        blocks = blocks.reshape(b, c, h2, w2, 4)
        self._arg = blocks.argmax(axis=-1)
        return np.take_along_axis(blocks, self._arg[..., None], axis=-1)[..., 0]

    def backward(self, dout):
        b, c, h, w = self._in_shape
        h2, w2 = h // 2, w // 2
        blocks = np.zeros((b, c, h2, w2, 4), dtype=dout.dtype)
        np.put_along_axis(blocks, self._arg[..., None], dout[..., None], axis=-1)
        blocks = blocks.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, 2 * h2, 2 * w2)
        dx = np.zeros(self._in_shape, dtype=dout.dtype)
        dx[:, :, :2 * h2, :2 * w2] = blocks
        return dx


class GlobalAvgPool(Module):
    def forward(self, x, train=False):
        self._in_shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dout):
        b, c, h, w = self._in_shape
        return np.broadcast_to(dout[:, :, None, None] / (h * w), self._in_shape).copy()


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, name: str = "bn"):
        self.name = name
        self.momentum = momentum
        self.eps = eps
        self.gamma = Param(f"{name}.weight", np.ones(channels, dtype=DTYPE), "bn")
        self.beta = Param(f"{name}.bias", np.zeros(channels, dtype=DTYPE), "bn")
        self.running_mean = np.zeros(channels, dtype=DTYPE)
        self.running_var = np.ones(channels, dtype=DTYPE)

    def forward(self, x, train=False):
        if x.shape[1] != self.gamma.value.shape[0]:
            raise ShapeError(f"batchnorm expects {self.gamma.value.shape[0]} channels, got {x.shape[1]}")
        if train:
            m = x.shape[0] * x.shape[2] * x.shape[3]
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            self.running_mean *= 1 - self.momentum
            self.running_mean += self.momentum * mean
            self.running_var *= 1 - self.momentum
            self.running_var += self.momentum * var * m / max(m - 1, 1)
        else:
            mean, var = self.running_mean, self.running_var
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
        self._cache = (xhat, inv, train)
        return xhat * self.gamma.value[None, :, None, None] + self.beta.value[None, :, None, None]

    def backward(self, dout):
        xhat, inv, train = self._cache
        self.gamma.grad += (dout * xhat).sum(axis=(0, 2, 3))
        self.beta.grad += dout.sum(axis=(0, 2, 3))
        dxhat = dout * self.gamma.value[None, :, None, None]
        if not train:
            return dxhat * inv[None, :, None, None]
        m = dout.shape[0] * dout.shape[2] * dout.shape[3]
        s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
        return inv[None, :, None, None] * (dxhat - s1 / m - xhat * s2 / m)

    def folded(self) -> tuple[np.ndarray, np.ndarray]:
        """Inference-time per-channel (scale, shift)."""
        scale = self.gamma.value / np.sqrt(self.running_var + self.eps)
        return scale, self.beta.value - self.running_mean * scale

    def params(self):
        return [self.gamma, self.beta]


class Linear(Module):
    def __init__(self, weight: np.ndarray, bias: np.ndarray, name: str = "fc"):
        self.name = name
        self.weight = Param(f"{name}.weight", weight, "linear")
        self.bias = Param(f"{name}.bias", bias, "linear", decay=False)

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int, n_out: int, name: str = "fc") -> "Linear":
        return cls(rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_out, n_in)), np.zeros(n_out, dtype=DTYPE), name)

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.weight.value.shape[1]:
            raise ShapeError(f"linear expects (b, {self.weight.value.shape[1]}), got {x.shape}")
        self._x = x
        return x @ self.weight.value.T + self.bias.value

    def backward(self, dout):
        self.weight.grad += dout.T @ self._x
        self.bias.grad += dout.sum(axis=0)
        return dout @ self.weight.value

    def params(self):
        return [self.weight, self.bias]


class Sequential(Module):
    def __init__(self, layers: list[Module]):
        self.layers = list(layers)

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def children(self):
        return self.layers


class Residual(Module):
    """``body(x) + shortcut(x)``; an empty shortcut is the identity."""

    def __init__(self, body: Sequential, shortcut: Sequential | None = None):
        self.body = body
        self.shortcut = shortcut if shortcut is not None else Sequential([])

    def forward(self, x, train=False):
        return self.body.forward(x, train) + self.shortcut.forward(x, train)

    def backward(self, dout):
        return self.body.backward(dout) + self.shortcut.backward(dout)

    def params(self):
        return self.body.params() + self.shortcut.params()

    def children(self):
        return [self.body, self.shortcut]


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} disagree")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    b = logits.shape[0]
    loss = -logp[np.arange(b), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(b), labels] -= 1.0
    return float(loss), grad / b
