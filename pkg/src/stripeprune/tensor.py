"""Dense NCHW array helpers.

Tensors are plain ``numpy.ndarray`` objects; this module only pins down the
conventions the rest of the package relies on (rank checks, the zero-padding
rule used by every convolution path, and shape-checked elementwise ops).
"""

from __future__ import annotations

import operator

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when array dimensions do not satisfy an operation's contract."""


def as_tensor4(x, dtype=DTYPE) -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.ndim != 4:
        raise ShapeError(f"expected rank-4 (n, c, h, w) array, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ShapeError(f"all dims must be >= 1, got {arr.shape}")
    return arr


def as_tensor2(x, dtype=DTYPE) -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.ndim != 2:
        raise ShapeError(f"expected rank-2 (rows, cols) array, got shape {arr.shape}")
    return arr


def padded_get(x: np.ndarray, n: int, c: int, p: int, q: int) -> float:
    """Read ``x[n, c, p, q]`` with 1-based spatial indices, 0 outside the map.

    ``n`` and ``c`` are 0-based and must be in range; violating that is a bug
    in the caller, so it raises ``IndexError`` rather than returning 0.
    """
    nb, nc, h, w = x.shape
    if not (0 <= n < nb and 0 <= c < nc):
        raise IndexError(f"(n={n}, c={c}) outside dims {x.shape[:2]}")
    if 1 <= p <= h and 1 <= q <= w:
        return float(x[n, c, p - 1, q - 1])
    return 0.0


_OPS = {"add": operator.add, "mul": operator.mul, "sub": operator.sub}


def elementwise(a: np.ndarray, b: np.ndarray, op: str) -> np.ndarray:
    if op not in _OPS:
        raise ValueError(f"unknown op {op!r}; expected one of {sorted(_OPS)}")
    if a.shape != b.shape:
        raise ShapeError(f"dim mismatch: {a.shape} vs {b.shape}")
    return _OPS[op](a, b)


def pad_spatial(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv_output_hw(h: int, w: int, k: int, stride: int, pad: int) -> tuple[int, int]:
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"input {h}x{w} too small for k={k}, stride={stride}, pad={pad}")
    return ho, wo
