"""Binary file format for StripeModels.

All integers are little-endian.

header::

    b"SWPM" | u16 version | u8 float width (4 or 8) | u8 reserved
    | u32 in_c | u32 in_h | u32 in_w | u32 num_classes | u32 layer count
    | u32 CRC32 of the preceding header bytes

then one record per layer::

    u8 kind | u32 body length | body | u32 CRC32 of (kind, length, body)

Stripe bodies hold the meta ints, the (n, i, j) stripe indexes as u16
triples, then the float payload.  Residual bodies nest the records of their
two branches.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .data import FormatError
from .engine import Affine, GapSpec, LinearSpec, MaxPoolSpec, ReLUSpec, ResidualSpec, StripeModel
from .prune import StripeLayer

MAGIC = b"SWPM"
VERSION = 1
_HEADER = struct.Struct("<4sHBBIIIII")
KIND_STRIPE, KIND_AFFINE, KIND_RELU, KIND_MAXPOOL, KIND_GAP, KIND_LINEAR, KIND_RESIDUAL = range(1, 8)
_FLOATS = {4: np.dtype("<f4"), 8: np.dtype("<f8")}
_MAX_DEPTH = 8


class IntegrityError(FormatError):
    """A record's checksum does not match its bytes."""


def _name_bytes(name: str) -> bytes:
    raw = name.encode()
    return struct.pack("<H", len(raw)) + raw


def _encode_layer(layer, fdt: np.dtype) -> bytes:
    def floats(a):
        return np.ascontiguousarray(a, dtype=fdt).tobytes()

    if isinstance(layer, StripeLayer):
        if max(layer.n_filters, layer.k) >= 1 << 16:
            raise ValueError("stripe indexes must fit in u16")
        has_bias = layer.bias is not None
        body = (_name_bytes(layer.name)
                + struct.pack("<IIHHHIIB", layer.n_filters, layer.in_channels, layer.k, layer.stride, layer.pad,
                              layer.dense_filters, layer.num_stripes, int(has_bias))
                + layer.index.astype("<u2").tobytes() + floats(layer.weights)
                + (floats(layer.bias) if has_bias else b""))
        kind = KIND_STRIPE
    elif isinstance(layer, Affine):
        body = _name_bytes(layer.name) + struct.pack("<I", len(layer.scale)) + floats(layer.scale) + floats(layer.shift)
        kind = KIND_AFFINE
    elif isinstance(layer, LinearSpec):
        o, i = layer.weight.shape
        body = _name_bytes(layer.name) + struct.pack("<II", o, i) + floats(layer.weight) + floats(layer.bias)
        kind = KIND_LINEAR
    elif isinstance(layer, ResidualSpec):
        body = struct.pack("<II", len(layer.body), len(layer.shortcut))
        body += b"".join(_encode_layer(l, fdt) for l in layer.body + layer.shortcut)
        kind = KIND_RESIDUAL
    elif isinstance(layer, ReLUSpec):
        kind, body = KIND_RELU, b""
    elif isinstance(layer, MaxPoolSpec):
        kind, body = KIND_MAXPOOL, b""
    elif isinstance(layer, GapSpec):
        kind, body = KIND_GAP, b""
    else:
        raise TypeError(f"cannot serialize {type(layer).__name__}")
    head = struct.pack("<BI", kind, len(body))
    return head + body + struct.pack("<I", zlib.crc32(head + body))


def dumps(model: StripeModel, float_width: int = 4) -> bytes:
    if float_width not in _FLOATS:
        raise ValueError("float_width must be 4 or 8")
    head = _HEADER.pack(MAGIC, VERSION, float_width, 0, *model.in_shape, model.num_classes, len(model.layers))
    out = [head, struct.pack("<I", zlib.crc32(head))]
    out += [_encode_layer(layer, _FLOATS[float_width]) for layer in model.layers]
    return b"".join(out)


def save_model(model: StripeModel, path: str | Path, float_width: int = 4) -> None:
    Path(path).write_bytes(dumps(model, float_width))


class _Reader:
    def __init__(self, buf: bytes, start: int = 0, end: int | None = None):
        self.buf = buf
        self.pos = start
        self.end = len(buf) if end is None else end

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > self.end:
            raise FormatError(f"truncated {what}: need {n} bytes, {self.end - self.pos} left", self.pos)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))

    def floats(self, count: int, fdt: np.dtype, what: str) -> np.ndarray:
        return np.frombuffer(self.take(count * fdt.itemsize, what), dtype=fdt).copy()

    def name(self) -> str:
        n, = self.unpack("<H", "name length")
        try:
            return self.take(n, "name").decode()
        except UnicodeDecodeError:
            raise FormatError("layer name is not UTF-8", self.pos - n) from None


def _decode_record(r: _Reader, fdt: np.dtype, depth: int):
    start = r.pos
    kind, length = r.unpack("<BI", "record header")
    body_start = r.pos
    r.take(length, "record body")
    crc, = r.unpack("<I", "record checksum")
    if zlib.crc32(r.buf[start:body_start + length]) != crc:
        raise IntegrityError("record checksum mismatch", start)
    b = _Reader(r.buf, body_start, body_start + length)

    if kind == KIND_STRIPE:
        name = b.name()
        n, c, k, stride, pad, dense, s, has_bias = b.unpack("<IIHHHIIB", "stripe meta")
        if k == 0 or k % 2 == 0 or stride not in (1, 2) or has_bias > 1 or dense < n:
            raise FormatError("invalid stripe layer meta", body_start)
        index = np.frombuffer(b.take(6 * s, "stripe indexes"), dtype="<u2").reshape(s, 3).astype(np.int64)
        weights = b.floats(s * c, fdt, "stripe weights").reshape(s, c)
        bias = b.floats(s, fdt, "stripe bias") if has_bias else None
        try:
            layer = StripeLayer(index, weights, n, c, k, stride, pad, bias, dense, name)
        except ValueError as exc:
            raise FormatError(f"invalid stripe layer: {exc}", body_start) from None
    elif kind == KIND_AFFINE:
        name = b.name()
        c, = b.unpack("<I", "affine meta")
        layer = Affine(b.floats(c, fdt, "affine scale"), b.floats(c, fdt, "affine shift"), name)
    elif kind == KIND_LINEAR:
        name = b.name()
        o, i = b.unpack("<II", "linear meta")
        if o * i * fdt.itemsize > length:
            raise FormatError("linear layer larger than its record", body_start)
        layer = LinearSpec(b.floats(o * i, fdt, "linear weight").reshape(o, i), b.floats(o, fdt, "linear bias"), name)
    elif kind == KIND_RESIDUAL:
        if depth >= _MAX_DEPTH:
            raise FormatError("residual nesting too deep", start)
        nb, ns = b.unpack("<II", "residual meta")
        if nb + ns > length:
            raise FormatError("residual branch count exceeds record size", body_start)
        children = [_decode_record(b, fdt, depth + 1) for _ in range(nb + ns)]
        layer = ResidualSpec(children[:nb], children[nb:])
    elif kind in (KIND_RELU, KIND_MAXPOOL, KIND_GAP):
        layer = {KIND_RELU: ReLUSpec, KIND_MAXPOOL: MaxPoolSpec, KIND_GAP: GapSpec}[kind]()
    else:
        raise FormatError(f"unknown layer kind {kind}", start)
    if b.pos != b.end:
        raise FormatError(f"{b.end - b.pos} unexpected trailing bytes in record", b.pos)
    return layer


def loads(buf: bytes) -> StripeModel:
    r = _Reader(buf)
    head = r.take(_HEADER.size, "header")
    magic, version, width, _, c, h, w, classes, count = _HEADER.unpack(head)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    crc, = r.unpack("<I", "header checksum")
    if zlib.crc32(head) != crc:
        raise IntegrityError("header checksum mismatch", 0)
    if width not in _FLOATS:
        raise FormatError(f"unsupported float width {width}", 6)
    if min(c, h, w, classes) < 1:
        raise FormatError("model input shape and class count must be positive", 8)
    if count > len(buf):
        raise FormatError(f"layer count {count} exceeds file size", 24)
    layers = [_decode_record(r, _FLOATS[width], 0) for _ in range(count)]
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after last layer", r.pos)
    return StripeModel(layers, (c, h, w), classes)


def load_model(path: str | Path) -> StripeModel:
    return loads(Path(path).read_bytes())
