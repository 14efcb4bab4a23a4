"""MNIST (IDX) and CIFAR-10 (binary batch) readers, normalization and augmentation."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073
CIFAR_TRAIN_RECORDS = 50000
CIFAR_TEST_RECORDS = 10000

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"

NORMALIZATION = {
    "mnist": ((0.1307,), (0.3081,)),
    "cifar10": ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
}


class FormatError(ValueError):
    """A data or model file does not follow its binary format."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        super().__init__(message if offset is None else f"{message} (at byte {offset})")


def _read_bytes(path: Path) -> bytes:
    path = Path(path)
    if not path.exists():
        gz = path.with_name(path.name + ".gz")
        if gz.exists():
            path = gz
        else:
            raise FileNotFoundError(f"missing data file: {path}")
    raw = path.read_bytes()
    return gzip.decompress(raw) if path.suffix == ".gz" else raw


def parse_idx(raw: bytes, expect_magic: int | None = None) -> np.ndarray:
    if len(raw) < 8:
        raise FormatError("IDX file shorter than its header", len(raw))
    magic, = struct.unpack(">I", raw[:4])
    if magic not in (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC):
        raise FormatError(f"bad IDX magic 0x{magic:08x}", 0)
    if expect_magic is not None and magic != expect_magic:
        raise FormatError(f"expected IDX magic 0x{expect_magic:08x}, got 0x{magic:08x}", 0)
    ndim = 3 if magic == IDX_IMAGES_MAGIC else 1
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError("IDX header truncated", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise FormatError(f"IDX payload has {len(raw) - header} bytes, dims {dims} need {count}", header)
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(path: str | Path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    if arr.ndim == 3:
        magic = IDX_IMAGES_MAGIC
    elif arr.ndim == 1:
        magic = IDX_LABELS_MAGIC
    else:
        raise ValueError("IDX writer handles image stacks (n, h, w) and label vectors only")
    Path(path).write_bytes(struct.pack(f">I{arr.ndim}I", magic, *arr.shape) + arr.tobytes())


def read_idx(path: str | Path, expect_magic: int | None = None) -> np.ndarray:
    return parse_idx(_read_bytes(Path(path)), expect_magic)


def parse_cifar(raw: bytes, expect_records: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    if len(raw) % CIFAR_RECORD:
        raise FormatError(f"CIFAR-10 file size {len(raw)} is not a multiple of {CIFAR_RECORD}",
                          len(raw) - len(raw) % CIFAR_RECORD)
    n = len(raw) // CIFAR_RECORD
    if expect_records is not None and n != expect_records:
        raise FormatError(f"expected {expect_records} CIFAR-10 records, found {n}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(n, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise FormatError(f"label {labels[bad]} out of range", bad * CIFAR_RECORD)
    return rec[:, 1:].reshape(n, 3, 32, 32), labels


def write_cifar(path: str | Path, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.ascontiguousarray(images, dtype=np.uint8).reshape(len(labels), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images], axis=1)
    Path(path).write_bytes(rec.tobytes())


@dataclass
class DatasetSource:
    kind: str
    directory: str | Path
    mean: tuple[float, ...] | None = None
    std: tuple[float, ...] | None = None
    crop_pad: int = 0
    hflip: bool = False
    downsample: int = 1
    strict_counts: bool = True

    def __post_init__(self):
        if self.kind not in NORMALIZATION:
            raise ValueError(f"unknown dataset {self.kind!r}; expected one of {sorted(NORMALIZATION)}")
        mean, std = NORMALIZATION[self.kind]
        self.mean = tuple(self.mean or mean)
        self.std = tuple(self.std or std)

    @classmethod
    def default(cls, kind: str, directory, downsample: int = 1) -> "DatasetSource":
        if kind == "cifar10":
            return cls(kind, directory, crop_pad=4, hflip=True, downsample=downsample)
        return cls(kind, directory, downsample=downsample)


@dataclass
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    @property
    def in_shape(self) -> tuple[int, int, int]:
        return tuple(self.train_x.shape[1:])

    @property
    def num_classes(self) -> int:
        return int(max(self.train_y.max(), self.test_y.max())) + 1


def _locate(directory: Path, name: str, subdirs: tuple[str, ...]) -> Path:
    for sub in ("",) + subdirs:
        cand = directory / sub / name
        if cand.exists() or cand.with_name(name + ".gz").exists():
            return cand
    return directory / name


def _load_raw(source: DatasetSource):
    d = Path(source.directory)
    if source.kind == "mnist":
        paths = {k: _locate(d, v, ("mnist", "MNIST/raw")) for k, v in MNIST_FILES.items()}
        xs = read_idx(paths["train_images"], IDX_IMAGES_MAGIC)[:, None]
        ys = read_idx(paths["train_labels"], IDX_LABELS_MAGIC).astype(np.int64)
        xt = read_idx(paths["test_images"], IDX_IMAGES_MAGIC)[:, None]
        yt = read_idx(paths["test_labels"], IDX_LABELS_MAGIC).astype(np.int64)
        if len(xs) != len(ys) or len(xt) != len(yt):
            raise FormatError(f"image/label record counts differ: train {len(xs)}/{len(ys)}, test {len(xt)}/{len(yt)}")
        return xs, ys, xt, yt
    subs = ("cifar-10-batches-bin", "cifar10")
    parts = [parse_cifar(_read_bytes(_locate(d, f, subs))) for f in CIFAR_TRAIN_FILES]
    xs = np.concatenate([p[0] for p in parts])
    ys = np.concatenate([p[1] for p in parts])
    xt, yt = parse_cifar(_read_bytes(_locate(d, CIFAR_TEST_FILE, subs)),
                         CIFAR_TEST_RECORDS if source.strict_counts else None)
    if source.strict_counts and len(xs) != CIFAR_TRAIN_RECORDS:
        raise FormatError(f"expected {CIFAR_TRAIN_RECORDS} CIFAR-10 training records, found {len(xs)}")
    return xs, ys, xt, yt


def downsample_mean(x: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return x
    b, c, h, w = x.shape
    h2, w2 = h // factor, w // factor
    x = x[:, :, :h2 * factor, :w2 * factor].reshape(b, c, h2, factor, w2, factor)
    return x.mean(axis=(3, 5))


def normalize(x_uint8: np.ndarray, source: DatasetSource) -> np.ndarray:
    x = downsample_mean(x_uint8.astype(np.float64) / 255.0, source.downsample)
    mean = np.asarray(source.mean)[None, :, None, None]
    std = np.asarray(source.std)[None, :, None, None]
    return (x - mean) / std


def load_dataset(source: DatasetSource) -> Dataset:
    xs, ys, xt, yt = _load_raw(source)
    return Dataset(normalize(xs, source), ys, normalize(xt, source), yt)


def augment(x: np.ndarray, rng: np.random.Generator, crop_pad: int = 0, hflip: bool = False) -> np.ndarray:
    """Random pad-and-crop plus horizontal flip, one draw per image in batch order."""
    if not crop_pad and not hflip:
        return x
    b, c, h, w = x.shape
    out = np.empty_like(x)
    padded = np.pad(x, ((0, 0), (0, 0), (crop_pad, crop_pad), (crop_pad, crop_pad))) if crop_pad else x
    offs = rng.integers(0, 2 * crop_pad + 1, size=(b, 2)) if crop_pad else np.zeros((b, 2), dtype=int)
    flips = rng.random(b) < 0.5 if hflip else np.zeros(b, dtype=bool)
    for n in range(b):
        dy, dx = offs[n]
        img = padded[n, :, dy:dy + h, dx:dx + w]
        out[n] = img[:, :, ::-1] if flips[n] else img
    return out


def batches(n: int, batch_size: int, rng: np.random.Generator | None = None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]
