"""MNIST-style IDX ingestion, stratified subsampling and mini-batching.

IDX layout (all header integers big-endian)::

    u8 0, u8 0, u8 0x08 (unsigned byte payload), u8 rank
    u32 size[0] ... u32 size[rank-1]
    payload: prod(size) bytes, row-major

Datasets are read from ``<root>/{train,test}-{images,labels}.idx``; the
original distribution names (``train-images-idx3-ubyte`` ...) are accepted
as a fallback.
"""
from __future__ import annotations

import enum
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import DTYPE, DomainError, Rng

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
_UBYTE = 0x08


class IdxError(ValueError):
    """Malformed IDX content; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxTrailingBytesError(IdxError):
    pass


class EmptyClassError(ValueError):
    pass


def parse_idx(buf: bytes, expect_rank: int | None = None) -> np.ndarray:
    """Decode an unsigned-byte IDX file into a uint8 array of its declared shape."""
    buf = bytes(buf)
    if len(buf) < 4:
        raise IdxTruncatedError(f"need 4 magic bytes, file has {len(buf)}", len(buf))
    (magic,) = struct.unpack(">I", buf[:4])
    rank = magic & 0xFF
    if magic >> 8 != _UBYTE or rank == 0:
        raise IdxMagicError(f"unsupported IDX magic 0x{magic:08x}", 0)
    if expect_rank is not None and rank != expect_rank:
        raise IdxMagicError(f"magic 0x{magic:08x} declares rank {rank}, expected rank {expect_rank}", 0)
    header_end = 4 + 4 * rank
    if len(buf) < header_end:
        raise IdxTruncatedError(
            f"magic 0x{magic:08x} declares a rank-{rank} file needing {rank} dimension sizes; "
            f"header is cut short ({len(buf)} of {header_end} header bytes)",
            len(buf),
        )
    dims = struct.unpack(f">{rank}I", buf[4:header_end])
    n = int(np.prod(dims, dtype=np.int64))
    end = header_end + n
    if len(buf) < end:
        raise IdxTruncatedError(
            f"rank-{rank} shape {dims} needs {n} payload bytes, found {len(buf) - header_end}", len(buf)
        )
    if len(buf) > end:
        raise IdxTrailingBytesError(f"{len(buf) - end} unexpected bytes after the payload of shape {dims}", end)
    return np.frombuffer(buf, dtype=np.uint8, count=n, offset=header_end).reshape(dims).copy()


def serialize_idx(array) -> bytes:
    a = np.asarray(array)
    if a.dtype != np.uint8:
        raise DomainError(f"only uint8 arrays can be written as IDX, got {a.dtype}")
    if a.ndim == 0 or a.ndim > 255:
        raise DomainError(f"IDX rank must be 1..255, got {a.ndim}")
    header = struct.pack(">I", (_UBYTE << 8) | a.ndim) + struct.pack(f">{a.ndim}I", *a.shape)
    return header + np.ascontiguousarray(a).tobytes()


class Split(str, enum.Enum):
    TRAIN = "train"
    TEST = "test"


@dataclass
class Dataset:
    images: np.ndarray  # (n, 1, H, W) float64 in [0, 1]
    labels: np.ndarray  # (n,) int64
    split: Split = Split.TRAIN

    def __post_init__(self):
        self.split = Split(self.split)
        if len(self.images) != len(self.labels):
            raise DomainError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.split)

    @classmethod
    def from_uint8(cls, pixels, labels, split=Split.TRAIN):
        pixels = np.asarray(pixels, dtype=np.uint8)
        images = (pixels.astype(DTYPE) / 255.0)[:, None, :, :]
        return cls(images, np.asarray(labels, dtype=np.int64), split)


def normalize_pixels(pixels) -> np.ndarray:
    return np.asarray(pixels, dtype=np.uint8).astype(DTYPE) / 255.0


_NAMES = {
    ("train", "images"): ("train-images.idx", "train-images-idx3-ubyte"),
    ("train", "labels"): ("train-labels.idx", "train-labels-idx1-ubyte"),
    ("test", "images"): ("test-images.idx", "t10k-images-idx3-ubyte"),
    ("test", "labels"): ("test-labels.idx", "t10k-labels-idx1-ubyte"),
}

DATA_ROOT_ENV = "STOCHBRANCH_DATA"


def resolve_root(root=None) -> Path:
    root = root or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise FileNotFoundError(f"no dataset root given and ${DATA_ROOT_ENV} is not set")
    return Path(root)


def _find(root: Path, split: str, what: str) -> Path:
    for name in _NAMES[(split, what)]:
        if (root / name).is_file():
            return root / name
    raise FileNotFoundError(f"missing {split} {what} file under {root} (expected {_NAMES[(split, what)][0]})")


def load_split(root, split: Split | str) -> Dataset:
    split = Split(split)
    root = resolve_root(root)
    pixels = parse_idx(_find(root, split.value, "images").read_bytes(), expect_rank=3)
    labels = parse_idx(_find(root, split.value, "labels").read_bytes(), expect_rank=1)
    if len(pixels) != len(labels):
        raise DomainError(f"{split.value}: {len(pixels)} images but {len(labels)} labels")
    return Dataset.from_uint8(pixels, labels, split)


def write_split(root, split: Split | str, pixels, labels):
    """Write a split in the layout :func:`load_split` reads."""
    split = Split(split)
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / f"{split.value}-images.idx").write_bytes(serialize_idx(np.asarray(pixels, dtype=np.uint8)))
    (root / f"{split.value}-labels.idx").write_bytes(serialize_idx(np.asarray(labels, dtype=np.uint8)))


def stratified_indices(labels, fraction: float, rng: Rng) -> np.ndarray:
    if not 0.0 < fraction <= 1.0:
        raise DomainError(f"fraction must be in (0, 1], got {fraction}")
    labels = np.asarray(labels)
    picked = []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        k = int(round(fraction * len(members)))
        if k == 0:
            raise EmptyClassError(f"fraction {fraction} keeps no examples of class {c} ({len(members)} available)")
        picked.append(members[rng.fork(f"class-{c}").permutation(len(members))[:k]])
    return np.sort(np.concatenate(picked))


def stratified_subsample(ds: Dataset, fraction: float, rng: Rng) -> Dataset:
    """Per class, ``round(fraction * count)`` examples drawn without replacement.

    The selection keeps storage order.
    """
    return ds.subset(stratified_indices(ds.labels, fraction, rng))


def batches(ds: Dataset, batch_size: int, rng: Rng | None = None, shuffle: bool | None = None):
    """Yield ``(x, labels)`` mini-batches; the last batch may be short.

    Train splits are shuffled with ``rng`` unless ``shuffle=False``; test
    splits keep storage order.
    """
    if batch_size < 1:
        raise DomainError(f"batch_size must be >= 1, got {batch_size}")
    if shuffle is None:
        shuffle = ds.split is Split.TRAIN
    order = rng.permutation(len(ds)) if shuffle else np.arange(len(ds))
    for i in range(0, len(ds), batch_size):
        idx = order[i : i + batch_size]
        yield ds.images[idx], ds.labels[idx]
