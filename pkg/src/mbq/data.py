"""Dataset ingestion (MNIST IDX, CIFAR-10 binary, Gaussian blobs) and batching."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


class FormatError(ValueError):
    """Malformed dataset file; ``offset`` is the byte position at fault."""

    def __init__(self, path, offset: int, reason: str):
        super().__init__(f"{path}: {reason} (byte offset {offset})")
        self.path = str(path)
        self.offset = offset


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] (or [N, D] for vector data), float32
    labels: np.ndarray  # [N] int64
    num_classes: int
    split: str = "train"
    mean: Optional[np.ndarray] = None  # per-channel normalisation stats
    std: Optional[np.ndarray] = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def sample_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return replace(self, images=self.images[idx], labels=self.labels[idx])


def _open(path):
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(2)
    if head == b"\x1f\x8b":
        with gzip.open(path, "rb") as f:
            return f.read()
    return path.read_bytes()


def _parse_idx(path, expected_magic: int, ndims: int) -> np.ndarray:
    raw = _open(path)
    if len(raw) < 4:
        raise FormatError(path, len(raw), "file shorter than the IDX magic")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(path, 0, f"magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    header_end = 4 + 4 * ndims
    if len(raw) < header_end:
        raise FormatError(path, len(raw), "truncated dimension header")
    dims = struct.unpack(f">{ndims}I", raw[4:header_end])
    need = int(np.prod(dims))
    have = len(raw) - header_end
    if have < need:
        raise FormatError(path, len(raw), f"payload truncated: {have} of {need} bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=header_end).reshape(dims)


def load_mnist_idx(images_path, labels_path, split: str = "train") -> Dataset:
    """Read an IDX image/label pair (optionally gzipped); pixels scaled by 1/255."""
    images = _parse_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _parse_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(labels_path, 4, f"{labels.shape[0]} labels for {images.shape[0]} images")
    x = images.astype(np.float32)[:, None] / np.float32(255.0)
    return Dataset(x, labels.astype(np.int64), 10, split)


def write_mnist_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Inverse of :func:`load_mnist_idx` for uint8 ``images`` of shape [N, H, W]."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, h, w = images.shape
    _write_maybe_gz(images_path, struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + images.tobytes())
    _write_maybe_gz(labels_path, struct.pack(">II", IDX_LABELS_MAGIC, n) + labels.tobytes())


def _write_maybe_gz(path, payload: bytes) -> None:
    if str(path).endswith(".gz"):
        payload = gzip.compress(payload, mtime=0)
    Path(path).write_bytes(payload)


def load_cifar10_bin(paths: Sequence, split: str = "train") -> Dataset:
    """Concatenate CIFAR-10 binary batches (1 label byte + 3072 CHW pixel bytes)."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    xs, ys = [], []
    for path in paths:
        raw = _open(path)
        if len(raw) % CIFAR_RECORD:
            raise FormatError(
                path, len(raw) - len(raw) % CIFAR_RECORD,
                f"length {len(raw)} is not a multiple of {CIFAR_RECORD}",
            )
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        ys.append(rec[:, 0].astype(np.int64))
        xs.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    x = np.concatenate(xs).astype(np.float32) / np.float32(255.0)
    return Dataset(x, np.concatenate(ys), 10, split)


def simplex_centers(k: int, d: int, separation: float) -> np.ndarray:
    """``k`` points in R^d with every pairwise distance equal to ``separation``."""
    if k - 1 > d:
        raise ValueError(f"cannot place {k} equidistant centers in {d} dimensions")
    verts = np.eye(k) - 1.0 / k  # pairwise distance sqrt(2), spans k-1 dims
    basis, _ = np.linalg.qr(verts.T)
    coords = verts @ basis[:, : k - 1]
    out = np.zeros((k, d))
    out[:, : k - 1] = coords * (separation / np.sqrt(2.0))
    return out


def synth_blobs(
    n: int, d: int, k: int, separation: float, seed: int = 0, split: str = "train"
) -> Dataset:
    """Unit-covariance Gaussian clusters with equidistant centers."""
    if k < 2 or d < 2:
        raise ValueError("synth_blobs needs k >= 2 and d >= 2")
    rng = np.random.default_rng(seed)
    centers = simplex_centers(k, d, separation)
    labels = np.arange(n) % k
    labels = labels[rng.permutation(n)]
    x = centers[labels] + rng.standard_normal((n, d))
    return Dataset(x.astype(np.float32), labels, k, split)


# ---------------------------------------------------------------------------
# normalisation and batching
# ---------------------------------------------------------------------------


def channel_stats(ds: Dataset) -> tuple:
    axes = (0,) + tuple(range(2, ds.images.ndim))
    mean = ds.images.mean(axis=axes, dtype=np.float64)
    std = ds.images.std(axis=axes, dtype=np.float64)
    std = np.where(std > 0, std, 1.0)
    return mean.astype(np.float32), std.astype(np.float32)


def _bshape(ds: Dataset) -> tuple:
    return (1, -1) + (1,) * (ds.images.ndim - 2)


def normalize(ds: Dataset, mean=None, std=None) -> Dataset:
    """Per-channel standardisation; pass the training split's stats for test data."""
    if mean is None or std is None:
        mean, std = channel_stats(ds)
    mean = np.asarray(mean, dtype=np.float32)
    std = np.asarray(std, dtype=np.float32)
    x = (ds.images - mean.reshape(_bshape(ds))) / std.reshape(_bshape(ds))
    return replace(ds, images=x, mean=mean, std=std)


def denormalize(ds: Dataset) -> Dataset:
    if ds.mean is None:
        return ds
    x = ds.images * ds.std.reshape(_bshape(ds)) + ds.mean.reshape(_bshape(ds))
    return replace(ds, images=x, mean=None, std=None)


def stream_rng(seed: int, epoch: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(epoch), int(stream)])


def epoch_batches(
    indices: np.ndarray, batch_size: int, rng: Optional[np.random.Generator]
) -> list:
    """Shuffle ``indices`` (if ``rng``) and cut into consecutive batches."""
    idx = np.asarray(indices, dtype=np.int64)
    if rng is not None:
        idx = idx[rng.permutation(idx.size)]
    return [idx[i : i + batch_size] for i in range(0, idx.size, batch_size)]


def augment_batch(x: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random crop (zero padding ``pad``) and horizontal flip for NCHW batches."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(x)
    dy = rng.integers(0, 2 * pad + 1, n)
    dx = rng.integers(0, 2 * pad + 1, n)
    flip = rng.random(n) < 0.5
    for i in range(n):
        crop = xp[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out


def iterate(ds: Dataset, batch_size: int, indices=None) -> Iterator[tuple]:
    """Ordered (unshuffled) batches of ``(index, images, labels)``."""
    idx = np.arange(len(ds)) if indices is None else np.asarray(indices)
    for batch in epoch_batches(idx, batch_size, None):
        yield batch, ds.images[batch], ds.labels[batch]
