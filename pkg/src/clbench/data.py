"""Image datasets, the LLCB container format, and synthetic blob streams.

LLCB layout (little-endian)::

    0   4s   magic "LLCB"
    4   u16  version (1)
    6   u64  sample count N
    14  u16  channels, height, width
    20  u16  class count
    22  N*C*H*W image bytes, then N label bytes
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, CorruptionError, DataError, FormatError, ProtocolViolation
from .rng import as_generator, seed_rng

logger = logging.getLogger(__name__)

MAGIC = b"LLCB"
VERSION = 1
HEADER = struct.Struct("<4sHQHHHH")
SPLITS = ("train", "val", "test")


@dataclass(eq=False)
class ImageDataset:
    images: np.ndarray  # uint8, (N, C, H, W)
    labels: np.ndarray  # uint8, (N,)
    split: str = "train"
    name: str = "dataset"
    class_count: Optional[int] = None

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.uint8)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8).reshape(-1)
        if self.class_count is None:
            self.class_count = int(self.labels.max()) + 1 if self.labels.size else 0
        self._float = None

    def __len__(self):
        return int(self.labels.shape[0])

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def __eq__(self, other):
        if not isinstance(other, ImageDataset):
            return NotImplemented
        return (self.class_count == other.class_count and self.images.shape == other.images.shape
                and np.array_equal(self.images, other.images) and np.array_equal(self.labels, other.labels))

    def validate(self) -> None:
        if self.images.ndim != 4:
            raise DataError(f"{self.name}/{self.split}: images must be N x C x H x W, got {self.images.shape}")
        if len(self) == 0:
            raise DataError(f"{self.name}/{self.split}: dataset is empty")
        if self.images.shape[0] != len(self):
            raise DataError(f"{self.name}/{self.split}: {self.images.shape[0]} images but {len(self)} labels")
        if int(self.labels.max()) >= self.class_count:
            raise DataError(f"{self.name}/{self.split}: label {int(self.labels.max())} >= class count {self.class_count}")
        if self.split == "train":
            missing = sorted(set(range(self.class_count)) - set(np.unique(self.labels).tolist()))
            if missing:
                raise DataError(f"{self.name}/train: classes {missing} have no training samples")

    def normalized(self) -> np.ndarray:
        if self._float is None:
            self._float = to_float_normalized(self)
        return self._float


@dataclass
class DataSplits:
    train: ImageDataset
    val: ImageDataset
    test: ImageDataset

    def __iter__(self):
        return iter((self.train, self.val, self.test))

    @property
    def name(self) -> str:
        return self.train.name

    @property
    def class_count(self) -> int:
        return self.train.class_count


def to_float_normalized(ds: Union[ImageDataset, np.ndarray]) -> np.ndarray:
    """Map 0..255 to [-1, 1]: ``(x/255 - 0.5) / 0.5``."""
    images = ds.images if isinstance(ds, ImageDataset) else np.asarray(ds)
    return (images.astype(np.float64) / 255.0 - 0.5) / 0.5


def write_container(ds: ImageDataset, path) -> None:
    ds.validate()
    n, c, h, w = ds.images.shape
    if ds.class_count > 256:
        raise DataError(f"{ds.name}: {ds.class_count} classes do not fit 8-bit labels")
    header = HEADER.pack(MAGIC, VERSION, n, c, h, w, ds.class_count)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(ds.images.tobytes(order="C"))
        fh.write(ds.labels.tobytes())


def _infer_name_split(path: Path) -> Tuple[str, str]:
    stem = path.stem
    for split in SPLITS:
        if stem.endswith("_" + split):
            return stem[: -len(split) - 1], split
    return stem, "train"


def read_container(path, name: Optional[str] = None, split: Optional[str] = None) -> ImageDataset:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < HEADER.size:
        raise CorruptionError(f"{path}: truncated header", offset=len(raw))
    magic, version, n, c, h, w, k = HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    img_bytes = n * c * h * w
    expected = HEADER.size + img_bytes + n
    if len(raw) < expected:
        raise CorruptionError(f"{path}: payload truncated, expected {expected} bytes, found {len(raw)}",
                              offset=len(raw))
    if len(raw) > expected:
        raise CorruptionError(f"{path}: {len(raw) - expected} trailing bytes after payload", offset=expected)
    images = np.frombuffer(raw, dtype=np.uint8, count=img_bytes, offset=HEADER.size).reshape(n, c, h, w)
    labels = np.frombuffer(raw, dtype=np.uint8, count=n, offset=HEADER.size + img_bytes)
    inferred_name, inferred_split = _infer_name_split(path)
    ds = ImageDataset(images.copy(), labels.copy(), split or inferred_split, name or inferred_name, k)
    ds.validate()
    return ds


def read_header(path) -> dict:
    raw = Path(path).read_bytes()[: HEADER.size]
    if len(raw) < HEADER.size:
        raise CorruptionError(f"{path}: truncated header", offset=len(raw))
    magic, version, n, c, h, w, k = HEADER.unpack(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    return {"magic": magic.decode("ascii", "replace"), "version": version, "samples": n,
            "channels": c, "height": h, "width": w, "classes": k}


def load_splits(directory, name: str) -> DataSplits:
    directory = Path(directory)
    return DataSplits(*(read_container(directory / f"{name}_{s}.llcb", name, s) for s in SPLITS))


@dataclass
class SynthConfig:
    classes: int = 8
    train_per_class: int = 100
    val_per_class: int = 20
    test_per_class: int = 50
    image_shape: Tuple[int, int, int] = (1, 8, 8)
    sigma: float = 12.0
    seed: int = 0
    centers: Optional[np.ndarray] = None  # (classes, C, H, W) in pixel space
    name: str = "synth"

    def resolved_centers(self) -> np.ndarray:
        if self.centers is not None:
            centers = np.asarray(self.centers, dtype=np.float64)
            if centers.shape != (self.classes,) + tuple(self.image_shape):
                raise ConfigError(f"centers shape {centers.shape} does not match "
                                  f"{(self.classes,) + tuple(self.image_shape)}")
        else:
            rng = seed_rng(self.seed, "synth", 0)
            centers = rng.integers(16, 240, size=(self.classes,) + tuple(self.image_shape)).astype(np.float64)
        flat = centers.reshape(self.classes, -1)
        for i in range(self.classes):
            for j in range(i + 1, self.classes):
                if np.array_equal(flat[i], flat[j]):
                    raise ConfigError(f"synthetic classes {i} and {j} share the same center")
        return centers


def gen_synthetic_tasks(cfg: SynthConfig) -> DataSplits:
    """Gaussian blobs around one center image per class, clipped to 0..255."""
    if cfg.classes < 1 or cfg.classes > 256:
        raise ConfigError(f"classes must be in 1..256, got {cfg.classes}")
    if not cfg.sigma > 0:
        raise ConfigError(f"sigma must be positive, got {cfg.sigma}")
    centers = cfg.resolved_centers()
    out = []
    for k, (split, per_class) in enumerate(zip(SPLITS, (cfg.train_per_class, cfg.val_per_class, cfg.test_per_class))):
        if per_class < 1:
            raise ConfigError(f"{split}: samples per class must be >= 1")
        rng = seed_rng(cfg.seed, "synth", k + 1)
        labels = np.repeat(np.arange(cfg.classes), per_class)
        noise = rng.standard_normal((labels.size,) + tuple(cfg.image_shape)) * cfg.sigma
        images = np.clip(np.rint(centers[labels] + noise), 0, 255).astype(np.uint8)
        order = rng.permutation(labels.size)
        out.append(ImageDataset(images[order], labels[order], split, cfg.name, cfg.classes))
    return DataSplits(*out)


def batch_iter(n_or_indices, batch_size: int, rng=None, shuffle: bool = True) -> Iterator[np.ndarray]:
    """One epoch of index batches; the final partial batch is kept."""
    if batch_size < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch_size}")
    if isinstance(n_or_indices, (int, np.integer)):
        indices = np.arange(int(n_or_indices))
    elif isinstance(n_or_indices, ImageDataset):
        indices = np.arange(len(n_or_indices))
    else:
        indices = np.asarray(n_or_indices, dtype=np.int64)
    if shuffle:
        if rng is None:
            raise ConfigError("shuffling requires a seed or generator")
        indices = indices[as_generator(rng).permutation(indices.size)]
    for start in range(0, indices.size, batch_size):
        yield indices[start:start + batch_size]


class AccessGuard:
    """Counts reads per sample and rejects reads outside the allowed set."""

    def __init__(self, ds: ImageDataset):
        self.ds = ds
        self.counts = np.zeros(len(ds), dtype=np.int64)
        self.allowed: Optional[np.ndarray] = np.zeros(len(ds), dtype=bool)
        self.violations = 0

    def allow(self, indices: Optional[Sequence[int]]) -> None:
        """Replace the allowed set; ``None`` allows everything."""
        if indices is None:
            self.allowed = None
            return
        self.allowed = np.zeros(len(self.ds), dtype=bool)
        self.allowed[np.asarray(indices, dtype=np.int64)] = True

    def _check(self, indices: np.ndarray) -> None:
        if self.allowed is not None and not np.all(self.allowed[indices]):
            self.violations += 1
            bad = indices[~self.allowed[indices]]
            raise ProtocolViolation(f"{self.ds.name}/{self.ds.split}: out-of-contract access to "
                                    f"{bad.size} samples (first {int(bad[0])})")

    def fetch(self, indices) -> Tuple[np.ndarray, np.ndarray]:
        indices = np.asarray(indices, dtype=np.int64)
        self._check(indices)
        np.add.at(self.counts, indices, 1)
        return self.ds.normalized()[indices], self.ds.labels[indices].astype(np.int64)

    def labels(self, indices) -> np.ndarray:
        """Label lookup for bookkeeping; access-checked but not counted as a read."""
        indices = np.asarray(indices, dtype=np.int64)
        self._check(indices)
        return self.ds.labels[indices].astype(np.int64)
