"""Embedding dataset container, binary file format, splits, synthetic data.

The on-disk format ("SEMB", little-endian throughout):

    magic           4 bytes ASCII "SEMB"
    version         u32 = 1
    dim             u32
    image_height    u32
    image_width     u32
    image_channels  u32
    class_count     u32
    per class       name_len u16 + UTF-8 bytes
    record_count    u32
    per record      image_id u32, label u32, dim * f32
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable

import numpy as np

from .streams import make_rng, stream_id

MAGIC = b"SEMB"
FORMAT_VERSION = 1
_U32_MAX = 2**32 - 1


class DatasetError(Exception):
    """Base class for dataset validation and format failures."""


class BadMagicError(DatasetError):
    """File does not start with the SEMB magic bytes."""


class UnsupportedVersionError(DatasetError):
    """File carries a format version this code does not read."""


class TruncatedFileError(DatasetError):
    """File ended before the declared payload was complete."""


class LabelOutOfRangeError(DatasetError):
    """A record label is not a valid index into class_names."""


class InvalidDatasetError(DatasetError):
    """Dataset violates a structural invariant (shape, finiteness, ids)."""


@dataclass
class EmbeddingRecord:
    image_id: int
    label: int
    vector: np.ndarray


@dataclass(eq=False)
class EmbeddingDataset:
    """Immutable-by-convention set of labeled embeddings.

    Vectors live in one float32 (N, dim) array; image_ids and labels are
    parallel int64 arrays. Treat instances as read-only after creation.
    """

    dim: int
    image_height: int
    image_width: int
    image_channels: int
    class_names: list[str]
    image_ids: np.ndarray
    labels: np.ndarray
    vectors: np.ndarray

    def __post_init__(self):
        self.image_ids = np.asarray(self.image_ids, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.vectors = np.asarray(self.vectors, dtype=np.float32).reshape(-1, self.dim)

    @property
    def n_records(self) -> int:
        return len(self.image_ids)

    def record(self, i: int) -> EmbeddingRecord:
        return EmbeddingRecord(int(self.image_ids[i]), int(self.labels[i]), self.vectors[i])

    def records(self) -> Iterable[EmbeddingRecord]:
        return (self.record(i) for i in range(self.n_records))

    @classmethod
    def from_records(
        cls,
        dim: int,
        class_names: list[str],
        records: Iterable[EmbeddingRecord],
        image_height: int = 32,
        image_width: int = 32,
        image_channels: int = 3,
    ) -> "EmbeddingDataset":
        recs = list(records)
        ids = np.array([r.image_id for r in recs], dtype=np.int64)
        labels = np.array([r.label for r in recs], dtype=np.int64)
        if recs:
            vectors = np.stack([np.asarray(r.vector, dtype=np.float32) for r in recs])
        else:
            vectors = np.zeros((0, dim), dtype=np.float32)
        ds = cls(dim, image_height, image_width, image_channels, list(class_names), ids, labels, vectors)
        ds.validate()
        return ds

    def validate(self) -> None:
        if self.dim <= 0:
            raise InvalidDatasetError(f"dim must be positive, got {self.dim}")
        for name, value in (
            ("image_height", self.image_height),
            ("image_width", self.image_width),
            ("image_channels", self.image_channels),
        ):
            if value <= 0:
                raise InvalidDatasetError(f"{name} must be positive, got {value}")
        n = self.n_records
        if len(self.labels) != n or self.vectors.shape != (n, self.dim):
            raise InvalidDatasetError("image_ids, labels and vectors disagree on record count")
        if n and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise LabelOutOfRangeError(
                f"labels must lie in [0, {len(self.class_names)}), got range "
                f"[{self.labels.min()}, {self.labels.max()}]"
            )
        if len(np.unique(self.image_ids)) != n:
            raise InvalidDatasetError("image_ids are not unique")
        if n and (self.image_ids.min() < 0 or self.image_ids.max() > _U32_MAX):
            raise InvalidDatasetError("image_ids must fit in u32")
        if not np.all(np.isfinite(self.vectors)):
            raise InvalidDatasetError("vectors contain NaN or Inf")

    def subset(self, indices: np.ndarray) -> "EmbeddingDataset":
        """New dataset holding the given rows, in ascending image_id order."""
        indices = np.asarray(indices, dtype=np.int64)
        order = indices[np.argsort(self.image_ids[indices], kind="stable")]
        return EmbeddingDataset(
            self.dim,
            self.image_height,
            self.image_width,
            self.image_channels,
            list(self.class_names),
            self.image_ids[order].copy(),
            self.labels[order].copy(),
            self.vectors[order].copy(),
        )

    def indices_by_class(self) -> dict[int, np.ndarray]:
        """Positional indices per class, each sorted by image_id."""
        out = {}
        for c in range(len(self.class_names)):
            idx = np.nonzero(self.labels == c)[0]
            out[c] = idx[np.argsort(self.image_ids[idx], kind="stable")]
        return out

    def equals(self, other: "EmbeddingDataset") -> bool:
        """Field-for-field equality with bit-exact vectors."""
        return (
            self.dim == other.dim
            and self.image_height == other.image_height
            and self.image_width == other.image_width
            and self.image_channels == other.image_channels
            and self.class_names == other.class_names
            and np.array_equal(self.image_ids, other.image_ids)
            and np.array_equal(self.labels, other.labels)
            and self.vectors.tobytes() == other.vectors.tobytes()
        )


@dataclass
class SplitSpec:
    seed: int
    train_fraction: float

    def __post_init__(self):
        if not (0.0 < self.train_fraction < 1.0):
            raise ValueError(f"train_fraction must lie strictly in (0, 1), got {self.train_fraction}")


def _record_dtype(dim: int) -> np.dtype:
    return np.dtype([("image_id", "<u4"), ("label", "<u4"), ("vector", "<f4", (dim,))])


def save_dataset(dataset: EmbeddingDataset, destination: str | Path | BinaryIO) -> None:
    """Serialize to the SEMB format; byte-for-byte deterministic."""
    dataset.validate()
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack(
        "<6I",
        FORMAT_VERSION,
        dataset.dim,
        dataset.image_height,
        dataset.image_width,
        dataset.image_channels,
        len(dataset.class_names),
    )
    for name in dataset.class_names:
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise InvalidDatasetError(f"class name too long for u16 length: {name!r}")
        buf += struct.pack("<H", len(encoded))
        buf += encoded
    buf += struct.pack("<I", dataset.n_records)
    recs = np.empty(dataset.n_records, dtype=_record_dtype(dataset.dim))
    recs["image_id"] = dataset.image_ids
    recs["label"] = dataset.labels
    recs["vector"] = dataset.vectors
    buf += recs.tobytes()
    if hasattr(destination, "write"):
        destination.write(bytes(buf))
    else:
        Path(destination).write_bytes(bytes(buf))


def load_dataset(source: str | Path | BinaryIO) -> EmbeddingDataset:
    """Parse a SEMB file, raising a distinct error per failure mode."""
    if hasattr(source, "read"):
        data = source.read()
    else:
        data = Path(source).read_bytes()

    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise TruncatedFileError(f"file ended inside {what} (need {n} bytes at offset {pos})")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise BadMagicError("not a SEMB file (bad magic bytes)")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported format version {version}")
    dim, height, width, channels, class_count = struct.unpack("<5I", take(20, "header"))
    class_names = []
    for i in range(class_count):
        (name_len,) = struct.unpack("<H", take(2, f"class name {i} length"))
        class_names.append(take(name_len, f"class name {i}").decode("utf-8"))
    (record_count,) = struct.unpack("<I", take(4, "record count"))
    if dim == 0:
        raise InvalidDatasetError("dim must be positive")
    rec_dtype = _record_dtype(dim)
    payload = take(record_count * rec_dtype.itemsize, "records")
    if pos != len(data):
        raise InvalidDatasetError(f"{len(data) - pos} unexpected trailing bytes")
    recs = np.frombuffer(payload, dtype=rec_dtype)
    dataset = EmbeddingDataset(
        dim,
        height,
        width,
        channels,
        class_names,
        recs["image_id"].astype(np.int64),
        recs["label"].astype(np.int64),
        recs["vector"].astype(np.float32).reshape(-1, dim),
    )
    dataset.validate()
    return dataset


def _floor_count(fraction: float, n: int) -> int:
    # the 1e-9 nudge undoes float artifacts like 0.7 * 10 == 6.999...996
    return int(math.floor(fraction * n + 1e-9))


def _check_min_class_size(by_class: dict[int, np.ndarray], minimum: int) -> None:
    for c, idx in by_class.items():
        if len(idx) < minimum:
            raise InvalidDatasetError(f"class {c} has {len(idx)} records, need at least {minimum}")


def split_train_val(dataset: EmbeddingDataset, spec: SplitSpec) -> tuple[EmbeddingDataset, EmbeddingDataset]:
    """Stratified split: floor(train_fraction * n_c) of each class to train.

    Deterministic given spec.seed; the two outputs partition the input.
    """
    by_class = dataset.indices_by_class()
    _check_min_class_size(by_class, 2)
    rng = make_rng(spec.seed, stream_id("split-train-val"))
    train_idx, val_idx = [], []
    for c in sorted(by_class):
        idx = by_class[c]
        perm = rng.permutation(len(idx))
        n_train = _floor_count(spec.train_fraction, len(idx))
        train_idx.append(idx[perm[:n_train]])
        val_idx.append(idx[perm[n_train:]])
    return dataset.subset(np.concatenate(train_idx)), dataset.subset(np.concatenate(val_idx))


def split_transmit_kb(dataset: EmbeddingDataset, seed: int) -> tuple[EmbeddingDataset, EmbeddingDataset]:
    """Halve each class: ceil(n_c/2) to the transmit set, floor(n_c/2) to the KB."""
    by_class = dataset.indices_by_class()
    _check_min_class_size(by_class, 2)
    rng = make_rng(seed, stream_id("split-transmit-kb"))
    tx_idx, kb_idx = [], []
    for c in sorted(by_class):
        idx = by_class[c]
        perm = rng.permutation(len(idx))
        n_tx = (len(idx) + 1) // 2
        tx_idx.append(idx[perm[:n_tx]])
        kb_idx.append(idx[perm[n_tx:]])
    return dataset.subset(np.concatenate(tx_idx)), dataset.subset(np.concatenate(kb_idx))


def generate_synthetic(
    num_classes: int,
    per_class: int,
    dim: int,
    intra_spread: float,
    seed: int,
    image_height: int = 32,
    image_width: int = 32,
    image_channels: int = 3,
) -> EmbeddingDataset:
    """Clustered embeddings: unit-norm class centroids plus isotropic noise.

    Centroids are uniform on the sphere (normalized Gaussians); each record
    is its class centroid plus N(0, intra_spread^2) per component.
    """
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    if per_class < 2:
        raise ValueError(f"per_class must be >= 2, got {per_class}")
    if dim < 2:
        raise ValueError(f"dim must be >= 2, got {dim}")
    if intra_spread < 0:
        raise ValueError(f"intra_spread must be nonnegative, got {intra_spread}")

    rng = make_rng(seed, stream_id("synthetic"))
    centroids = rng.standard_normal((num_classes, dim))
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
    noise = rng.standard_normal((num_classes * per_class, dim))
    vectors = np.repeat(centroids, per_class, axis=0) + intra_spread * noise
    labels = np.repeat(np.arange(num_classes), per_class)
    ids = np.arange(num_classes * per_class)
    class_names = [f"class_{c:03d}" for c in range(num_classes)]
    ds = EmbeddingDataset(
        dim,
        image_height,
        image_width,
        image_channels,
        class_names,
        ids,
        labels,
        vectors.astype(np.float32),
    )
    ds.validate()
    return ds
