#!/usr/bin/env python3
"""Extract CLIP image embeddings for CIFAR100 into SEMB embedding files.

One-shot companion tool for the semlink simulator. Downloads CIFAR100,
runs every image through the CLIP image tower (ViT-B/32, 512-dim output),
and writes the embeddings in the binary format the simulator loads:

    magic "SEMB", version u32=1, dim u32, image height/width/channels u32,
    class count u32, class names (u16 length + UTF-8), record count u32,
    then per record: image_id u32, label u32, dim * f32. Little-endian.

image_id is the dataset index; inference runs in eval mode with no
augmentation, so re-extraction reproduces the file up to framework
nondeterminism. Files are written atomically (temp file + rename).

Usage:
    extract_clip.py --split {train,test} --out <path> [--normalize]
                    [--batch-size N] [--model NAME] [--device DEV]
"""

from __future__ import annotations

import argparse
import os
import struct
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"SEMB"
FORMAT_VERSION = 1
EMBED_DIM = 512
IMAGE_HEIGHT, IMAGE_WIDTH, IMAGE_CHANNELS = 32, 32, 3
DEFAULT_MODEL = "openai/clip-vit-base-patch32"
CIFAR_CLASS_COUNT = 100


class ExtractionError(RuntimeError):
    pass


class ModelUnavailableError(ExtractionError):
    pass


class DatasetUnavailableError(ExtractionError):
    pass


class VerificationError(ExtractionError):
    pass


@dataclass
class ExtractorConfig:
    split: str = "train"
    output: str = "cifar100_embeddings.semb"
    model_name: str = DEFAULT_MODEL
    batch_size: int = 256
    device: str | None = None
    normalize: bool = False
    data_root: str = "./cifar100-data"

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


# ---------------------------------------------------------------------------
# SEMB writing / parsing
# ---------------------------------------------------------------------------

def write_semb(
    path: str | Path,
    class_names: list[str],
    vectors: np.ndarray,
    labels: np.ndarray,
    image_ids: np.ndarray,
) -> None:
    """Serialize embeddings; atomic via temp file + rename."""
    vectors = np.asarray(vectors, dtype="<f4")
    labels = np.asarray(labels)
    image_ids = np.asarray(image_ids)
    n, dim = vectors.shape
    if len(labels) != n or len(image_ids) != n:
        raise ExtractionError("vectors, labels and image_ids disagree on length")
    if not np.all(np.isfinite(vectors)):
        raise ExtractionError("embeddings contain NaN or Inf")
    if labels.min(initial=0) < 0 or (n and labels.max() >= len(class_names)):
        raise ExtractionError("labels fall outside the class list")

    blob = bytearray()
    blob += MAGIC
    blob += struct.pack(
        "<6I", FORMAT_VERSION, dim, IMAGE_HEIGHT, IMAGE_WIDTH, IMAGE_CHANNELS, len(class_names)
    )
    for name in class_names:
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded)) + encoded
    blob += struct.pack("<I", n)
    records = np.empty(
        n, dtype=np.dtype([("image_id", "<u4"), ("label", "<u4"), ("vector", "<f4", (dim,))])
    )
    records["image_id"] = image_ids
    records["label"] = labels
    records["vector"] = vectors
    blob += records.tobytes()

    path = Path(path)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent or Path("."), suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(bytes(blob))
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def parse_semb(path: str | Path) -> dict:
    """Read a SEMB file back into arrays, checking structure as it goes."""
    data = Path(path).read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise VerificationError(f"file ended inside {what}")
        piece = data[pos : pos + n]
        pos += n
        return piece

    if take(4, "magic") != MAGIC:
        raise VerificationError("bad magic bytes")
    version, dim, height, width, channels, class_count = struct.unpack("<6I", take(24, "header"))
    if version != FORMAT_VERSION:
        raise VerificationError(f"unsupported version {version}")
    class_names = []
    for i in range(class_count):
        (name_len,) = struct.unpack("<H", take(2, f"class {i} name length"))
        class_names.append(take(name_len, f"class {i} name").decode("utf-8"))
    (count,) = struct.unpack("<I", take(4, "record count"))
    rec_dtype = np.dtype([("image_id", "<u4"), ("label", "<u4"), ("vector", "<f4", (dim,))])
    records = np.frombuffer(take(count * rec_dtype.itemsize, "records"), dtype=rec_dtype)
    if pos != len(data):
        raise VerificationError("trailing bytes after the declared payload")
    return {
        "dim": dim,
        "geometry": (height, width, channels),
        "class_names": class_names,
        "image_ids": records["image_id"].astype(np.int64),
        "labels": records["label"].astype(np.int64),
        "vectors": records["vector"].reshape(-1, dim),
    }


def verify(path: str | Path, expect_per_class: int | None = None) -> dict:
    """Reload the file and check header fields, counts and finiteness.

    Returns a report dict; raises VerificationError on any violation.
    """
    parsed = parse_semb(path)
    if parsed["dim"] != EMBED_DIM:
        raise VerificationError(f"dim {parsed['dim']} != {EMBED_DIM}")
    if parsed["geometry"] != (IMAGE_HEIGHT, IMAGE_WIDTH, IMAGE_CHANNELS):
        raise VerificationError(f"unexpected image geometry {parsed['geometry']}")
    labels = parsed["labels"]
    n_classes = len(parsed["class_names"])
    if len(labels) and labels.max() >= n_classes:
        raise VerificationError("label outside class list")
    if len(np.unique(parsed["image_ids"])) != len(parsed["image_ids"]):
        raise VerificationError("duplicate image_ids")
    if not np.all(np.isfinite(parsed["vectors"])):
        raise VerificationError("non-finite embedding components")
    counts = np.bincount(labels, minlength=n_classes)
    if expect_per_class is not None and not np.all(counts == expect_per_class):
        raise VerificationError(
            f"per-class counts range {counts.min()}..{counts.max()}, expected {expect_per_class} each"
        )
    return {
        "records": len(labels),
        "classes": n_classes,
        "per_class_min": int(counts.min()) if n_classes else 0,
        "per_class_max": int(counts.max()) if n_classes else 0,
        "norm_mean": float(np.linalg.norm(parsed["vectors"], axis=1).mean()) if len(labels) else 0.0,
    }


# ---------------------------------------------------------------------------
# CLIP + CIFAR100 backends (lazy imports so the writer works standalone)
# ---------------------------------------------------------------------------

def _load_cifar100(config: ExtractorConfig):
    try:
        from torchvision.datasets import CIFAR100
    except ImportError as error:
        raise DatasetUnavailableError(f"torchvision is not installed: {error}") from error
    try:
        dataset = CIFAR100(root=config.data_root, train=(config.split == "train"), download=True)
    except Exception as error:
        raise DatasetUnavailableError(f"could not obtain CIFAR100: {error}") from error
    images = [dataset[i][0] for i in range(len(dataset))]
    labels = [int(dataset[i][1]) for i in range(len(dataset))]
    return images, labels, list(dataset.classes)


def _load_clip_embedder(config: ExtractorConfig):
    try:
        import torch
        from transformers import CLIPModel, CLIPProcessor
    except ImportError as error:
        raise ModelUnavailableError(f"torch/transformers are not installed: {error}") from error
    try:
        model = CLIPModel.from_pretrained(config.model_name)
        processor = CLIPProcessor.from_pretrained(config.model_name)
    except Exception as error:
        raise ModelUnavailableError(f"could not load {config.model_name}: {error}") from error
    if model.config.projection_dim != EMBED_DIM:
        raise ModelUnavailableError(
            f"{config.model_name} produces {model.config.projection_dim}-dim features, need {EMBED_DIM}"
        )
    device = config.device or ("cuda" if torch.cuda.is_available() else "cpu")
    model = model.to(device).eval()

    def embed(batch):
        inputs = processor(images=list(batch), return_tensors="pt")
        pixel_values = inputs["pixel_values"].to(device)
        with torch.no_grad():
            features = model.get_image_features(pixel_values=pixel_values)
        return features.cpu().numpy().astype(np.float32)

    return embed


def extract(config: ExtractorConfig, dataset_loader=None, embedder_factory=None) -> Path:
    """Run the full extraction and write the SEMB file.

    dataset_loader and embedder_factory exist for testing; the defaults
    wire up CIFAR100 and the CLIP image tower.
    """
    dataset_loader = dataset_loader or _load_cifar100
    embedder_factory = embedder_factory or _load_clip_embedder
    images, labels, class_names = dataset_loader(config)
    embed = embedder_factory(config)

    chunks = []
    for start in range(0, len(images), config.batch_size):
        chunk = embed(images[start : start + config.batch_size])
        chunk = np.asarray(chunk, dtype=np.float32)
        if chunk.ndim != 2 or chunk.shape[1] != EMBED_DIM:
            raise ExtractionError(f"embedder returned shape {chunk.shape}, need (*, {EMBED_DIM})")
        chunks.append(chunk)
    vectors = np.concatenate(chunks) if chunks else np.zeros((0, EMBED_DIM), dtype=np.float32)
    if config.normalize:
        norms = np.linalg.norm(vectors, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ExtractionError("cannot normalize a zero embedding")
        vectors = (vectors / norms).astype(np.float32)

    write_semb(
        config.output,
        class_names,
        vectors,
        np.asarray(labels, dtype=np.int64),
        np.arange(len(labels), dtype=np.int64),
    )
    return Path(config.output)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="CIFAR100 CLIP embedding extractor")
    parser.add_argument("--split", choices=["train", "test"], required=True)
    parser.add_argument("--out", required=True)
    parser.add_argument("--normalize", action="store_true", help="L2-normalize embeddings")
    parser.add_argument("--batch-size", type=int, default=256)
    parser.add_argument("--model", default=DEFAULT_MODEL)
    parser.add_argument("--device", default=None)
    parser.add_argument("--data-root", default="./cifar100-data")
    args = parser.parse_args(argv)

    config = ExtractorConfig(
        split=args.split,
        output=args.out,
        model_name=args.model,
        batch_size=args.batch_size,
        device=args.device,
        normalize=args.normalize,
        data_root=args.data_root,
    )
    try:
        path = extract(config)
        expected = {"train": 500, "test": 100}[args.split]
        report = verify(path, expect_per_class=expected)
    except ExtractionError as error:
        print(f"extract_clip: error: {error}", file=sys.stderr)
        return 1
    print(
        f"OK {path}: {report['records']} records, {report['classes']} classes, "
        f"{report['per_class_min']}..{report['per_class_max']} per class, "
        f"mean norm {report['norm_mean']:.4f}"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
