"""Dataset ingestion, synthetic corpora, and the benchmark's split structure.

Parsers are pure and bit-exact: IDX (big-endian, optional gzip) and CIFAR
binary batches.  Splits are drawn with named streams so a given seed always
yields identical index lists.
"""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import (
    BadMagic,
    CountMismatch,
    LabelOutOfRange,
    RowSizeMismatch,
    TooFewSamples,
    TruncatedFile,
)
from .rng import RngStream, stream

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

TEST_FRACTION = 0.20
VAL_FRACTION = 0.15
FORGET_FRACTION = 0.10


@dataclass
class Corpus:
    images: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise RowSizeMismatch(f"corpus images must be [N, C, H, W], got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise CountMismatch(f"{self.images.shape[0]} images vs {self.labels.shape} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise LabelOutOfRange(f"labels outside [0, {self.class_count})")

    def __len__(self):
        return self.images.shape[0]

    @property
    def input_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def gather(self, indices):
        idx = np.asarray(indices, dtype=np.int64)
        return self.images[idx], self.labels[idx]


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, expect_magic: int, path) -> tuple:
    if len(raw) < 4:
        raise TruncatedFile(f"{path}: shorter than the magic field")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expect_magic:
        raise BadMagic(f"{path}: magic 0x{magic:08x}, expected 0x{expect_magic:08x}")
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise TruncatedFile(f"{path}: header needs {header_len} bytes, file has {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    payload = raw[header_len:]
    expected = math.prod(dims)
    if len(payload) != expected:
        raise TruncatedFile(f"{path}: payload {len(payload)} bytes, header implies {expected}")
    return dims, np.frombuffer(payload, dtype=np.uint8)


def load_idx(images_path, labels_path, name: str = "idx", class_count: int | None = None) -> Corpus:
    """Parse an IDX image/label file pair (optionally gzip-compressed)."""
    img_dims, img_data = _parse_idx(_read_bytes(images_path), IDX_IMAGE_MAGIC, images_path)
    lab_dims, lab_data = _parse_idx(_read_bytes(labels_path), IDX_LABEL_MAGIC, labels_path)
    n, h, w = img_dims
    if lab_dims[0] != n:
        raise CountMismatch(f"{images_path}: {n} images vs {lab_dims[0]} labels")
    images = img_data.reshape(n, 1, h, w).astype(np.float64) / 255.0
    labels = lab_data.astype(np.int64)
    c = class_count if class_count is not None else (int(labels.max()) + 1 if n else 1)
    return Corpus(images=images, labels=labels, class_count=c, name=name)


def load_cifar(path, fine_labels: bool = False, name: str | None = None) -> Corpus:
    """Parse CIFAR binary batches; path is one file, a directory of .bin files, or a list."""
    if isinstance(path, (list, tuple)):
        files = [Path(p) for p in path]
    else:
        p = Path(path)
        files = sorted(p.glob("*.bin")) if p.is_dir() else [p]
    if not files:
        raise TruncatedFile(f"{path}: no batch files found")
    row = 3074 if fine_labels else 3073
    label_offset = 1 if fine_labels else 0
    class_count = 100 if fine_labels else 10
    images, labels = [], []
    for f in files:
        raw = _read_bytes(f)
        if not raw:
            raise TruncatedFile(f"{f}: empty batch file")
        if len(raw) % row:
            raise RowSizeMismatch(f"{f}: {len(raw)} bytes is not a multiple of the {row}-byte row")
        arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, row)
        labels.append(arr[:, label_offset].astype(np.int64))
        images.append(arr[:, label_offset + 1 :].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0)
    return Corpus(
        images=np.concatenate(images),
        labels=np.concatenate(labels),
        class_count=class_count,
        name=name or ("cifar100" if fine_labels else "cifar10"),
    )


def _blob_image_shape(dim: int) -> tuple:
    if dim % 3 == 0:
        side = math.isqrt(dim // 3)
        if side * side * 3 == dim:
            return (3, side, side)
    side = math.isqrt(dim)
    if side * side == dim:
        return (1, side, side)
    return (1, 1, dim)


def synth_blobs(
    n: int,
    classes: int,
    dim: int,
    separation: float,
    seed: int,
    label_noise: float = 0.0,
) -> Corpus:
    """Gaussian class clusters reshaped to an image layout and scaled to [0, 1].

    A single box-smoothing pass gives the samples the mild spatial
    correlation of natural images, so convolutional models see the same
    low-frequency structure they were designed for.

    label_noise relabels that fraction of samples with a uniformly drawn
    wrong class.  Models large enough to interpolate must memorize those
    samples individually, which is what gives membership attacks a signal
    to find; with clean labels a cluster corpus is learned entirely from
    structure and members are indistinguishable from non-members.
    """
    if n < classes:
        raise TooFewSamples(f"n={n} below class count {classes}")
    if not 0.0 <= float(label_noise) < 1.0:
        raise LabelOutOfRange(f"label_noise must be in [0, 1), got {label_noise}")
    gen = stream(int(seed), "blobs").generator()
    centers = gen.normal(size=(classes, dim)) / math.sqrt(dim) * float(separation)
    labels = np.arange(n, dtype=np.int64) % classes
    labels = labels[gen.permutation(n)]
    points = centers[labels] + gen.normal(size=(n, dim))
    if label_noise and classes > 1:
        flipped = gen.choice(n, size=round(n * float(label_noise)), replace=False)
        labels[flipped] = (labels[flipped] + gen.integers(1, classes, size=flipped.size)) % classes
    shape = _blob_image_shape(dim)
    images = uniform_filter(points.reshape((n,) + shape), size=(1, 1, 3, 3), mode="nearest")
    lo, hi = images.min(), images.max()
    images = (images - lo) / (hi - lo) if hi > lo else np.zeros_like(images)
    return Corpus(
        images=images,
        labels=labels,
        class_count=classes,
        name=f"blobs{n}x{dim}",
    )


@dataclass
class SplitSet:
    """Disjoint index lists: retain/forget/val into the dev corpus, test into dev or a separate corpus."""

    retain: np.ndarray
    forget: np.ndarray
    val: np.ndarray
    test: np.ndarray
    split_seed: int
    separate_test: bool
    fractions: dict = field(default_factory=dict)

    def __post_init__(self):
        for attr in ("retain", "forget", "val", "test"):
            setattr(self, attr, np.asarray(getattr(self, attr), dtype=np.int64))

    def sizes(self) -> tuple:
        return (len(self.retain), len(self.forget), len(self.val), len(self.test))

    def train_indices(self) -> np.ndarray:
        return np.concatenate([self.retain, self.forget])


def make_splits(
    dev_corpus: Corpus,
    test_corpus: Corpus | None = None,
    seed: int = 123,
    test_fraction: float = TEST_FRACTION,
    val_fraction: float = VAL_FRACTION,
    forget_fraction: float = FORGET_FRACTION,
) -> SplitSet:
    """Carve test (if no canonical test corpus), then val, then forget; floor the smaller side."""
    n = len(dev_corpus)
    if n == 0:
        raise TooFewSamples("empty dev corpus")
    pool = np.arange(n, dtype=np.int64)
    if test_corpus is None:
        perm = stream(int(seed), "split", "test").generator().permutation(pool)
        n_test = int(math.floor(n * test_fraction))
        test, pool = np.sort(perm[:n_test]), np.sort(perm[n_test:])
    else:
        test = np.arange(len(test_corpus), dtype=np.int64)
    perm = stream(int(seed), "split", "val").generator().permutation(pool)
    n_val = int(math.floor(len(pool) * val_fraction))
    val, train = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    perm = stream(int(seed), "split", "forget").generator().permutation(train)
    n_forget = int(math.floor(len(train) * forget_fraction))
    forget, retain = np.sort(perm[:n_forget]), np.sort(perm[n_forget:])
    split = SplitSet(
        retain=retain,
        forget=forget,
        val=val,
        test=test,
        split_seed=int(seed),
        separate_test=test_corpus is not None,
        fractions={"test": test_fraction, "val": val_fraction, "forget": forget_fraction},
    )
    if any(s == 0 for s in split.sizes()):
        raise TooFewSamples(f"split sizes {split.sizes()} from {n} samples")
    return split


def write_splits(split: SplitSet, path):
    lines = [
        "# splits"
        f" seed={split.split_seed}"
        f" test_fraction={split.fractions.get('test', TEST_FRACTION)}"
        f" val_fraction={split.fractions.get('val', VAL_FRACTION)}"
        f" forget_fraction={split.fractions.get('forget', FORGET_FRACTION)}"
        f" separate_test={'true' if split.separate_test else 'false'}"
    ]
    for attr in ("retain", "forget", "val", "test"):
        lines.append(f"{attr}: " + " ".join(str(i) for i in getattr(split, attr)))
    Path(path).write_text("\n".join(lines) + "\n")


def read_splits(path) -> SplitSet:
    text = Path(path).read_text().strip().splitlines()
    if not text or not text[0].startswith("# splits"):
        raise BadMagic(f"{path}: missing splits header")
    header = dict(tok.split("=", 1) for tok in text[0].split()[2:])
    parts = {}
    for line in text[1:]:
        key, _, rest = line.partition(":")
        parts[key.strip()] = np.array([int(t) for t in rest.split()], dtype=np.int64)
    missing = {"retain", "forget", "val", "test"} - set(parts)
    if missing:
        raise TruncatedFile(f"{path}: missing sections {sorted(missing)}")
    return SplitSet(
        retain=parts["retain"],
        forget=parts["forget"],
        val=parts["val"],
        test=parts["test"],
        split_seed=int(header["seed"]),
        separate_test=header.get("separate_test") == "true",
        fractions={
            "test": float(header.get("test_fraction", TEST_FRACTION)),
            "val": float(header.get("val_fraction", VAL_FRACTION)),
            "forget": float(header.get("forget_fraction", FORGET_FRACTION)),
        },
    )


def normalize_images(images: np.ndarray, mean, std) -> np.ndarray:
    """Per-channel standardization applied as a model-input transform."""
    mean = np.asarray(mean, dtype=np.float64).reshape(1, -1, 1, 1)
    std = np.asarray(std, dtype=np.float64).reshape(1, -1, 1, 1)
    if images.shape[1] != mean.shape[1] or images.shape[1] != std.shape[1]:
        raise CountMismatch(f"{images.shape[1]} channels vs {mean.shape[1]}/{std.shape[1]} constants")
    return (images - mean) / std


def augment_batch(images: np.ndarray, rng: RngStream, pad: int = 2, flip_prob: float = 0.5) -> np.ndarray:
    """Seeded random crop (zero padding) and horizontal flip."""
    gen = rng.generator()
    n, _, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(images)
    offs = gen.integers(0, 2 * pad + 1, size=(n, 2))
    flips = gen.uniform(size=n) < flip_prob
    for i in range(n):
        dy, dx = offs[i]
        crop = padded[i, :, dy : dy + h, dx : dx + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out
