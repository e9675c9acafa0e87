"""Datasets: IDX ingestion, synthetic blobs, stratified splits and batch plans."""

from __future__ import annotations

import csv
import gzip
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, DataError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray  # (n, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64 ground truth
    num_classes: int
    clean_predictions: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be (n, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.images[indices],
            self.labels[indices],
            self.num_classes,
            {k: v[indices] for k, v in self.clean_predictions.items()},
        )


# -- IDX ---------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path, expected_magic: int | None = None) -> np.ndarray:
    """Parse an IDX file (optionally gzipped) into a uint8 array."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise FormatError("truncated IDX header", path, len(raw))
    magic = struct.unpack(">I", raw[:4])[0]
    if (magic >> 16) != 0 or (magic >> 8) & 0xFF != 0x08:
        raise FormatError(f"bad IDX magic 0x{magic:08x}", path, 0)
    if expected_magic is not None and magic != expected_magic:
        raise FormatError(f"expected magic 0x{expected_magic:08x}, found 0x{magic:08x}", path, 0)
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise FormatError("truncated IDX dimension header", path, len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    count = math.prod(dims)
    if len(raw) - header_end < count:
        raise FormatError(
            f"payload truncated: need {count} bytes, have {len(raw) - header_end}", path, len(raw)
        )
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header_end).reshape(dims).copy()


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">I", 0x0800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    payload = header + array.tobytes()
    path = Path(path)
    if path.suffix == ".gz":
        payload = gzip.compress(payload, mtime=0)
    path.write_bytes(payload)


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.ndim != 3:
        raise FormatError(f"image file must be 3-D (n, h, w), got {images.ndim}-D", images_path, 3)
    if labels.shape[0] != images.shape[0]:
        raise FormatError(
            f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels", labels_path, 4
        )
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 1
    pixels = images[:, None, :, :].astype(np.float32) / np.float32(255)
    return Dataset(pixels, labels.astype(np.int64), num_classes)


def save_idx(dataset: Dataset, images_path, labels_path) -> None:
    if dataset.images.shape[1] != 1:
        raise DataError("IDX export supports single-channel images only")
    pixels = np.rint(dataset.images[:, 0] * 255).astype(np.uint8)
    write_idx(images_path, pixels)
    write_idx(labels_path, dataset.labels.astype(np.uint8))


# -- synthetic data ----------------------------------------------------------


def synth_blobs(num_classes: int, per_class: int, image_shape=(1, 28, 28), seed: int = 0) -> Dataset:
    """Class-conditional Gaussian blobs rendered into images.

    Each class owns a blob centre on a ring around the image centre; samples
    jitter the centre, width and amplitude and add pixel noise.
    """
    if num_classes < 1 or per_class < 1:
        raise DataError("synth_blobs needs num_classes >= 1 and per_class >= 1")
    C, H, W = image_shape
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    radius = 0.28 * min(H, W)
    centres = np.stack([H / 2 + radius * np.sin(angles), W / 2 + radius * np.cos(angles)], axis=1)
    n = num_classes * per_class
    labels = np.repeat(np.arange(num_classes), per_class)
    rng.shuffle(labels)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    c = centres[labels] + rng.normal(0, 0.06 * min(H, W), size=(n, 2))
    sigma = 0.12 * min(H, W) * rng.uniform(0.8, 1.2, size=n)
    amp = rng.uniform(0.6, 1.0, size=n)
    d2 = (yy[None] - c[:, 0, None, None]) ** 2 + (xx[None] - c[:, 1, None, None]) ** 2
    img = amp[:, None, None] * np.exp(-d2 / (2 * sigma[:, None, None] ** 2))
    img = np.repeat(img[:, None], C, axis=1) + rng.normal(0, 0.08, size=(n, C, H, W))
    return Dataset(np.clip(img, 0, 1).astype(np.float32), labels, num_classes)


# -- splits ------------------------------------------------------------------


def _water_fill(n: int, capacity: np.ndarray, rng) -> np.ndarray:
    """Spread ``n`` slots over classes as evenly as capacity allows."""
    quota = np.zeros_like(capacity)
    remaining = n
    while remaining > 0:
        open_classes = np.flatnonzero(quota < capacity)
        if open_classes.size == 0:
            raise DataError(f"insufficient samples: {remaining} more requested than available")
        level = quota[open_classes].min()
        tier = open_classes[quota[open_classes] == level]
        if remaining >= tier.size:
            quota[tier] += 1
            remaining -= tier.size
        else:
            quota[rng.choice(tier, size=remaining, replace=False)] += 1
            remaining = 0
    return quota


def make_splits(dataset: Dataset, n_attack_train: int, n_eval: int, seed: int = 0):
    """Disjoint, class-stratified index sets ``(attack_train, eval)``, each sorted."""
    n = len(dataset)
    if n_attack_train < 0 or n_eval < 0 or n_attack_train + n_eval > n:
        raise DataError(f"insufficient samples: {n_attack_train} + {n_eval} requested from {n}")
    rng = np.random.default_rng(seed)
    by_class = [rng.permutation(np.flatnonzero(dataset.labels == k)) for k in range(dataset.num_classes)]
    capacity = np.array([len(ix) for ix in by_class])
    q_attack = _water_fill(n_attack_train, capacity, rng)
    q_eval = _water_fill(n_eval, capacity - q_attack, rng)
    attack, evaluation = [], []
    for ix, qa, qe in zip(by_class, q_attack, q_eval):
        attack.append(ix[:qa])
        evaluation.append(ix[qa:qa + qe])
    return np.sort(np.concatenate(attack)).astype(np.int64), np.sort(np.concatenate(evaluation)).astype(np.int64)


def write_split_manifest(path, splits: dict[str, np.ndarray]) -> None:
    rows = sorted((int(i), name) for name, idx in splits.items() for i in idx)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "split"])
        w.writerows(rows)


def read_split_manifest(path) -> dict[str, np.ndarray]:
    out: dict[str, list[int]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["index", "split"]:
            raise FormatError(f"split manifest header must be index,split, got {reader.fieldnames}", path)
        for row in reader:
            out.setdefault(row["split"], []).append(int(row["index"]))
    return {k: np.array(sorted(v), dtype=np.int64) for k, v in out.items()}


# -- batch planning ----------------------------------------------------------


@dataclass(frozen=True)
class OuterStep:
    epoch: int
    step: int
    batch: np.ndarray  # sample indices of the large batch, ascending
    inner: tuple[np.ndarray, ...]  # small batches for the inner loop, each ascending


@dataclass(frozen=True)
class BatchPlan:
    """Epoch shuffles into large batches, each with its inner small-batch schedule.

    The inner schedule of a large batch concatenates independent shuffles of
    that batch and slices the result into consecutive small-batch chunks, so
    with a traversal factor K every sample is visited exactly K times.
    """

    n: int
    large_batch: int
    small_batch: int
    traversals: int | None = 4
    inner_iters: int | None = None
    epochs: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise DataError("cannot plan batches over an empty dataset")
        if self.large_batch < 1 or self.small_batch < 1:
            raise ConfigError("batch sizes must be positive")
        if self.small_batch > self.large_batch:
            raise ConfigError(f"small batch {self.small_batch} exceeds large batch {self.large_batch}")
        if self.large_batch % self.small_batch:
            raise ConfigError(f"small batch {self.small_batch} must divide large batch {self.large_batch}")
        if self.inner_iters is None and (self.traversals is None or self.traversals < 1):
            raise ConfigError("need traversals >= 1 or an explicit inner iteration count")
        if self.inner_iters is not None and self.inner_iters < 1:
            raise ConfigError("inner iteration count must be >= 1")

    @property
    def inner_per_full_batch(self) -> int:
        if self.inner_iters is not None:
            return self.inner_iters
        return self.traversals * self.large_batch // self.small_batch

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(self.n / self.large_batch)

    def inner_count(self, actual: int) -> int:
        if self.inner_iters is not None:
            return math.ceil(self.inner_iters * actual / self.large_batch)
        return math.ceil(self.traversals * actual / self.small_batch)

    def _inner_schedule(self, batch: np.ndarray, rng) -> tuple[np.ndarray, ...]:
        count = self.inner_count(len(batch))
        if self.inner_iters is None:
            shuffles = self.traversals
        else:
            shuffles = math.ceil(count * self.small_batch / len(batch))
        seq = np.concatenate([rng.permutation(batch) for _ in range(shuffles)])
        chunks = [seq[i * self.small_batch:(i + 1) * self.small_batch] for i in range(count)]
        return tuple(np.sort(c) for c in chunks)

    def __iter__(self) -> Iterator[OuterStep]:
        outer_seq, inner_seq = np.random.SeedSequence(self.seed).spawn(2)
        outer_rng = np.random.default_rng(outer_seq)
        inner_rng = np.random.default_rng(inner_seq)
        for epoch in range(self.epochs):
            perm = outer_rng.permutation(self.n)
            for k in range(self.steps_per_epoch):
                batch = np.sort(perm[k * self.large_batch:(k + 1) * self.large_batch])
                yield OuterStep(epoch, k, batch, self._inner_schedule(batch, inner_rng))


def plan_batches(dataset_size: int, config) -> BatchPlan:
    """Build the plan for an attack configuration (see ``attacks.AttackConfig``)."""
    return BatchPlan(
        n=dataset_size,
        large_batch=config.large_batch,
        small_batch=config.small_batch,
        traversals=config.traversals,
        inner_iters=config.inner_iters,
        epochs=config.epochs,
        seed=config.seed,
    )
