"""Desk-scale classifiers: construction, SGD training, prediction and weight files."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Dataset
from .errors import ConfigError, DataError, FormatError, ShapeError
from .tensor import Tape, Tensor

# Default widths: hidden units for the MLP, conv channels for the CNNs.
ARCHITECTURES: dict[str, tuple[int, ...]] = {
    "mlp-2": (256,),
    "cnn-small": (16, 32),
    "cnn-wide": (32, 64),
}

WEIGHTS_MAGIC = b"UAPW"
WEIGHTS_VERSION = 1


@dataclass
class Network:
    arch: str
    input_shape: tuple[int, int, int]
    num_classes: int
    widths: tuple[int, ...]
    weights: list[Tensor]

    @property
    def layers(self) -> list[str]:
        if self.arch == "mlp-2":
            return ["flatten", "dense", "relu", "dense"]
        return ["conv3x3", "relu", "maxpool2x2", "conv3x3", "relu", "maxpool2x2", "flatten", "dense"]

    @property
    def num_parameters(self) -> int:
        return sum(w.size for w in self.weights)

    def weight_shapes(self) -> list[tuple[int, ...]]:
        return [w.shape for w in self.weights]

    def forward(self, x: Tensor, params: list[Tensor] | None = None) -> Tensor:
        """Logits for a (N, C, H, W) batch. ``params`` overrides the stored weights."""
        p = self.weights if params is None else params
        if x.data.ndim != 4 or tuple(x.shape[1:]) != tuple(self.input_shape):
            raise ShapeError(f"{self.arch}.forward", x.shape, (None, *self.input_shape))
        if self.arch == "mlp-2":
            h = T.relu(T.add_bias(T.matmul(T.flatten(x), p[0]), p[1]))
            return T.add_bias(T.matmul(h, p[2]), p[3])
        h = T.maxpool2x2(T.relu(T.conv2d(x, p[0], p[1], padding="same")))
        h = T.maxpool2x2(T.relu(T.conv2d(h, p[2], p[3], padding="same")))
        return T.add_bias(T.matmul(T.flatten(h), p[4]), p[5])

    def logits(self, images: np.ndarray, batch_size: int = 1000) -> np.ndarray:
        images = np.asarray(images, dtype=np.float32)
        out = [self.forward(Tensor(images[i:i + batch_size])).data for i in range(0, len(images), batch_size)]
        if not out:
            return np.zeros((0, self.num_classes), dtype=np.float32)
        return np.concatenate(out)

    def copy(self) -> "Network":
        return Network(self.arch, self.input_shape, self.num_classes, self.widths,
                       [Tensor(w.data) for w in self.weights])


def _param_shapes(arch: str, input_shape, num_classes: int, widths) -> list[tuple[int, ...]]:
    C, H, W = input_shape
    if arch == "mlp-2":
        (hidden,) = widths
        return [(C * H * W, hidden), (hidden,), (hidden, num_classes), (num_classes,)]
    if H % 4 or W % 4:
        raise ConfigError(f"{arch} needs height and width divisible by 4, got {H}x{W}")
    c1, c2 = widths
    return [(c1, C, 3, 3), (c1,), (c2, c1, 3, 3), (c2,), (c2 * (H // 4) * (W // 4), num_classes), (num_classes,)]


def build(arch: str, input_shape=(1, 28, 28), num_classes: int = 10, seed: int = 0,
          widths: tuple[int, ...] | None = None) -> Network:
    """Fresh network with fan-in scaled uniform weights and zero biases."""
    if arch not in ARCHITECTURES:
        raise ConfigError(f"unknown architecture {arch!r}; choose from {sorted(ARCHITECTURES)}")
    input_shape = tuple(int(d) for d in input_shape)
    if len(input_shape) != 3 or min(input_shape) < 1 or num_classes < 1:
        raise ConfigError(f"bad input shape {input_shape} or class count {num_classes}")
    widths = tuple(ARCHITECTURES[arch] if widths is None else widths)
    if len(widths) != len(ARCHITECTURES[arch]) or min(widths) < 1:
        raise ConfigError(f"{arch} expects {len(ARCHITECTURES[arch])} positive widths, got {widths}")
    rng = np.random.default_rng(seed)
    weights = []
    for shape in _param_shapes(arch, input_shape, num_classes, widths):
        if len(shape) == 1:
            weights.append(Tensor(np.zeros(shape)))
            continue
        fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
        bound = np.sqrt(6.0 / fan_in)
        weights.append(Tensor(rng.uniform(-bound, bound, size=shape)))
    return Network(arch, input_shape, num_classes, widths, weights)


def predict_labels(net: Network, inputs) -> np.ndarray:
    """Argmax class per sample; ties go to the lowest class index."""
    data = inputs.data if isinstance(inputs, Tensor) else np.asarray(inputs, dtype=np.float32)
    if data.ndim != 4 or tuple(data.shape[1:]) != tuple(net.input_shape):
        raise ShapeError("predict_labels", data.shape, (None, *net.input_shape))
    return labels_from_logits(net.logits(data))


def labels_from_logits(logits: np.ndarray) -> np.ndarray:
    return np.asarray(logits).argmax(axis=1).astype(np.int64)


def accuracy(net: Network, dataset: Dataset) -> float:
    if len(dataset) == 0:
        return 0.0
    return float(np.mean(predict_labels(net, dataset.images) == dataset.labels))


@dataclass(frozen=True)
class TrainReport:
    epochs_run: int
    final_train_accuracy: float
    final_eval_accuracy: float
    seed: int


def train(net: Network, dataset: Dataset, epochs: int = 5, learning_rate: float = 0.05,
          batch_size: int = 32, seed: int = 0, eval_set: Dataset | None = None) -> TrainReport:
    """Mini-batch SGD on mean cross-entropy; updates ``net.weights`` in place.

    Without ``eval_set`` the reported eval accuracy is measured on the training data.
    """
    if len(dataset) == 0:
        raise DataError("cannot train on an empty dataset")
    if dataset.labels.max() >= net.num_classes or dataset.labels.min() < 0:
        raise DataError(f"labels must lie in [0, {net.num_classes})")
    if tuple(dataset.image_shape) != tuple(net.input_shape):
        raise ShapeError("train", dataset.image_shape, net.input_shape)
    rng = np.random.default_rng(seed)
    lr = np.float32(learning_rate)
    n = len(dataset)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            tape = Tape()
            params = [tape.watch(w) for w in net.weights]
            logits = net.forward(Tensor(dataset.images[idx]), params)
            T.tensor_mean(T.softmax_cross_entropy(logits, dataset.labels[idx]))
            grads = T.backward(tape, Tensor(np.float32(1.0)))
            net.weights = [Tensor(w.data - lr * grads[p.id].data) for w, p in zip(net.weights, params)]
    train_acc = accuracy(net, dataset)
    eval_acc = accuracy(net, eval_set) if eval_set is not None else train_acc
    return TrainReport(epochs, train_acc, eval_acc, seed)


# -- weight files ------------------------------------------------------------


def save(net: Network, path) -> None:
    arch = net.arch.encode("utf-8")
    parts = [WEIGHTS_MAGIC, struct.pack("<I", WEIGHTS_VERSION), struct.pack("<I", len(arch)), arch,
             struct.pack("<3I", *net.input_shape), struct.pack("<I", net.num_classes),
             struct.pack("<I", len(net.widths)), struct.pack(f"<{len(net.widths)}I", *net.widths),
             struct.pack("<I", len(net.weights))]
    for w in net.weights:
        parts.append(struct.pack("<I", w.data.ndim))
        parts.append(struct.pack(f"<{w.data.ndim}I", *w.shape))
        parts.append(w.data.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.path, self.pos = buf, path, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated while reading {what}", self.path, self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count, what))
        return vals[0] if count == 1 else vals


def load(path) -> Network:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4, "magic") != WEIGHTS_MAGIC:
        raise FormatError("not a UAPW weight file (bad magic)", path, 0)
    version = r.u32("version")
    if version != WEIGHTS_VERSION:
        raise FormatError(f"unsupported weight file version {version}", path, 4)
    arch = r.take(r.u32("architecture length"), "architecture id").decode("utf-8", errors="replace")
    input_shape = tuple(r.u32("input shape", 3))
    num_classes = r.u32("class count")
    n_widths = r.u32("width count")
    widths = tuple(r.u32("widths", n_widths)) if n_widths != 1 else (r.u32("widths"),)
    try:
        expected = _param_shapes(arch, input_shape, num_classes, widths) if arch in ARCHITECTURES else None
    except (ConfigError, ValueError) as exc:
        raise FormatError(f"inconsistent header: {exc}", path, r.pos) from exc
    if expected is None:
        raise FormatError(f"unknown architecture {arch!r}", path, 8)
    n_tensors = r.u32("tensor count")
    if n_tensors != len(expected):
        raise FormatError(f"{arch} needs {len(expected)} tensors, header declares {n_tensors}", path, r.pos - 4)
    weights = []
    for i, shape in enumerate(expected):
        at = r.pos
        rank = r.u32(f"rank of tensor {i}")
        dims = r.u32(f"dims of tensor {i}", rank) if rank != 1 else (r.u32(f"dims of tensor {i}"),)
        dims = tuple(dims) if rank else ()
        if dims != shape:
            raise FormatError(f"tensor {i} has shape {dims}, {arch} expects {shape}", path, at)
        payload = r.take(4 * int(np.prod(dims)), f"payload of tensor {i}")
        weights.append(Tensor(np.frombuffer(payload, dtype="<f4").reshape(dims)))
    if r.pos != len(r.buf):
        raise FormatError(f"{len(r.buf) - r.pos} trailing bytes", path, r.pos)
    return Network(arch, input_shape, num_classes, widths, weights)
