"""Dense tensors and a define-by-run reverse-mode tape.

Every primitive takes and returns :class:`Tensor` values. When any operand
was produced under a :class:`Tape` (directly via :meth:`Tape.watch` or
indirectly through earlier primitives), the primitive appends an entry to
that tape holding a vector-Jacobian closure. :func:`backward` replays the
entries in reverse to obtain gradients for every watched input.

Computation happens in the dtype of the operands: float32 by default, float64
when the caller builds float64 tensors (used by finite-difference checks).
"""

from __future__ import annotations

import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError, UsageError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "matmul",
    "add",
    "add_bias",
    "add_broadcast",
    "conv2d",
    "maxpool2x2",
    "relu",
    "flatten",
    "softmax",
    "softmax_cross_entropy",
    "gather_labels",
    "clip_max",
    "scale",
    "tensor_sum",
    "tensor_mean",
]

_node_ids = itertools.count()


class Tensor:
    """Immutable n-dimensional array of floats.

    ``data`` is a read-only numpy array (row-major). ``id`` is set only for
    tensors that live on a tape.
    """

    __slots__ = ("data", "tape", "id")

    def __init__(self, data, dtype=np.float32):
        arr = np.array(data, dtype=dtype, order="C")
        arr.setflags(write=False)
        self.data = arr
        self.tape = None
        self.id = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, tape=None, node=None) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr, order="C")
        arr.setflags(write=False)
        t.data = arr
        t.tape = tape
        t.id = node
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        traced = f", id={self.id}" if self.id is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{traced})"


class Tape:
    """Ordered record of primitive applications for a single backward pass."""

    def __init__(self):
        self._entries: list[tuple[int, tuple, object]] = []
        self._watched: list[Tensor] = []
        self.consumed = False

    def watch(self, t) -> Tensor:
        """Return a copy of ``t`` tagged as differentiable on this tape."""
        if self.consumed:
            raise UsageError("tape already consumed by backward()")
        data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float32)
        out = Tensor._wrap(data, self, next(_node_ids))
        self._watched.append(out)
        return out

    def _record(self, value: np.ndarray, inputs: tuple, vjp) -> Tensor:
        if self.consumed:
            raise UsageError("tape already consumed by backward()")
        out = Tensor._wrap(value, self, next(_node_ids))
        self._entries.append((out.id, tuple(x.id if isinstance(x, Tensor) else None for x in inputs), vjp))
        return out

    def __len__(self) -> int:
        return len(self._entries)


def _tape_of(*operands) -> Tape | None:
    tape = None
    for x in operands:
        if isinstance(x, Tensor) and x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise UsageError("operands belong to different tapes")
            tape = x.tape
    return tape


def _emit(value, operands, vjp) -> Tensor:
    tape = _tape_of(*operands)
    if tape is None:
        return Tensor._wrap(value)
    return tape._record(value, operands, vjp)


def backward(tape: Tape, seed: Tensor, output: Tensor | None = None) -> dict[int, Tensor]:
    """Propagate ``seed`` from ``output`` (default: last recorded value).

    Returns a mapping from the id of every watched tensor to its gradient.
    Watched tensors the output does not depend on get zero gradients.
    """
    if tape.consumed:
        raise UsageError("tape already consumed by backward()")
    if not tape._entries:
        raise UsageError("tape has no recorded operations")
    if output is None:
        out_id = tape._entries[-1][0]
        out_shape = None
    else:
        if output.tape is not tape:
            raise UsageError("output was not traced on this tape")
        out_id = output.id
        out_shape = output.shape
    seed_arr = seed.data if isinstance(seed, Tensor) else np.asarray(seed)
    tape.consumed = True

    grads: dict[int, np.ndarray] = {}
    shapes: dict[int, tuple] = {}
    for node, _, vjp in tape._entries:
        shapes[node] = vjp.out_shape
    if out_shape is None:
        out_shape = shapes[out_id]
    if tuple(seed_arr.shape) != tuple(out_shape):
        raise ShapeError("backward", seed_arr.shape, out_shape)
    grads[out_id] = seed_arr

    for node, input_ids, vjp in reversed(tape._entries):
        g = grads.pop(node, None)
        if g is None:
            continue
        input_grads = vjp(g)
        for iid, ig in zip(input_ids, input_grads):
            if iid is None or ig is None:
                continue
            if iid in grads:
                grads[iid] = grads[iid] + ig
            else:
                grads[iid] = ig

    result = {}
    for w in tape._watched:
        g = grads.get(w.id)
        result[w.id] = Tensor._wrap(g if g is not None else np.zeros(w.shape, dtype=w.dtype))
    tape._entries.clear()
    return result


class _VJP:
    """Adjoint closure plus the output shape it expects."""

    __slots__ = ("fn", "out_shape")

    def __init__(self, fn, out_shape):
        self.fn = fn
        self.out_shape = tuple(out_shape)

    def __call__(self, g):
        return self.fn(g)


def _vjp(fn, value):
    return _VJP(fn, value.shape)


# -- primitives --------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    A, B = a.data, b.data
    out = A @ B
    return _emit(out, (a, b), _vjp(lambda g: (g @ B.T, A.T @ g), out))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("add", a.shape, b.shape)
    out = a.data + b.data
    return _emit(out, (a, b), _vjp(lambda g: (g, g), out))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a bias vector along the last axis of a (N, K) tensor."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError("add_bias", x.shape, b.shape)
    out = x.data + b.data
    return _emit(out, (x, b), _vjp(lambda g: (g, g.sum(axis=0)), out))


def add_broadcast(x: Tensor, d: Tensor) -> Tensor:
    """Add one sample-shaped tensor ``d`` to every row of the batch ``x``."""
    if x.data.ndim != d.data.ndim + 1 or x.shape[1:] != d.shape:
        raise ShapeError("add_broadcast", x.shape, d.shape)
    out = x.data + d.data
    return _emit(out, (x, d), _vjp(lambda g: (g, g.sum(axis=0)), out))


def _pad_amount(padding: str, k: int) -> int:
    if padding == "valid":
        return 0
    if padding == "same":
        if k % 2 != 1:
            raise ShapeError("conv2d[same] needs odd kernel", (k, k))
        return k // 2
    raise ValueError(f"unknown padding {padding!r}")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: str = "valid") -> Tensor:
    """Stride-1 cross-correlation of (N, C, H, W) input with (O, C, kh, kw) kernels."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    if b is not None and (b.data.ndim != 1 or b.shape[0] != w.shape[0]):
        raise ShapeError("conv2d(bias)", w.shape, b.shape)
    N, C, H, W = x.shape
    O, _, kh, kw = w.shape
    ph, pw = _pad_amount(padding, kh), _pad_amount(padding, kw)
    X = x.data
    if ph or pw:
        X = np.pad(X, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    Hp, Wp = X.shape[2], X.shape[3]
    Ho, Wo = Hp - kh + 1, Wp - kw + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError("conv2d", x.shape, w.shape)
    win = sliding_window_view(X, (kh, kw), axis=(2, 3))  # N, C, Ho, Wo, kh, kw
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(N * Ho * Wo, C * kh * kw)
    Wm = w.data.reshape(O, C * kh * kw)
    out = cols @ Wm.T
    if b is not None:
        out = out + b.data
    out = out.reshape(N, Ho, Wo, O).transpose(0, 3, 1, 2)

    def vjp(g):
        gm = g.transpose(0, 2, 3, 1).reshape(N * Ho * Wo, O)
        gw = (gm.T @ cols).reshape(w.shape) if w.tape is not None else None
        gb = gm.sum(axis=0) if b is not None and b.tape is not None else None
        gx = None
        if x.tape is not None:
            gcols = (gm @ Wm).reshape(N, Ho, Wo, C, kh, kw)
            gxp = np.zeros((N, C, Hp, Wp), dtype=gcols.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + Ho, j:j + Wo] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, ph:ph + H, pw:pw + W]
        return (gx, gw, gb)

    return _emit(out, (x, w, b), _vjp(vjp, out))


def maxpool2x2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 max pooling; ties route the gradient to the first maximum
    in row-major window order."""
    if x.data.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError("maxpool2x2", x.shape)
    X = x.data
    quads = (X[:, :, 0::2, 0::2], X[:, :, 0::2, 1::2], X[:, :, 1::2, 0::2], X[:, :, 1::2, 1::2])
    out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))

    def vjp(g):
        gx = np.zeros(X.shape, dtype=g.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        for q, (di, dj) in zip(quads, ((0, 0), (0, 1), (1, 0), (1, 1))):
            hit = (q == out) & ~taken
            taken |= hit
            gx[:, :, di::2, dj::2] = g * hit
        return (gx,)

    return _emit(out, (x,), _vjp(vjp, out))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)
    return _emit(out, (x,), _vjp(lambda g: (g * mask,), out))


def flatten(x: Tensor) -> Tensor:
    """Collapse every axis after the first."""
    if x.data.ndim < 2:
        raise ShapeError("flatten", x.shape)
    shape = x.shape
    out = x.data.reshape(shape[0], -1)
    return _emit(out, (x,), _vjp(lambda g: (g.reshape(shape),), out))


def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax (values only, never traced)."""
    if logits.data.ndim != 2:
        raise ShapeError("softmax", logits.shape)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    return Tensor._wrap(e / e.sum(axis=1, keepdims=True))


def _check_labels(name, logits, labels):
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ShapeError(name, logits.shape, labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ShapeError(f"{name}: label out of range", logits.shape, labels.shape)
    return labels.astype(np.intp)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Per-sample cross-entropy of (N, K) logits against integer labels, shape (N,)."""
    labels = _check_labels("softmax_cross_entropy", logits, labels)
    Z = logits.data
    m = Z.max(axis=1, keepdims=True)
    e = np.exp(Z - m)
    s = e.sum(axis=1, keepdims=True)
    rows = np.arange(Z.shape[0])
    out = (np.log(s) + m)[:, 0] - Z[rows, labels]

    def vjp(g):
        p = e / s
        p[rows, labels] -= 1
        return (p * g[:, None],)

    return _emit(out, (logits,), _vjp(vjp, out))


def gather_labels(logits: Tensor, labels) -> Tensor:
    """Pick ``logits[i, labels[i]]`` for every row, shape (N,)."""
    labels = _check_labels("gather_labels", logits, labels)
    rows = np.arange(logits.shape[0])
    out = logits.data[rows, labels]
    shape = logits.shape

    def vjp(g):
        gz = np.zeros(shape, dtype=g.dtype)
        gz[rows, labels] = g
        return (gz,)

    return _emit(out, (logits,), _vjp(vjp, out))


def clip_max(x: Tensor, ceiling: float) -> Tensor:
    """Elementwise ``min(x, ceiling)``; entries at or above the ceiling pass no gradient."""
    mask = x.data < ceiling
    out = np.where(mask, x.data, ceiling).astype(x.dtype, copy=False)
    return _emit(out, (x,), _vjp(lambda g: (g * mask,), out))


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    out = x.data * c
    return _emit(out, (x,), _vjp(lambda g: (g * c,), out))


def tensor_sum(x: Tensor) -> Tensor:
    shape, dtype = x.shape, x.dtype
    out = np.asarray(x.data.sum(), dtype=dtype)
    return _emit(out, (x,), _vjp(lambda g: (np.broadcast_to(g, shape).astype(dtype),), out))


def tensor_mean(x: Tensor) -> Tensor:
    if x.size == 0:
        raise UsageError("mean of an empty tensor")
    return scale(tensor_sum(x), 1.0 / x.size)
