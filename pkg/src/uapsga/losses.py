"""Adversarial objectives maximised by the attacks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, UsageError
from .models import Network, predict_labels
from .tensor import Tape, Tensor

LOSS_KINDS = ("clipped-ce", "logit")


@dataclass(frozen=True)
class LossSpec:
    """Which objective to maximise and over which models.

    ``clipped-ce`` caps each sample's cross-entropy at ``beta`` (use
    ``float('inf')`` to disable the cap). ``logit`` is the negated logit of the
    clean-predicted class. Ensemble members are weighted equally.
    """

    ensemble: tuple[Network, ...]
    kind: str = "clipped-ce"
    beta: float = 9.0

    def __post_init__(self):
        if isinstance(self.ensemble, Network):
            object.__setattr__(self, "ensemble", (self.ensemble,))
        else:
            object.__setattr__(self, "ensemble", tuple(self.ensemble))
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss kind {self.kind!r}; choose from {LOSS_KINDS}")
        if not self.ensemble:
            raise ConfigError("loss ensemble must contain at least one network")
        if self.kind == "clipped-ce" and not self.beta > 0:
            raise ConfigError(f"beta must be positive, got {self.beta}")
        shapes = {tuple(net.input_shape) for net in self.ensemble}
        if len(shapes) != 1:
            raise ConfigError(f"ensemble members disagree on input shape: {sorted(shapes)}")

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.ensemble[0].input_shape)


def clean_labels(spec: LossSpec, images) -> list[np.ndarray]:
    """Each member's own predictions on the unperturbed images."""
    return [predict_labels(net, images) for net in spec.ensemble]


def _as_delta(delta) -> np.ndarray:
    """Keep float64 perturbations in float64; everything else becomes float32."""
    arr = delta.data if isinstance(delta, Tensor) else np.asarray(delta)
    return arr if arr.dtype == np.float64 else arr.astype(np.float32, copy=False)


def _per_model_labels(spec: LossSpec, labels, n: int) -> list[np.ndarray]:
    if isinstance(labels, np.ndarray) and labels.ndim == 1 or (
        not isinstance(labels, np.ndarray) and len(labels) and np.ndim(labels[0]) == 0
    ):
        per_model = [np.asarray(labels)] * len(spec.ensemble)
    else:
        per_model = [np.asarray(y) for y in labels]
        if len(per_model) != len(spec.ensemble):
            raise UsageError(f"{len(per_model)} label lists for {len(spec.ensemble)} models")
    for y in per_model:
        if y.shape != (n,):
            raise UsageError(f"expected {n} labels per model, got shape {y.shape}")
    return per_model


def _member_objective(net: Network, kind: str, beta: float, x: Tensor, y: np.ndarray) -> Tensor:
    logits = net.forward(x)
    if kind == "logit":
        per_sample = T.scale(T.gather_labels(logits, y), -1.0)
    else:
        per_sample = T.clip_max(T.softmax_cross_entropy(logits, y), beta)
    return T.tensor_mean(per_sample)


def loss_and_grad(spec: LossSpec, inputs, labels, delta) -> tuple[float, np.ndarray]:
    """Mean objective over the batch (and ensemble) at ``inputs + delta`` and its gradient in ``delta``."""
    inputs = np.asarray(inputs.data if isinstance(inputs, Tensor) else inputs, dtype=np.float32)
    if len(inputs) == 0:
        raise UsageError("loss over an empty batch")
    delta_arr = _as_delta(delta)
    per_model = _per_model_labels(spec, labels, len(inputs))
    x_const = Tensor(inputs)
    total_loss = 0.0
    total_grad = None
    for net, y in zip(spec.ensemble, per_model):
        tape = Tape()
        d = tape.watch(delta_arr)
        objective = _member_objective(net, spec.kind, spec.beta, T.add_broadcast(x_const, d), y)
        g = T.backward(tape, Tensor(np.ones((), dtype=objective.dtype), dtype=objective.dtype))[d.id].data
        total_loss += float(objective.data)
        total_grad = g if total_grad is None else total_grad + g
    scale = np.float32(1.0 / len(spec.ensemble))
    return total_loss / len(spec.ensemble), (total_grad * scale).astype(delta_arr.dtype, copy=False)


def batch_loss(spec: LossSpec, inputs, labels, delta) -> float:
    """Objective value only (no tape)."""
    inputs = np.asarray(inputs, dtype=np.float32)
    if len(inputs) == 0:
        raise UsageError("loss over an empty batch")
    delta_arr = _as_delta(delta)
    per_model = _per_model_labels(spec, labels, len(inputs))
    x = T.add_broadcast(Tensor(inputs), Tensor(delta_arr, dtype=delta_arr.dtype))
    values = [float(_member_objective(net, spec.kind, spec.beta, x, y).data) for net, y in zip(spec.ensemble, per_model)]
    return sum(values) / len(values)
