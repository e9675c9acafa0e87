"""Universal perturbation attacks: SPGD, stochastic gradient aggregation (SGA)
and the perturbation-aggregation ablation, with optional momentum or Nesterov
look-ahead.

All variants share :func:`run_attack`. The gradient source is an *objective*:
a callable ``objective(indices, delta) -> (loss, grad)`` returning the mean
loss over the samples at ``indices`` evaluated at ``images + delta`` and its
gradient with respect to ``delta``. By default it is built from a
:class:`~uapsga.losses.LossSpec`; tests inject synthetic ones.
"""

from __future__ import annotations

import math
import struct
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .data import Dataset, plan_batches
from .diagnostics import MetricsRecord, cosine_similarity
from .errors import ConfigError, IntegrityError, FormatError, NumericError
from .losses import LossSpec, clean_labels, loss_and_grad
from .tensor import Tensor

VARIANTS = ("spgd", "sga", "sga-perturbation-aggregation")
MOMENTUM_KINDS = ("none", "momentum", "nesterov")
PLACEMENTS = ("outer", "inner")

UAP_MAGIC = b"UAPD"
UAP_VERSION = 1

Objective = Callable[[np.ndarray, np.ndarray], "tuple[float, np.ndarray]"]


def _f32(x: float) -> float:
    return float(np.float32(x))


# -- elementary update operators ---------------------------------------------


def sign(t):
    """Elementwise sign with ``sign(0) == 0``; NaN is rejected."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if np.isnan(arr).any():
        raise NumericError("sign() received NaN")
    out = np.sign(arr)
    return Tensor(out, dtype=out.dtype) if isinstance(t, Tensor) else out


def clip_box(delta, epsilon: float):
    """Project onto the l-inf ball of radius ``epsilon`` by elementwise clamping.

    The bound is rounded down to the array's precision so the result never
    exceeds ``epsilon``.
    """
    arr = delta.data if isinstance(delta, Tensor) else np.asarray(delta)
    if np.isnan(arr).any():
        raise NumericError("clip_box() received NaN")
    dtype = arr.dtype if np.issubdtype(arr.dtype, np.floating) else np.dtype(np.float32)
    bound = dtype.type(epsilon)
    if float(bound) > epsilon:
        bound = np.nextafter(bound, dtype.type(0))
    out = np.clip(arr, -bound, bound).astype(dtype, copy=False)
    return Tensor(out, dtype=out.dtype) if isinstance(delta, Tensor) else out


def momentum_wrap(grad, velocity, decay: float):
    """One accumulation step ``v = decay * v + grad / ||grad||_1``.

    Returns ``(direction, new_velocity)``; the direction is the new velocity.
    An all-zero gradient is accumulated unnormalised (i.e. adds nothing).
    """
    g = np.asarray(grad)
    v = np.asarray(velocity)
    if g.shape != v.shape:
        raise ConfigError(f"gradient shape {g.shape} != velocity shape {v.shape}")
    if not 0 <= decay < 1:
        raise ConfigError(f"momentum decay must be in [0, 1), got {decay}")
    l1 = np.abs(g).sum(dtype=np.float64)
    normed = g if l1 == 0 else (g / g.dtype.type(l1))
    new_v = (v.dtype.type(decay) * v + normed).astype(v.dtype, copy=False)
    return new_v, new_v


# -- state and configuration -------------------------------------------------


@dataclass
class PerturbationState:
    delta: np.ndarray
    epsilon: float
    alpha: float

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.float32)
        self.epsilon, self.alpha = _f32(self.epsilon), _f32(self.alpha)
        if np.isnan(self.delta).any():
            raise NumericError("perturbation contains NaN")
        if self.delta.size and float(np.abs(self.delta).max()) > self.epsilon:
            raise IntegrityError(
                f"perturbation leaves the epsilon box: max |delta| = {np.abs(self.delta).max()!r} > {self.epsilon!r}"
            )

    @property
    def shape(self):
        return self.delta.shape


@dataclass(frozen=True)
class AttackConfig:
    """Hyper-parameters of one attack run.

    ``large_batch`` is the SPGD batch size and the SGA outer batch. The inner
    iteration count is ``traversals * large_batch / small_batch`` unless
    ``inner_iters`` is given explicitly. ``epsilon`` and ``alpha`` are stored
    at float32 precision.
    """

    variant: str = "sga"
    momentum: str = "none"
    decay: float = 0.9
    epsilon: float = 10 / 255
    alpha: float = 1 / 255
    epochs: int = 20
    large_batch: int = 250
    small_batch: int = 10
    traversals: int | None = 4
    inner_iters: int | None = None
    momentum_placement: str = "outer"
    seed: int = 0
    run_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "epsilon", _f32(self.epsilon))
        object.__setattr__(self, "alpha", _f32(self.alpha))
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}", key="variant")
        if self.momentum not in MOMENTUM_KINDS:
            raise ConfigError(f"unknown momentum {self.momentum!r}; choose from {MOMENTUM_KINDS}", key="momentum")
        if self.momentum_placement not in PLACEMENTS:
            raise ConfigError(f"momentum placement must be one of {PLACEMENTS}", key="momentum_placement")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive", key="epsilon")
        if not self.alpha >= 0:
            raise ConfigError("alpha must be non-negative", key="alpha")
        if not 0 <= self.decay < 1:
            raise ConfigError("decay must lie in [0, 1)", key="decay")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1", key="epochs")
        if self.large_batch < 1 or self.small_batch < 1:
            raise ConfigError("batch sizes must be positive")
        if self.variant != "spgd":
            if self.small_batch > self.large_batch:
                raise ConfigError(f"small batch {self.small_batch} exceeds large batch {self.large_batch}",
                                  key="small_batch")
            if self.large_batch % self.small_batch:
                raise ConfigError(f"small batch {self.small_batch} must divide large batch {self.large_batch}",
                                  key="small_batch")
            if self.inner_iters is None:
                if self.traversals is None or self.traversals < 1:
                    raise ConfigError("traversals must be >= 1", key="traversals")
            elif self.inner_iters < 1:
                raise ConfigError("inner_iters must be >= 1", key="inner_iters")
            if self.variant == "sga-perturbation-aggregation" and self.momentum != "none" \
                    and self.momentum_placement == "outer":
                raise ConfigError("perturbation aggregation has no outer update to apply momentum to",
                                  key="momentum_placement")

    @property
    def inner_iterations(self) -> int:
        """M for a full large batch."""
        if self.variant == "spgd":
            return 0
        if self.inner_iters is not None:
            return self.inner_iters
        return self.traversals * self.large_batch // self.small_batch

    def with_(self, **changes) -> "AttackConfig":
        return replace(self, **changes)

    def expected_outer_signs(self, n: int) -> int:
        if self.variant == "sga-perturbation-aggregation":
            return 0
        return self.epochs * math.ceil(n / self.large_batch)


@dataclass
class AttackResult:
    state: PerturbationState
    metrics: list[MetricsRecord]
    outer_sign_count: int
    inner_sign_count: int
    update_gradients: list[np.ndarray] = field(default_factory=list)
    deltas: list[np.ndarray] = field(default_factory=list)

    @property
    def delta(self) -> np.ndarray:
        return self.state.delta


# -- engine ------------------------------------------------------------------


def make_objective(loss: LossSpec, images: np.ndarray, labels=None) -> Objective:
    """Objective over ``images`` for ``loss``; labels default to each model's clean predictions."""
    images = np.asarray(images, dtype=np.float32)
    if labels is None:
        labels = clean_labels(loss, images)
    elif isinstance(labels, np.ndarray) and labels.ndim == 1:
        labels = [labels] * len(loss.ensemble)
    labels = [np.asarray(y) for y in labels]

    def objective(indices, delta):
        return loss_and_grad(loss, images[indices], [y[indices] for y in labels], delta)

    return objective


def _resolve(dataset, loss, labels, objective):
    images = dataset.images if isinstance(dataset, Dataset) else np.asarray(dataset, dtype=np.float32)
    if len(images) == 0:
        raise ConfigError("attack dataset is empty")
    if objective is None:
        if loss is None:
            raise ConfigError("need a LossSpec or an explicit objective")
        if tuple(images.shape[1:]) != loss.input_shape:
            raise ConfigError(f"dataset samples {images.shape[1:]} do not match model input {loss.input_shape}")
        objective = make_objective(loss, images, labels)
    return images, objective


def run_attack(config: AttackConfig, dataset, loss: LossSpec | None = None, *, labels=None,
               objective: Objective | None = None, record: bool = False,
               delta_shape: tuple[int, ...] | None = None) -> AttackResult:
    """Craft one universal perturbation according to ``config.variant``.

    With ``record=True`` the result keeps every update gradient (the batch
    mean for SPGD, the aggregate for SGA) and ``delta`` after every outer step.
    """
    images, objective = _resolve(dataset, loss, labels, objective)
    n = len(images)
    shape = tuple(delta_shape) if delta_shape is not None else tuple(images.shape[1:])
    eps, alpha, mu = config.epsilon, np.float32(config.alpha), np.float32(config.decay)
    variant = config.variant
    nesterov = config.momentum == "nesterov"
    use_momentum = config.momentum != "none"
    outer_momentum = use_momentum and config.momentum_placement == "outer"
    inner_momentum = use_momentum and config.momentum_placement == "inner"

    plan_cfg = config.with_(small_batch=config.large_batch, traversals=1, inner_iters=None) \
        if variant == "spgd" else config
    plan = plan_batches(n, plan_cfg)

    delta = np.zeros(shape, dtype=np.float32)
    velocity = np.zeros(shape, dtype=np.float32)
    inner_velocity = np.zeros(shape, dtype=np.float32)
    metrics: list[MetricsRecord] = []
    grads_out: list[np.ndarray] = []
    deltas_out: list[np.ndarray] = []
    outer_signs = inner_signs = 0
    previous = None

    for step_no, outer in enumerate(plan):
        if variant == "spgd":
            point = clip_box(delta + alpha * mu * velocity, eps) if (nesterov and outer_momentum) else delta
            step_loss, grad = objective(outer.batch, point)
            update_grad = np.asarray(grad, dtype=np.float32)
            direction = update_grad
            if outer_momentum:
                direction, velocity = momentum_wrap(update_grad, velocity, mu)
            delta = clip_box(delta + alpha * sign(direction), eps)
            outer_signs += 1
        else:
            inner = clip_box(delta + alpha * mu * velocity, eps) if (nesterov and outer_momentum) else delta
            aggregate = np.zeros(shape, dtype=np.float32)
            inner_losses = []
            for chunk in outer.inner:
                point = clip_box(inner + alpha * mu * inner_velocity, eps) if (nesterov and inner_momentum) else inner
                loss_m, g_m = objective(chunk, point)
                g_m = np.asarray(g_m, dtype=np.float32)
                direction = g_m
                if inner_momentum:
                    direction, inner_velocity = momentum_wrap(g_m, inner_velocity, mu)
                inner = clip_box(inner + alpha * sign(direction), eps)
                inner_signs += 1
                aggregate += g_m
                inner_losses.append(loss_m)
            step_loss = float(np.mean(inner_losses))
            update_grad = aggregate
            if variant == "sga":
                direction = aggregate
                if outer_momentum:
                    direction, velocity = momentum_wrap(aggregate, velocity, mu)
                delta = clip_box(delta + alpha * sign(direction), eps)
                outer_signs += 1
            else:
                delta = inner
        if not np.isfinite(step_loss):
            raise NumericError(f"non-finite loss at step {step_no}")
        cos = cosine_similarity(previous, update_grad) if previous is not None else None
        previous = update_grad
        metrics.append(MetricsRecord(config.run_id, step_no, float(step_loss), outer_signs, cos, time.time()))
        if record:
            grads_out.append(update_grad.copy())
            deltas_out.append(delta.copy())

    state = PerturbationState(delta, eps, config.alpha)
    return AttackResult(state, metrics, outer_signs, inner_signs, grads_out, deltas_out)


def _require(config: AttackConfig, variant: str):
    if config.variant != variant:
        raise ConfigError(f"expected variant {variant!r}, config says {config.variant!r}", key="variant")


def spgd_attack(config: AttackConfig, dataset, loss: LossSpec | None = None, **kwargs) -> AttackResult:
    _require(config, "spgd")
    return run_attack(config, dataset, loss, **kwargs)


def sga_attack(config: AttackConfig, dataset, loss: LossSpec | None = None, **kwargs) -> AttackResult:
    _require(config, "sga")
    return run_attack(config, dataset, loss, **kwargs)


def perturbation_aggregation_attack(config: AttackConfig, dataset, loss: LossSpec | None = None,
                                    **kwargs) -> AttackResult:
    _require(config, "sga-perturbation-aggregation")
    return run_attack(config, dataset, loss, **kwargs)


# -- perturbation files ------------------------------------------------------


def save_uap(state: PerturbationState, path) -> None:
    d = np.asarray(state.delta, dtype="<f4")
    header = UAP_MAGIC + struct.pack("<I", UAP_VERSION) + struct.pack("<2f", state.epsilon, state.alpha)
    header += struct.pack("<I", d.ndim) + struct.pack(f"<{d.ndim}I", *d.shape)
    Path(path).write_bytes(header + d.tobytes())


def load_uap(path) -> PerturbationState:
    """Read a perturbation file, refusing any payload outside its recorded epsilon box."""
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != UAP_MAGIC:
        raise FormatError("not a UAPD perturbation file (bad magic)", path, 0)
    if len(buf) < 20:
        raise FormatError("truncated header", path, len(buf))
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != UAP_VERSION:
        raise FormatError(f"unsupported perturbation file version {version}", path, 4)
    eps, alpha = struct.unpack_from("<2f", buf, 8)
    (rank,) = struct.unpack_from("<I", buf, 16)
    pos = 20
    if len(buf) < pos + 4 * rank:
        raise FormatError("truncated shape", path, len(buf))
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    count = math.prod(dims)
    if len(buf) != pos + 4 * count:
        raise FormatError(f"payload has {len(buf) - pos} bytes, shape {dims} needs {4 * count}", path, pos)
    delta = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
    if not np.isfinite(delta).all():
        raise IntegrityError("perturbation payload is not finite", path, pos)
    over = np.abs(delta) > np.float32(eps)
    if over.any():
        first = int(np.flatnonzero(over.ravel())[0])
        raise IntegrityError(f"component {first} exceeds recorded epsilon {eps}", path, pos + 4 * first)
    return PerturbationState(delta, float(eps), float(alpha))


def export_pgm(state: PerturbationState, path) -> None:
    """Write ``(delta + eps) / (2 eps) * 255`` (rounded half-up) as binary PGM/PPM."""
    d = np.asarray(state.delta, dtype=np.float64)
    scaled = np.floor((d + state.epsilon) / (2 * state.epsilon) * 255 + 0.5)
    pix = np.clip(scaled, 0, 255).astype(np.uint8)
    if pix.ndim == 3 and pix.shape[0] == 1:
        pix = pix[0]
    if pix.ndim == 2:
        h, w = pix.shape
        Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + pix.tobytes())
    elif pix.ndim == 3 and pix.shape[0] == 3:
        h, w = pix.shape[1:]
        Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + pix.transpose(1, 2, 0).tobytes())
    else:
        raise FormatError(f"cannot render perturbation of shape {pix.shape} as an image", path)
