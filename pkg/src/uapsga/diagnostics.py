"""Measurement instruments: fooling ratio, gradient cosine similarity,
sign-operation accounting and the sign-quantisation vanishing toy."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .data import Dataset
from .errors import DataError, ShapeError, UsageError
from .models import Network, predict_labels

METRICS_HEADER = ["run_id", "step", "loss", "outer_sign_count", "cosine_sim"]
EVAL_HEADER = ["model", "fr", "clean_acc", "n"]

# The two consecutive gradients from the vanishing example (four coordinates shown).
TOY_GRADIENT_M = (-0.01, 0.10, 0.05, 0.70)
TOY_GRADIENT_NEXT = (1.00, 0.02, 0.30, -0.01)


@dataclass(frozen=True)
class MetricsRecord:
    run_id: str
    step: int
    loss: float
    outer_sign_count: int
    cosine_sim: float | None
    timestamp: float = 0.0

    def __post_init__(self):
        if self.cosine_sim is not None and not -1.0 <= self.cosine_sim <= 1.0:
            raise ValueError(f"cosine similarity {self.cosine_sim} outside [-1, 1]")


@dataclass(frozen=True)
class EvalReport:
    model_id: str
    fooling_ratio: float
    n_eval: int
    clean_accuracy: float


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two tensors; 0 when both are zero."""
    a = np.asarray(getattr(a, "data", a), dtype=np.float64).ravel()
    b = np.asarray(getattr(b, "data", b), dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError("cosine_similarity", a.shape, b.shape)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def stability_probe(gradients: Sequence) -> np.ndarray:
    """Cosine similarity of every consecutive pair of update gradients, in step order."""
    if len(gradients) < 2:
        raise UsageError("stability probe needs at least two gradients")
    return np.array([cosine_similarity(gradients[i - 1], gradients[i]) for i in range(1, len(gradients))])


def adversarial_images(images: np.ndarray, delta) -> np.ndarray:
    """``clamp(x + delta, 0, 1)`` for a batch of images."""
    d = np.asarray(getattr(delta, "data", delta), dtype=np.float32)
    return np.clip(np.asarray(images, dtype=np.float32) + d, 0.0, 1.0)


def fooling_ratio(net: Network, eval_set, delta, model_id: str | None = None,
                  clean_predictions: np.ndarray | None = None) -> EvalReport:
    """Fraction of samples whose predicted label changes once ``delta`` is added."""
    if isinstance(eval_set, Dataset):
        images, truth = eval_set.images, eval_set.labels
    else:
        images, truth = np.asarray(eval_set, dtype=np.float32), None
    if len(images) == 0:
        raise DataError("fooling ratio over an empty evaluation set")
    d = np.asarray(getattr(delta, "data", delta), dtype=np.float32)
    if d.shape != tuple(net.input_shape):
        raise ShapeError("fooling_ratio", d.shape, net.input_shape)
    clean = predict_labels(net, images) if clean_predictions is None else np.asarray(clean_predictions)
    adv = predict_labels(net, adversarial_images(images, d))
    clean_acc = float(np.mean(clean == truth)) if truth is not None else math.nan
    return EvalReport(model_id or net.arch, float(np.mean(adv != clean)), len(images), clean_acc)


@dataclass(frozen=True)
class VanishingReport:
    grad_m: np.ndarray
    grad_next: np.ndarray
    sequential: np.ndarray  # accumulated perturbation, units of alpha
    aggregated_gradient: np.ndarray
    aggregated: np.ndarray  # single aggregated update, units of alpha

    @property
    def vanished_sequential(self) -> int:
        return int(np.count_nonzero(self.sequential == 0))

    @property
    def vanished_aggregated(self) -> int:
        return int(np.count_nonzero(self.aggregated == 0))

    def rows(self):
        for i in range(len(self.grad_m)):
            yield (i, float(self.grad_m[i]), float(self.grad_next[i]), int(self.sequential[i]),
                   round(float(self.aggregated_gradient[i]), 10), int(self.aggregated[i]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["coord", "g_m", "g_next", "sequential_alpha", "g_aggs", "aggregated_alpha"])
            w.writerows(self.rows())

    def format(self) -> str:
        seq = ", ".join(str(int(v)) for v in self.sequential)
        agg = ", ".join(str(int(v)) for v in self.aggregated)
        gsum = ", ".join(f"{v:.2f}" for v in self.aggregated_gradient)
        return (
            f"sequential sign updates:  delta = alpha * [{seq}]  ({self.vanished_sequential} coordinates vanished)\n"
            f"aggregated gradient:      g_aggs = [{gsum}]\n"
            f"aggregated sign update:   delta = alpha * [{agg}]  ({self.vanished_aggregated} coordinates vanished)"
        )


def vanishing_demo(grad_m: Iterable[float] = TOY_GRADIENT_M,
                   grad_next: Iterable[float] = TOY_GRADIENT_NEXT) -> VanishingReport:
    """Quantise-then-accumulate vs. aggregate-then-quantise on two gradients.

    Runs both through the same ``sign``/``clip_box`` operators the attacks use,
    with unit step and a box wide enough never to bind.
    """
    from .attacks import clip_box, sign

    g1 = np.asarray(list(grad_m), dtype=np.float64)
    g2 = np.asarray(list(grad_next), dtype=np.float64)
    delta = np.zeros_like(g1)
    for g in (g1, g2):
        delta = clip_box(delta + sign(g), 2.0)
    aggregate = g1 + g2
    update = clip_box(np.zeros_like(g1) + sign(aggregate), 2.0)
    return VanishingReport(g1, g2, delta.astype(np.int64), aggregate, update.astype(np.int64))


# -- CSV ---------------------------------------------------------------------


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_metrics_csv(path, records: Iterable[MetricsRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in records:
            w.writerow([r.run_id, r.step, _fmt(float(r.loss)), r.outer_sign_count,
                        _fmt(None if r.cosine_sim is None else float(r.cosine_sim))])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != METRICS_HEADER:
            raise DataError(f"unexpected metrics header {reader.fieldnames}")
        return [
            {
                "run_id": row["run_id"],
                "step": int(row["step"]),
                "loss": float(row["loss"]),
                "outer_sign_count": int(row["outer_sign_count"]),
                "cosine_sim": float(row["cosine_sim"]) if row["cosine_sim"] else None,
            }
            for row in reader
        ]


def write_eval_csv(path, reports: Iterable[EvalReport], white_box=None) -> None:
    """Evaluation rows; white-box model names (one id or several) get a ``*`` suffix."""
    starred = {white_box} if isinstance(white_box, str) else set(white_box or ())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_HEADER)
        for r in reports:
            name = r.model_id + ("*" if r.model_id in starred else "")
            w.writerow([name, _fmt(r.fooling_ratio), _fmt(r.clean_accuracy), r.n_eval])
