"""Universal adversarial perturbations via stochastic gradient aggregation."""

from .attacks import (
    AttackConfig,
    AttackResult,
    PerturbationState,
    clip_box,
    load_uap,
    momentum_wrap,
    perturbation_aggregation_attack,
    run_attack,
    save_uap,
    sga_attack,
    sign,
    spgd_attack,
)
from .data import BatchPlan, Dataset, load_idx, make_splits, plan_batches, synth_blobs
from .diagnostics import (
    EvalReport,
    MetricsRecord,
    cosine_similarity,
    fooling_ratio,
    stability_probe,
    vanishing_demo,
)
from .losses import LossSpec, loss_and_grad
from .models import Network, build, load, predict_labels, save, train
from .tensor import Tape, Tensor, backward

__version__ = "0.1.0"
