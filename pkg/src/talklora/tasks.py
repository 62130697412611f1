"""Synthetic desk-scale workloads and the training loop.

The stand-in for full-scale LLM fine-tuning: a frozen tanh-chained linear
stack is adapted on a clustered linear-regression task whose heterogeneity
(one ground-truth map per cluster) is what gives the router something to
specialize on.  Everything is deterministic given the seeds, down to byte
identity of the logs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .adapters import AdapterStack
from .autodiff import (
    AdamWHyper,
    AdamWState,
    LossSpec,
    NonFiniteLossError,
    backward,
    loss_value,
    model_forward,
    stack_adamw_step,
)
from .linalg import RngState


@dataclass(frozen=True)
class ClusterTaskSpec:
    """Mixture of linear regression problems.

    Sample inputs are cluster centers plus isotropic Gaussian noise; the
    target of a sample in cluster c is W_c applied to its (noisy) input.
    Centers and per-cluster maps may be given explicitly; by default they
    are drawn from named streams of ``seed``.
    """

    clusters: int
    input_dim: int
    output_dim: int
    samples_per_cluster: int
    noise_std: float = 0.0
    seed: int = 0
    centers: Optional[np.ndarray] = None  # (m, d)
    maps: Optional[np.ndarray] = None  # (m, k, d)

    def __post_init__(self):
        if self.clusters < 1 or self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("clusters and dims must be positive")
        if self.samples_per_cluster < 1:
            raise ValueError("samples_per_cluster must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")


@dataclass
class ClusterDataset:
    spec: ClusterTaskSpec
    x_train: np.ndarray
    y_train: np.ndarray
    cluster_train: np.ndarray
    x_eval: np.ndarray
    y_eval: np.ndarray
    cluster_eval: np.ndarray


def generate_cluster_task(spec: ClusterTaskSpec) -> ClusterDataset:
    """Deterministic dataset for a spec; train/eval split 90/10 by stride.

    Samples are laid out cluster-blocked, permuted once with a seeded
    stream, and every tenth sample of the permuted order goes to the eval
    split.
    """
    rng = RngState(spec.seed)
    m, d, k = spec.clusters, spec.input_dim, spec.output_dim
    if spec.centers is not None:
        centers = np.asarray(spec.centers, dtype=np.float64)
        if centers.shape != (m, d):
            raise ValueError(f"centers must have shape ({m}, {d}), got {centers.shape}")
    else:
        centers = 2.0 * rng.split("centers").generator().normal(size=(m, d))
    if spec.maps is not None:
        maps = np.asarray(spec.maps, dtype=np.float64)
        if maps.shape != (m, k, d):
            raise ValueError(f"maps must have shape ({m}, {k}, {d}), got {maps.shape}")
    else:
        maps = rng.split("maps").generator().normal(size=(m, k, d)) / math.sqrt(d)

    total = m * spec.samples_per_cluster
    cluster_ids = np.repeat(np.arange(m), spec.samples_per_cluster)
    noise = spec.noise_std * rng.split("noise").generator().normal(size=(total, d))
    x = centers[cluster_ids] + noise
    y = np.empty((total, k))
    for c in range(m):
        mask = cluster_ids == c
        y[mask] = x[mask] @ maps[c].T

    order = rng.split("order").generator().permutation(total)
    x, y, cluster_ids = x[order], y[order], cluster_ids[order]
    eval_mask = np.zeros(total, dtype=bool)
    eval_mask[::10] = True
    return ClusterDataset(
        spec=spec,
        x_train=x[~eval_mask],
        y_train=y[~eval_mask],
        cluster_train=cluster_ids[~eval_mask],
        x_eval=x[eval_mask],
        y_eval=y[eval_mask],
        cluster_eval=cluster_ids[eval_mask],
    )


@dataclass(frozen=True)
class TrainConfig:
    """Training protocol: AdamW with linear warmup then linear decay.

    Defaults mirror the reference fine-tuning recipe (batch 32, warmup
    100, dropout 0.05); ``dropout`` applies to the adapter-path input
    during training only.
    """

    epochs: int
    batch_size: int = 32
    lr: float = 3e-4
    warmup_steps: int = 100
    eval_every: int = 50
    seed: int = 0
    lr_schedule: str = "linear"
    weight_decay: float = 0.0
    dropout: float = 0.05

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("epochs, batch_size and eval_every must be positive")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be positive")
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")
        if self.lr_schedule != "linear":
            raise ValueError(f"unsupported lr_schedule {self.lr_schedule!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


class DivergenceError(RuntimeError):
    """Training loss became non-finite; carries the offending step."""

    def __init__(self, step: int):
        self.step = step
        super().__init__(f"training diverged (non-finite loss) at step {step}")


@dataclass
class StepRecord:
    step: int
    lr: float
    loss: float


@dataclass
class RoutingSnapshot:
    step: int
    eval_loss: float
    mean_gates: Optional[np.ndarray]  # (layers, experts); None for plain LoRA


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    checkpoint: Optional[str] = None


def _schedule_lr(step: int, total: int, tc: TrainConfig) -> float:
    if step <= tc.warmup_steps:
        return tc.lr * step / tc.warmup_steps
    if total <= tc.warmup_steps:
        return tc.lr
    return tc.lr * (total - step) / (total - tc.warmup_steps)


def _mean_gates(stack: AdapterStack, frozen_layers, x: np.ndarray):
    _, caches = model_forward(frozen_layers, stack, x)
    if caches[0].gates is None:
        return None
    return np.stack([cache.gates.mean(axis=0) for cache in caches], axis=0)


def _dropout_scales(frozen_layers, batch: int, p: float, rng: RngState, step: int):
    if p == 0.0:
        return None
    gen = rng.split(f"dropout.step{step}").generator()
    return [
        (gen.uniform(size=(batch, fl.d_in)) >= p) / (1.0 - p) for fl in frozen_layers
    ]


def train(
    stack: AdapterStack,
    frozen_layers: list,
    data: ClusterDataset,
    tc: TrainConfig,
    loss: LossSpec,
) -> TrainLog:
    """AdamW training with per-step loss logging and periodic routing snapshots.

    Deterministic given the config seed and the dataset; aborts with
    :class:`DivergenceError` if the loss ever goes non-finite.  The frozen
    weights and the dataset are never mutated.
    """
    rng = RngState(tc.seed)
    n_train = data.x_train.shape[0]
    if n_train == 0:
        raise ValueError("training split is empty")
    steps_per_epoch = math.ceil(n_train / tc.batch_size)
    total_steps = tc.epochs * steps_per_epoch
    state = AdamWState(stack)
    log = TrainLog()
    step = 0
    for epoch in range(tc.epochs):
        perm = rng.split(f"shuffle.epoch{epoch}").generator().permutation(n_train)
        for b in range(steps_per_epoch):
            idx = perm[b * tc.batch_size : (b + 1) * tc.batch_size]
            xb, yb = data.x_train[idx], data.y_train[idx]
            step += 1
            lr_t = _schedule_lr(step, total_steps, tc)
            scales = _dropout_scales(frozen_layers, xb.shape[0], tc.dropout, rng, step)
            try:
                loss_val, grads = backward(stack, frozen_layers, (xb, yb), loss, scales)
            except NonFiniteLossError as exc:
                raise DivergenceError(step) from exc
            hyper = AdamWHyper(lr=lr_t, weight_decay=tc.weight_decay)
            stack_adamw_step(stack, grads, state, hyper)
            log.steps.append(StepRecord(step=step, lr=lr_t, loss=loss_val))
            if step % tc.eval_every == 0 or step == total_steps:
                eval_loss = evaluate(stack, frozen_layers, data, loss)
                log.snapshots.append(
                    RoutingSnapshot(
                        step=step,
                        eval_loss=eval_loss,
                        mean_gates=_mean_gates(stack, frozen_layers, data.x_eval),
                    )
                )
    return log


def evaluate(
    stack: AdapterStack, frozen_layers: list, data: ClusterDataset, loss: LossSpec
) -> float:
    """Mean loss over the eval split; pure, no dropout, no mutation."""
    if data.x_eval.shape[0] == 0:
        raise ValueError("eval split is empty")
    z, _ = model_forward(frozen_layers, stack, data.x_eval)
    return loss_value(z, data.y_eval, loss)


def trainlog_to_dict(log: TrainLog) -> dict:
    """JSON-ready view of a training log."""
    return {
        "schema": "trainlog-v1",
        "steps": [
            {"step": s.step, "lr": s.lr, "loss": s.loss} for s in log.steps
        ],
        "snapshots": [
            {
                "step": snap.step,
                "eval_loss": snap.eval_loss,
                "mean_gates": None
                if snap.mean_gates is None
                else snap.mean_gates.tolist(),
            }
            for snap in log.snapshots
        ],
        "checkpoint": log.checkpoint,
    }


def loss_csv_lines(log: TrainLog) -> list:
    """Per-step loss trace; full float precision for byte-stable output."""
    lines = ["#schema=loss-v1", "step,lr,loss"]
    for s in log.steps:
        lines.append(f"{s.step},{s.lr:.17g},{s.loss:.17g}")
    return lines


def routing_csv_lines(log: TrainLog) -> list:
    """Routing snapshots as (step, layer, expert, mean_gate) rows."""
    lines = ["#schema=routing-v1", "step,layer,expert,mean_gate"]
    for snap in log.snapshots:
        if snap.mean_gates is None:
            continue
        layers, experts = snap.mean_gates.shape
        for layer in range(layers):
            for expert in range(experts):
                lines.append(
                    f"{snap.step},{layer},{expert},"
                    f"{snap.mean_gates[layer, expert]:.17g}"
                )
    return lines
