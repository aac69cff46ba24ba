"""Supervised training: masked cross-entropy, AdamW, warmup-cosine, clipping."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import (DatasetStats, SequenceBatch, Trajectory, fit_stats,
                      gather_windows, window_index)
from .model import ModelConfig, forward, init_params

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 1e-4
    warmup_steps: int = 1000
    epochs: int = 100
    batch_size: int = 64
    clip_norm: float = 1.0
    seed: int = 0
    eval_every: int = 1          # epoch-summary logging cadence
    window_stride: int = 1

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.clip_norm <= 0:
            raise ValueError("lr, batch_size and clip_norm must be positive")
        if self.epochs < 0 or self.warmup_steps < 0 or self.window_stride < 1:
            raise ValueError("epochs and warmup_steps must be >= 0, stride >= 1")


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)    # dicts: step, loss, lr, grad_norm
    epochs: list = field(default_factory=list)   # dicts: epoch, loss, accuracy

    def record_step(self, step: int, loss: float, lr: float, grad_norm: float) -> None:
        if self.steps and step <= self.steps[-1]["step"]:
            raise ValueError("step counter must be monotone")
        self.steps.append({"step": step, "loss": loss, "lr": lr, "grad_norm": grad_norm})


@dataclass
class TrainResult:
    best_params: dict
    final_params: dict
    log: TrainLog
    stats: DatasetStats


def decays(name: str, tensor: Tensor) -> bool:
    """Weight matrices decay; embeddings, biases and norm gains do not."""
    return tensor.data.ndim >= 2 and "embed" not in name


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def global_norm(grads: dict) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    return math.sqrt(total)


def clip_gradients(grads: dict, max_norm: float) -> float:
    """Scale all grads in place to a global norm of ``max_norm``; returns the pre-clip norm."""
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def learning_rate(config: TrainConfig, step: int, total_steps: int) -> float:
    """base * min(step / warmup, cosine), annealing to zero at the last step."""
    warm = step / config.warmup_steps if config.warmup_steps > 0 else 1.0
    span = max(1, total_steps - config.warmup_steps)
    progress = min(max((step - config.warmup_steps) / span, 0.0), 1.0)
    cosine = 0.5 * (1.0 + math.cos(math.pi * progress))
    return config.lr * min(warm, cosine)


def adamw_update(params: dict, grads: dict, state: AdamState,
                 config: TrainConfig, lr: float) -> None:
    """One decoupled-decay Adam step over every parameter with a gradient."""
    beta1, beta2 = config.betas
    state.step += 1
    t = state.step
    for name, tensor in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.setdefault(name, np.zeros_like(tensor.data))
        v = state.v.setdefault(name, np.zeros_like(tensor.data))
        m += (1.0 - beta1) * (g - m)
        v += (1.0 - beta2) * (g * g - v)
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        if decays(name, tensor):
            tensor.data -= lr * config.weight_decay * tensor.data
        tensor.data -= lr * m_hat / (np.sqrt(v_hat) + 1e-8)


def masked_mean_ce(logits: Tensor, actions: np.ndarray, mask: np.ndarray) -> Tensor:
    """Cross-entropy averaged over real (step, agent) elements only.

    ``mask`` is (B, K) over steps; every agent of a masked step is excluded.
    """
    weight = float(mask.sum())
    if weight == 0.0:
        raise ValueError("batch is fully padding; nothing to train on")
    ce = ad.cross_entropy(logits, actions)
    masked = ad.mul(ce, mask[:, :, None])
    return ad.mul(ad.sum(masked), 1.0 / (weight * np.asarray(actions).shape[-1]))


def batch_loss(params: dict, model_config: ModelConfig, batch: SequenceBatch,
               r_max: float, adjacency: np.ndarray,
               rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
    """Masked mean cross-entropy of the model on one window batch, plus logits."""
    logits = forward(params, model_config, batch.observations, batch.actions,
                     batch.rtg / r_max, adjacency, rng=rng)
    return masked_mean_ce(logits, batch.actions, batch.mask), logits


def masked_accuracy(logits: np.ndarray, actions: np.ndarray, mask: np.ndarray) -> float:
    hit = (np.argmax(logits, axis=-1) == actions)[mask.astype(bool)]
    return float(hit.mean()) if hit.size else float("nan")


def train_step(params: dict, model_config: ModelConfig, config: TrainConfig,
               batch: SequenceBatch, r_max: float, adjacency: np.ndarray,
               state: AdamState, total_steps: int,
               rng: np.random.Generator | None = None) -> tuple[float, float, float]:
    """Forward, backward, clip, AdamW; returns (loss, pre-clip grad norm, lr)."""
    with ad.Tape() as tape:
        loss, logits = batch_loss(params, model_config, batch, r_max, adjacency, rng)
        value = float(loss.data)
        if not math.isfinite(value):
            raise RuntimeError(f"non-finite loss {value} at optimizer step "
                               f"{state.step + 1}; aborting before the update")
        for tensor in params.values():
            tensor.zero_grad()
        tape.backward(loss)
    grads = {name: tensor.grad for name, tensor in params.items()
             if tensor.grad is not None}
    norm = clip_gradients(grads, config.clip_norm)
    lr = learning_rate(config, state.step + 1, total_steps)
    adamw_update(params, grads, state, config, lr)
    return value, norm, lr


def clone_params(params: dict) -> dict:
    return {name: Tensor(tensor.data.copy(), requires_grad=True)
            for name, tensor in params.items()}


def fit(trajectories: Sequence[Trajectory], model_config: ModelConfig,
        config: TrainConfig, adjacency: np.ndarray,
        stats: DatasetStats | None = None,
        params: dict | None = None) -> TrainResult:
    """Seeded epochs of shuffled window batches; tracks best-loss parameters."""
    if not trajectories:
        raise ValueError("cannot fit on an empty dataset")
    stats = stats or fit_stats(trajectories)
    params = params if params is not None else init_params(model_config, config.seed)
    rows = window_index(trajectories, model_config.context, config.window_stride)
    steps_per_epoch = math.ceil(len(rows) / config.batch_size)
    total_steps = max(1, config.epochs * steps_per_epoch)
    shuffle_rng = np.random.default_rng(config.seed)
    state = AdamState()
    train_log = TrainLog()
    best = clone_params(params)
    best_loss = math.inf
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(rows))
        losses, hits, weights = [], [], []
        for start in range(0, len(rows), config.batch_size):
            batch = gather_windows(trajectories, rows[order[start:start + config.batch_size]],
                                   model_config.context)
            drop_rng = np.random.default_rng([config.seed, state.step]) \
                if model_config.dropout > 0 else None
            value, norm, lr = train_step(params, model_config, config, batch,
                                         stats.r_max, adjacency, state, total_steps,
                                         rng=drop_rng)
            train_log.record_step(state.step, value, lr, norm)
            losses.append(value)
            weights.append(batch.mask.sum() * batch.num_agents)
        epoch_loss = float(np.average(losses, weights=weights))
        accuracy = _epoch_accuracy(params, model_config, trajectories, rows,
                                   stats.r_max, adjacency) \
            if config.eval_every and (epoch + 1) % config.eval_every == 0 else float("nan")
        train_log.epochs.append({"epoch": epoch, "loss": epoch_loss, "accuracy": accuracy})
        if epoch_loss < best_loss:
            best_loss = epoch_loss
            best = clone_params(params)
        log.info("epoch %d: loss %.4f accuracy %s lr %.2e", epoch, epoch_loss,
                 f"{accuracy:.3f}" if math.isfinite(accuracy) else "-",
                 learning_rate(config, state.step, total_steps))
    return TrainResult(best, params, train_log, stats)


def _epoch_accuracy(params, model_config, trajectories, rows, r_max, adjacency,
                    sample: int = 512) -> float:
    picks = rows if len(rows) <= sample else rows[:: max(1, len(rows) // sample)][:sample]
    batch = gather_windows(trajectories, picks, model_config.context)
    logits = forward(params, model_config, batch.observations, batch.actions,
                     batch.rtg / r_max, adjacency)
    return masked_accuracy(logits.data, batch.actions, batch.mask)
