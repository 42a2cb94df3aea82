"""Minibatch language-model training with AdamW and a warmup+cosine schedule.

The loop is deterministic per seed: epoch permutations and per-step dropout
generators are derived from (seed, epoch, step) counters rather than a
mutable RNG, so a run resumed from a checkpointed TrainState replays the
remaining steps bit-compatibly.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..autodiff import Tensor, masked_cross_entropy
from ..dataset import DistillationSet
from .tokenizer import CharTokenizer
from .transformer import TinyTransformer, render_training_batch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainingParams:
    epochs: int = 2
    batch_size: int = 64
    learning_rate: float = 3e-4
    weight_decay: float = 0.01
    warmup_fraction: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    max_steps: int | None = None

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class TrainState:
    """Optimizer moments plus progress counters; serializable in checkpoints."""

    step: int = 0
    epoch: int = 0
    total_steps: int = 0
    warmup_steps: int = 0
    base_lr: float = 0.0
    seed: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def learning_rate(self, step: int) -> float:
        """LR for 0-indexed step: linear warmup then cosine decay to zero."""
        if self.total_steps <= 0:
            return self.base_lr
        if step < self.warmup_steps:
            return self.base_lr * (step + 1) / max(1, self.warmup_steps)
        span = max(1, self.total_steps - self.warmup_steps)
        progress = min(1.0, (step - self.warmup_steps) / span)
        return 0.5 * self.base_lr * (1.0 + math.cos(math.pi * progress))


def init_train_state(
    model: TinyTransformer, params: TrainingParams, steps_per_epoch: int
) -> TrainState:
    # The schedule length is always epochs * steps_per_epoch; max_steps only
    # truncates execution, so a resumed run sees the same schedule.
    total = params.epochs * steps_per_epoch
    return TrainState(
        total_steps=total,
        warmup_steps=int(round(params.warmup_fraction * total)),
        base_lr=params.learning_rate,
        seed=params.seed,
        m={name: np.zeros_like(t.data) for name, t in model.params.items()},
        v={name: np.zeros_like(t.data) for name, t in model.params.items()},
    )


def adamw_step(
    model: TinyTransformer,
    grads: dict[str, np.ndarray],
    state: TrainState,
    params: TrainingParams,
) -> None:
    """Decoupled-weight-decay Adam update; decay applies to matrices only."""
    lr = state.learning_rate(state.step)
    b1, b2 = params.betas
    t = state.step + 1
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t
    for name, tensor in model.params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / bias1) / (np.sqrt(v / bias2) + params.adam_eps)
        if params.weight_decay > 0.0 and tensor.data.ndim >= 2:
            update = update + params.weight_decay * tensor.data
        tensor.data = tensor.data - (lr * update).astype(tensor.data.dtype)


def encode_examples(
    tokenizer: CharTokenizer, dset: DistillationSet
) -> list[tuple[np.ndarray, int]]:
    """Render every example to token ids once, citing the offender on failure."""
    encoded = []
    for ex in dset.examples:
        try:
            encoded.append(tokenizer.render_example(ex.question, ex.label))
        except ValueError as exc:
            raise ValueError(f"example for question {ex.question_id}: {exc}")
    return encoded


def fit(
    model: TinyTransformer,
    encoded: list[tuple[np.ndarray, int]],
    params: TrainingParams,
    state: TrainState | None = None,
    loss_fn=None,
    epoch_callback=None,
) -> tuple[TrainState, list[dict[str, float]]]:
    """Run epochs of minibatch descent; returns (state, per-epoch mean losses).

    loss_fn(model, logits, batch_indices, targets, mask) -> (loss Tensor,
    components dict); the default is the label-span cross-entropy. The order
    of batches depends only on (seed, epoch), never on the loss function.
    """
    if not encoded:
        raise ValueError("cannot train on an empty example set")
    longest = max(len(ids) for ids, _ in encoded)
    if longest > model.config.max_sequence:
        raise ValueError(
            f"rendered sequence length {longest} exceeds max_sequence "
            f"{model.config.max_sequence}"
        )
    steps_per_epoch = math.ceil(len(encoded) / params.batch_size)
    if state is None:
        state = init_train_state(model, params, steps_per_epoch)
    history: list[dict[str, float]] = []
    for epoch in range(state.epoch, params.epochs):
        order = np.random.default_rng([params.seed, 7, epoch]).permutation(len(encoded))
        sums: dict[str, float] = {}
        counted = 0
        for bi in range(steps_per_epoch):
            global_step = epoch * steps_per_epoch + bi
            if global_step < state.step:
                continue  # fast-forward when resuming mid-epoch
            if params.max_steps is not None and state.step >= params.max_steps:
                state.epoch = epoch
                return state, history
            rows = order[bi * params.batch_size : (bi + 1) * params.batch_size]
            batch = [encoded[r] for r in rows]
            inputs, targets, mask = render_training_batch(model.tokenizer, batch)
            dropout_rng = (
                np.random.default_rng([params.seed, 11, epoch, bi])
                if model.config.dropout_rate > 0
                else None
            )
            logits = model.forward(inputs, train=True, dropout_rng=dropout_rng)
            if loss_fn is None:
                loss = masked_cross_entropy(logits, targets, mask)
                components = {"loss": loss.item()}
            else:
                loss, components = loss_fn(model, logits, rows, targets, mask)
            grads = model.backward(loss)
            adamw_step(model, grads, state, params)
            state.step += 1
            for key, value in components.items():
                sums[key] = sums.get(key, 0.0) + value
            counted += 1
        state.epoch = epoch + 1
        if counted:
            history.append({k: s / counted for k, s in sums.items()})
            log.info("epoch %d: %s", epoch, history[-1])
        if epoch_callback is not None:
            epoch_callback(epoch, history[-1] if history else {})
    return state, history


def train_lm(
    model: TinyTransformer, dset: DistillationSet, params: TrainingParams
) -> tuple[TrainState, list[float]]:
    """Language-model fine-tuning on rendered question/label sequences.

    The objective is the label-span cross-entropy (question tokens masked
    out); returns the train state and the per-epoch mean loss curve.
    """
    encoded = encode_examples(model.tokenizer, dset)
    state, history = fit(model, encoded, params)
    return state, [h["loss"] for h in history]
