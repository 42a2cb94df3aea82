"""Distillation objectives and loops.

The student objective interpolates two signals computed on the same rendered
token sequence:

* rationale distillation — label-span negative log-likelihood of the
  question/rationale/answer sequence (question tokens masked out),
* soft-label distillation — forward KL from the frozen mentor's
  temperature-softened per-position distributions to the student's.

total = (1 - lambda) * rationale + lambda * soft_label

Mentors train with the rationale loss only, then augment the training set by
generating labels per question, filtered by gold-answer match exactly like
teacher annotations.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, masked_cross_entropy, no_grad
from .dataset import (
    DistillationSet,
    LabelTemplate,
    Provenance,
    reformat,
)
from .errors import ConfigurationError
from .model.training import (
    TrainingParams,
    TrainState,
    encode_examples,
    fit,
    train_lm,
)
from .model.transformer import TinyTransformer, render_training_batch
from .tasks import QuestionRecord, TaskKind, extract_final_answer
from .teacher import AnnotationSource, CoTAnnotation

log = logging.getLogger(__name__)

PROB_EPS = 1e-8
SAMPLING_TEMPERATURE = 0.7  # rationale-diversity sampling for degree > 1
METRIC_FIELDS = ("epoch", "loss_rd", "loss_sld", "loss_total", "train_acc", "eval_acc")


class Ablation(str, Enum):
    FULL = "full"
    NO_RD = "no_rd"
    NO_SLD = "no_sld"


@dataclass(frozen=True)
class DistillHyperparameters:
    lam: float = 0.3  # loss interpolation weight on the soft-label term
    temperature: float = 2.0
    epochs: int = 2
    batch_size: int = 64
    learning_rate: float = 3e-4
    seed: int = 0
    augmentation_degree: int = 3
    ablation: Ablation = Ablation.FULL
    weight_decay: float = 0.01
    warmup_fraction: float = 0.05

    def __post_init__(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigurationError(f"lambda must be in [0, 1], got {self.lam}")
        if self.temperature <= 0.0:
            raise ConfigurationError(
                f"temperature must be positive, got {self.temperature}"
            )
        if self.augmentation_degree < 0:
            raise ConfigurationError(
                f"augmentation_degree must be >= 0, got {self.augmentation_degree}"
            )

    def effective_lambda(self) -> float:
        if self.ablation is Ablation.NO_SLD:
            return 0.0
        if self.ablation is Ablation.NO_RD:
            return 1.0
        return self.lam

    def training_params(self, max_steps: int | None = None) -> TrainingParams:
        return TrainingParams(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            warmup_fraction=self.warmup_fraction,
            seed=self.seed,
            max_steps=max_steps,
        )


@dataclass(frozen=True)
class SoftLabelBatch:
    """Per-position probability rows over the vocabulary for a label span."""

    probs: np.ndarray
    temperature: float


# ---------------------------------------------------------------------------
# Loss primitives
# ---------------------------------------------------------------------------

def rationale_loss(student_logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean -log p(target) over label-span positions (question span masked)."""
    return masked_cross_entropy(student_logits, targets, mask)


def soften(logits_rows, temperature: float):
    """Temperature softmax: p_k = exp(z_k / tau) / sum_j exp(z_j / tau).

    Accepts a plain array (returns an array) or a graph Tensor (returns a
    Tensor so gradients can flow through the student's rows).
    """
    if temperature <= 0.0:
        raise ConfigurationError(f"temperature must be positive, got {temperature}")
    if isinstance(logits_rows, Tensor):
        return ad.softmax(ad.mul(logits_rows, 1.0 / temperature), axis=-1)
    z = np.asarray(logits_rows, dtype=np.float64) / temperature
    z -= z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _unwrap(probs):
    return probs.probs if isinstance(probs, SoftLabelBatch) else probs


def soft_label_loss(mentor_probs, student_probs):
    """Forward KL, mentor as reference: mean_k sum_v p^m ln(p^m / p^s).

    Probabilities are clamped at 1e-8 before the logs; the mentor side is a
    constant, so gradients only flow into a Tensor-valued student side.
    """
    pm = _unwrap(mentor_probs)
    ps = _unwrap(student_probs)
    pm = pm.data if isinstance(pm, Tensor) else np.asarray(pm)
    positions = pm.shape[:-1]
    count = int(np.prod(positions)) if positions else 1
    pm_safe = np.maximum(pm, PROB_EPS)
    if isinstance(ps, Tensor):
        if ps.shape != pm.shape:
            raise ValueError(f"shape mismatch: mentor {pm.shape} vs student {ps.shape}")
        ref = Tensor((pm * np.log(pm_safe) / count).astype(ps.dtype))
        cross = ad.mul(ad.log(ad.clip_min(ps, PROB_EPS)), Tensor((pm / count).astype(ps.dtype)))
        return ad.add(ad.reduce_sum(ref), ad.mul(ad.reduce_sum(cross), -1.0))
    ps = np.asarray(ps)
    if ps.shape != pm.shape:
        raise ValueError(f"shape mismatch: mentor {pm.shape} vs student {ps.shape}")
    ps_safe = np.maximum(ps, PROB_EPS)
    return float((pm * (np.log(pm_safe) - np.log(ps_safe))).sum() / count)


def joint_loss(l_rd, l_sld, lam: float):
    """Affine interpolation (1 - lambda) * rationale + lambda * soft-label."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigurationError(f"lambda must be in [0, 1], got {lam}")
    if isinstance(l_rd, Tensor) or isinstance(l_sld, Tensor):
        terms = []
        if lam < 1.0:
            terms.append(ad.mul(l_rd, 1.0 - lam))
        if lam > 0.0:
            terms.append(ad.mul(l_sld, lam))
        out = terms[0]
        for term in terms[1:]:
            out = ad.add(out, term)
        return out
    return (1.0 - lam) * l_rd + lam * l_sld


# ---------------------------------------------------------------------------
# Mentor training and rationale augmentation
# ---------------------------------------------------------------------------

def train_mentor(
    mentor: TinyTransformer,
    teacher_set: DistillationSet,
    hp: DistillHyperparameters,
) -> tuple[TrainState, list[float]]:
    """Fine-tune the mentor on the filtered teacher set (rationale loss only)."""
    if teacher_set.provenance is not Provenance.TEACHER_ONLY:
        raise ConfigurationError(
            f"mentor training expects a teacher-only set, got {teacher_set.provenance.value}"
        )
    if len(teacher_set) == 0:
        raise ConfigurationError("mentor training set is empty")
    return train_lm(mentor, teacher_set, hp.training_params())


def augment_with_mentor(
    mentor: TinyTransformer,
    records: list[QuestionRecord],
    degree: int,
    seed: int,
    template: LabelTemplate = LabelTemplate.COMPACT,
    max_new_tokens: int = 256,
    generation_batch: int = 256,
) -> DistillationSet:
    """Generate `degree` labels per question, filter by gold match, reformat.

    degree=1 decodes greedily; higher degrees sample at temperature 0.7 with
    per-(question, sample) RNG streams so output does not depend on batch
    composition. Questions whose every sample fails the filter contribute
    nothing.
    """
    if degree < 1:
        raise ConfigurationError(f"augmentation degree must be >= 1, got {degree}")
    jobs = [(record, k) for record in records for k in range(degree)]
    kept: list[CoTAnnotation] = []
    for start in range(0, len(jobs), generation_batch):
        chunk = jobs[start : start + generation_batch]
        questions = [record.question for record, _ in chunk]
        if degree == 1:
            texts = mentor.generate_batch(questions, max_new_tokens)
        else:
            keys = [(seed, record.id, k) for record, k in chunk]
            texts = mentor.generate_batch(
                questions, max_new_tokens,
                temperature=SAMPLING_TEMPERATURE, sample_keys=keys,
            )
        for (record, _), text in zip(chunk, texts):
            if not text.strip():
                continue
            prediction = extract_final_answer(record.task, text)
            if prediction != record.gold_answer:
                continue
            kept.append(
                CoTAnnotation(
                    question_id=record.id,
                    rationale=text,
                    prediction=prediction,
                    source=AnnotationSource.MENTOR,
                    correct=True,
                )
            )
    if not kept:
        return DistillationSet((), Provenance.MENTOR_ONLY)
    dset = reformat(kept, records, template)
    return DistillationSet(dset.examples, Provenance.MENTOR_ONLY)


# ---------------------------------------------------------------------------
# Student training (joint objective)
# ---------------------------------------------------------------------------

def compute_soft_labels(
    mentor: TinyTransformer,
    encoded: list[tuple[np.ndarray, int]],
    temperature: float,
    batch_size: int = 64,
) -> list[np.ndarray]:
    """Teacher-forced mentor distributions over each example's label span.

    The mentor is frozen and dropout-free here, so computing these once up
    front is identical to recomputing them per minibatch.
    """
    out: list[np.ndarray] = []
    with no_grad():
        for start in range(0, len(encoded), batch_size):
            chunk = encoded[start : start + batch_size]
            inputs, _, mask = render_training_batch(mentor.tokenizer, chunk)
            logits = mentor.forward(inputs).data
            bool_mask = mask.astype(bool)
            for b in range(len(chunk)):
                rows = logits[b][bool_mask[b]]
                out.append(soften(rows, temperature).astype(np.float32))
    return out


def _np_masked_ce(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> float:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    return float(-(picked * mask).sum() / mask.sum())


def train_student(
    student: TinyTransformer,
    mentor: TinyTransformer | None,
    train_set: DistillationSet,
    hp: DistillHyperparameters,
    metrics_path: str | Path | None = None,
    eval_records: list[QuestionRecord] | None = None,
    task_kind: TaskKind | None = None,
    soft_labels: list[np.ndarray] | None = None,
) -> tuple[TrainState, list[dict[str, float]]]:
    """Joint rationale + soft-label training of the student.

    Per minibatch both models are teacher-forced on the same rendered
    sequence; distributions over the label span are softened at the shared
    temperature and combined via joint_loss. Only the student descends; the
    mentor stays frozen. Ablations: NO_SLD reduces to the plain rationale
    loss (trajectory-identical to train_lm), NO_RD trains on the KL term
    alone. Precomputed soft_labels (aligned with train_set order) may be
    passed in to share the mentor forward pass across runs.
    """
    lam = hp.effective_lambda()
    if lam > 0.0:
        if mentor is None:
            raise ConfigurationError(
                f"ablation {hp.ablation.value} needs a mentor (lambda={lam})"
            )
        if mentor.tokenizer != student.tokenizer:
            raise ConfigurationError(
                "mentor and student tokenizers differ; soft labels would misalign"
            )
    if len(train_set) == 0:
        raise ConfigurationError("student training set is empty")
    encoded = encode_examples(student.tokenizer, train_set)
    if lam > 0.0 and soft_labels is None:
        log.info("precomputing mentor soft labels for %d examples", len(encoded))
        soft_labels = compute_soft_labels(
            mentor, encoded, hp.temperature, batch_size=hp.batch_size
        )

    def loss_fn(model, logits, rows, targets, mask):
        components: dict[str, float] = {}
        bool_mask = mask.astype(bool)
        if lam < 1.0:
            rd = rationale_loss(logits, targets, mask)
            components["loss_rd"] = rd.item()
        else:
            rd = None
            components["loss_rd"] = _np_masked_ce(logits.data, targets, mask)
        if lam > 0.0:
            pm = np.concatenate([soft_labels[r] for r in rows], axis=0)
            student_rows = ad.take(logits, bool_mask)
            ps = soften(student_rows, hp.temperature)
            sld = soft_label_loss(pm, ps)
            components["loss_sld"] = sld.item()
        else:
            sld = None
            components["loss_sld"] = 0.0
        if rd is not None and sld is not None:
            total = joint_loss(rd, sld, lam)
        else:
            total = rd if sld is None else sld
        components["loss_total"] = total.item()
        return total, components

    callback = None
    if metrics_path is not None:
        callback = _metrics_writer(student, train_set, eval_records, metrics_path,
                                   task_kind)
    params = hp.training_params()
    state, history = fit(student, encoded, params, loss_fn=loss_fn,
                         epoch_callback=callback)
    return state, history


def _metrics_writer(student, train_set, eval_records, metrics_path, task_kind,
                    sample_cap=128):
    """Appends one CSV row per epoch with losses and greedy-decode accuracy.

    Accuracy columns are computed on capped samples (and left as nan when no
    task kind is known to parse answers with).
    """
    path = Path(metrics_path)
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerow(METRIC_FIELDS)

    train_sample: list[tuple[str, str]] = []
    seen = set()
    for ex in train_set.examples:
        if ex.question_id in seen:
            continue
        seen.add(ex.question_id)
        train_sample.append((ex.question, ex.gold_answer))
        if len(train_sample) >= sample_cap:
            break
    eval_sample = [
        (r.question, r.gold_answer) for r in (eval_records or [])[: 2 * sample_cap]
    ]

    def accuracy(pairs) -> float:
        if not pairs or task_kind is None:
            return float("nan")
        texts = student.generate_batch([q for q, _ in pairs],
                                       student.config.max_sequence)
        hits = sum(
            extract_final_answer(task_kind, text) == gold
            for (_, gold), text in zip(pairs, texts)
        )
        return hits / len(pairs)

    def callback(epoch: int, losses: dict[str, float]) -> None:
        with open(path, "a", newline="") as fh:
            csv.writer(fh).writerow([
                epoch,
                f"{losses.get('loss_rd', float('nan')):.6f}",
                f"{losses.get('loss_sld', float('nan')):.6f}",
                f"{losses.get('loss_total', float('nan')):.6f}",
                f"{accuracy(train_sample):.4f}",
                f"{accuracy(eval_sample):.4f}",
            ])

    return callback
