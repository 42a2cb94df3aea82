"""Distillation-set construction and persistence.

Annotations that survive gold-answer filtering are reformatted into
question/label training pairs; teacher- and mentor-side sets are combined by
multiset union (duplicates retained — downstream sampling treats origins as
indistinguishable), optionally thinned per question or subsampled by
question fraction for low-resource runs, and persisted as JSONL with a fixed
field order for reproducible diffs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataFormatError, DanglingReferenceError
from .tasks import (
    ANSWER_MARKERS,
    MARKER_COMPACT,
    MARKER_VERBOSE,
    GoldRationale,
    QuestionRecord,
    TaskKind,
    extract_final_answer,
)
from .teacher import AnnotationSource, CoTAnnotation


class LabelTemplate(Enum):
    VERBOSE = f"{{r}}. {MARKER_VERBOSE} {{y}}."
    COMPACT = f"{{r}}. {MARKER_COMPACT} {{y}}."

    def render(self, rationale: str, answer: str) -> str:
        return self.value.format(r=rationale, y=answer)


class Provenance(str, Enum):
    TEACHER_ONLY = "teacher_only"
    MENTOR_ONLY = "mentor_only"
    UNION = "union"


@dataclass(frozen=True)
class TrainingExample:
    question_id: int
    question: str
    label: str
    gold_answer: str
    source: AnnotationSource


@dataclass(frozen=True)
class DistillationSet:
    examples: tuple[TrainingExample, ...]
    provenance: Provenance

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def question_ids(self) -> list[int]:
        """Distinct question ids in first-appearance order."""
        seen: dict[int, None] = {}
        for ex in self.examples:
            seen.setdefault(ex.question_id, None)
        return list(seen)


def _infer_provenance(examples) -> Provenance:
    sources = {ex.source for ex in examples}
    if sources == {AnnotationSource.TEACHER}:
        return Provenance.TEACHER_ONLY
    if sources == {AnnotationSource.MENTOR}:
        return Provenance.MENTOR_ONLY
    return Provenance.UNION


def filter_annotations(
    annotations: list[CoTAnnotation], records: list[QuestionRecord]
) -> list[CoTAnnotation]:
    """Keep exactly the annotations whose prediction matched gold, in order."""
    known = {r.id for r in records}
    for ann in annotations:
        if ann.question_id not in known:
            raise DanglingReferenceError(
                f"annotation references unknown question id {ann.question_id}"
            )
    return [ann for ann in annotations if ann.correct]


def strip_final_answer(rationale: str) -> str:
    """Drop a trailing final-answer sentence (text from the last marker on)."""
    best = -1
    for marker in ANSWER_MARKERS:
        best = max(best, rationale.rfind(marker))
    text = rationale[:best] if best >= 0 else rationale
    return text.rstrip().removesuffix(".")


def reformat(
    annotations: list[CoTAnnotation],
    records: list[QuestionRecord],
    template: LabelTemplate = LabelTemplate.COMPACT,
) -> DistillationSet:
    """Turn kept annotations into question/label training examples.

    The annotation's own final-answer sentence is stripped and the label is
    re-rendered through the template with the gold answer, so every label
    re-parses to gold by construction.
    """
    by_id = {r.id: r for r in records}
    examples = []
    for ann in annotations:
        if ann.question_id not in by_id:
            raise DanglingReferenceError(
                f"annotation references unknown question id {ann.question_id}"
            )
        if not ann.correct:
            raise ValueError(
                f"reformat expects filtered annotations; question {ann.question_id} "
                "has an incorrect one"
            )
        record = by_id[ann.question_id]
        label = template.render(strip_final_answer(ann.rationale), record.gold_answer)
        examples.append(
            TrainingExample(
                question_id=record.id,
                question=record.question,
                label=label,
                gold_answer=record.gold_answer,
                source=ann.source,
            )
        )
    return DistillationSet(tuple(examples), _infer_provenance(examples))


def union_sets(teacher_set: DistillationSet, mentor_set: DistillationSet) -> DistillationSet:
    """Multiset union: concatenation with duplicates retained."""
    return DistillationSet(
        teacher_set.examples + mentor_set.examples, Provenance.UNION
    )


def sample_per_question(dset: DistillationSet, k: int, seed: int) -> DistillationSet:
    """Keep min(k, m) examples per question id, uniform without replacement."""
    if k < 1:
        raise ConfigurationError(f"k must be >= 1, got {k}")
    positions: dict[int, list[int]] = {}
    for i, ex in enumerate(dset.examples):
        positions.setdefault(ex.question_id, []).append(i)
    keep: set[int] = set()
    for qid, idxs in positions.items():
        if len(idxs) <= k:
            keep.update(idxs)
            continue
        rng = np.random.default_rng([seed, qid])
        chosen = rng.choice(len(idxs), size=k, replace=False)
        keep.update(idxs[int(c)] for c in chosen)
    kept = tuple(ex for i, ex in enumerate(dset.examples) if i in keep)
    return DistillationSet(kept, dset.provenance)


def subsample_fraction(dset: DistillationSet, fraction: float, seed: int) -> DistillationSet:
    """Keep ceil(fraction * Q) question ids (uniform, seeded) with all their examples."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigurationError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return replace(dset)
    qids = sorted({ex.question_id for ex in dset.examples})
    n_keep = math.ceil(fraction * len(qids))
    rng = np.random.default_rng([seed, len(qids)])
    kept_ids = set(int(q) for q in rng.choice(qids, size=n_keep, replace=False))
    kept = tuple(ex for ex in dset.examples if ex.question_id in kept_ids)
    return DistillationSet(kept, dset.provenance)


# ---------------------------------------------------------------------------
# JSONL persistence
# ---------------------------------------------------------------------------

_EXAMPLE_FIELDS = ("question_id", "question", "label", "gold_answer", "source")


def save_jsonl(dset: DistillationSet, path: str | Path) -> None:
    """One JSON object per line, fields in fixed order, UTF-8."""
    with open(path, "w", encoding="utf-8") as fh:
        for ex in dset.examples:
            row = {
                "question_id": ex.question_id,
                "question": ex.question,
                "label": ex.label,
                "gold_answer": ex.gold_answer,
                "source": ex.source.value,
            }
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def load_jsonl(path: str | Path) -> DistillationSet:
    """Inverse of save_jsonl; malformed lines raise with their line number."""
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{path}: line {lineno}: invalid JSON ({exc})")
            missing = [f for f in _EXAMPLE_FIELDS if f not in row]
            if missing:
                raise DataFormatError(
                    f"{path}: line {lineno}: missing field(s) {', '.join(missing)}"
                )
            try:
                source = AnnotationSource(row["source"])
            except ValueError:
                raise DataFormatError(
                    f"{path}: line {lineno}: unknown source {row['source']!r}"
                )
            examples.append(
                TrainingExample(
                    question_id=int(row["question_id"]),
                    question=row["question"],
                    label=row["label"],
                    gold_answer=row["gold_answer"],
                    source=source,
                )
            )
    return DistillationSet(tuple(examples), _infer_provenance(examples))


# Records + gold rationales use their own JSONL schema (artifact plumbing for
# checkpointing pipeline stages; the training-example schema above is the
# stable external one).

def save_records(
    pairs: list[tuple[QuestionRecord, GoldRationale]], path: str | Path
) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record, rationale in pairs:
            row = {
                "id": record.id,
                "question": record.question,
                "gold_answer": record.gold_answer,
                "task": record.task.value,
                "steps": list(rationale.steps),
                "final_answer": rationale.final_answer,
            }
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def load_records(path: str | Path) -> list[tuple[QuestionRecord, GoldRationale]]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                record = QuestionRecord(
                    id=int(row["id"]),
                    question=row["question"],
                    gold_answer=row["gold_answer"],
                    task=TaskKind(row["task"]),
                )
                rationale = GoldRationale(tuple(row["steps"]), row["final_answer"])
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise DataFormatError(f"{path}: line {lineno}: {exc}")
            pairs.append((record, rationale))
    return pairs


def save_annotations(annotations: list[CoTAnnotation], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ann in annotations:
            row = {
                "question_id": ann.question_id,
                "rationale": ann.rationale,
                "prediction": ann.prediction,
                "source": ann.source.value,
                "correct": ann.correct,
            }
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def load_annotations(path: str | Path) -> list[CoTAnnotation]:
    annotations = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                annotations.append(
                    CoTAnnotation(
                        question_id=int(row["question_id"]),
                        rationale=row["rationale"],
                        prediction=row["prediction"],
                        source=AnnotationSource(row["source"]),
                        correct=bool(row["correct"]),
                    )
                )
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise DataFormatError(f"{path}: line {lineno}: {exc}")
    return annotations


def validate_set(dset: DistillationSet, kind: TaskKind) -> None:
    """Check the post-filter invariant: every label re-parses to its gold."""
    for ex in dset.examples:
        parsed = extract_final_answer(kind, ex.label)
        if parsed != ex.gold_answer:
            raise DataFormatError(
                f"label for question {ex.question_id} parses to {parsed!r}, "
                f"expected {ex.gold_answer!r}"
            )
