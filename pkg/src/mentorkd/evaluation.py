"""Accuracy evaluation and reproducible experiment sweeps.

Each sweep varies one axis (ablation variant, augmentation degree,
teacher-data fraction, mentor size, lambda) over a shared per-seed data
build: the seed fixes the question set, the teacher's corruptions, model
inits, and batch order, so any cell can be re-run independently from its
logged (seed, config) pair. Results land in
`out_dir/<experiment>/<timestamp>.csv` plus a JSON manifest of the fully
resolved config.
"""

from __future__ import annotations

import csv
import dataclasses
import datetime as _dt
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import distill
from .config import ExperimentConfig
from .dataset import (
    DistillationSet,
    LabelTemplate,
    filter_annotations,
    reformat,
    sample_per_question,
    subsample_fraction,
    union_sets,
)
from .errors import ConfigurationError, DataFormatError
from .model import CharTokenizer, PRESETS, TinyTransformer
from .model.training import encode_examples
from .runtime import limit_blas_threads
from .tasks import (
    GoldRationale,
    QuestionRecord,
    TaskKind,
    extract_final_answer,
    generate_dataset,
)
from .teacher import CorruptionMode, TeacherConfig, annotate_oracle

log = logging.getLogger(__name__)

# Seed-stream tags: sub-seeds for the independent random choices of one run.
_TAG_TEACHER = 101
_TAG_SAMPLE = 102
_TAG_TEST = 103
_TAG_MENTOR_INIT = 104
_TAG_STUDENT_INIT = 105
_TAG_AUG = 106
_TAG_SUBSAMPLE = 107


def derive_seed(*parts: int) -> int:
    """Stable sub-seed from integer parts (independent streams per tag)."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalExample:
    question_id: int
    prediction: str
    gold: str
    correct: bool


@dataclass(frozen=True)
class EvalReport:
    task: TaskKind
    split_size: int
    accuracy: float
    examples: tuple[EvalExample, ...]


def evaluate(
    model: TinyTransformer,
    records: list[QuestionRecord],
    train_questions: set[str] | None = None,
    max_new_tokens: int = 256,
    batch_size: int = 256,
) -> EvalReport:
    """Greedy-generate per question and exact-match the extracted answer.

    When the training question texts are supplied, any train/test overlap is
    a hard error listing the offending ids.
    """
    if not records:
        raise ConfigurationError("evaluation split is empty")
    if train_questions is not None:
        overlap = [r.id for r in records if r.question in train_questions]
        if overlap:
            raise ValueError(
                f"evaluation records overlap the training questions: ids {overlap}"
            )
    examples = []
    hits = 0
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        texts = model.generate_batch([r.question for r in chunk], max_new_tokens)
        for record, text in zip(chunk, texts):
            prediction = extract_final_answer(record.task, text)
            correct = prediction == record.gold_answer
            hits += correct
            examples.append(EvalExample(record.id, prediction, record.gold_answer, correct))
    return EvalReport(
        task=records[0].task,
        split_size=len(records),
        accuracy=hits / len(records),
        examples=tuple(examples),
    )


def make_splits(
    kind: TaskKind, n_train: int, n_test: int, seed: int, difficulty: int
) -> tuple[
    list[tuple[QuestionRecord, GoldRationale]],
    list[tuple[QuestionRecord, GoldRationale]],
]:
    """Train/test splits from disjoint seed streams, disjoint by question text."""
    train = generate_dataset(kind, n_train, seed, difficulty)
    train_texts = {record.question for record, _ in train}
    test: list[tuple[QuestionRecord, GoldRationale]] = []
    seen = set(train_texts)
    for attempt in range(8):
        want = (n_test - len(test)) * 2 + 8
        candidates = generate_dataset(
            kind, want, derive_seed(seed, _TAG_TEST, attempt), difficulty
        )
        for record, rationale in candidates:
            if record.question in seen:
                continue
            seen.add(record.question)
            test.append(
                (dataclasses.replace(record, id=len(test)), rationale)
            )
            if len(test) == n_test:
                return train, test
    raise RuntimeError(
        f"could not build a {n_test}-question test split disjoint from training"
    )


# ---------------------------------------------------------------------------
# Sweep results
# ---------------------------------------------------------------------------

@dataclass
class SweepCell:
    label: str
    value: object
    accuracies: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        if len(self.accuracies) < 2:
            return 0.0
        return float(np.std(self.accuracies, ddof=1))


@dataclass
class SweepResult:
    experiment: str
    axis: str
    cells: list[SweepCell]
    seeds: tuple[int, ...]
    config: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def cell(self, label: str) -> SweepCell:
        for c in self.cells:
            if c.label == label:
                return c
        raise KeyError(f"no sweep cell labelled {label!r}")

    def save(self, out_dir: str | Path) -> Path:
        """Write `<out_dir>/<experiment>/<timestamp>.csv` + JSON manifest."""
        directory = Path(out_dir) / self.experiment
        directory.mkdir(parents=True, exist_ok=True)
        stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S-%f")
        csv_path = directory / f"{stamp}.csv"
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_HEADER)
            for cell in self.cells:
                for seed, acc in zip(self.seeds, cell.accuracies):
                    writer.writerow([
                        self.experiment, self.axis, cell.label, seed,
                        f"{acc:.6f}", f"{cell.mean:.6f}", f"{cell.std:.6f}",
                    ])
        manifest = {
            "experiment": self.experiment,
            "axis": self.axis,
            "seeds": list(self.seeds),
            "notes": self.notes,
            "config": self.config,
            "cells": [
                {
                    "label": c.label,
                    "value": c.value,
                    "seed_accuracies": c.accuracies,
                    "mean": c.mean,
                    "std": c.std,
                }
                for c in self.cells
            ],
            "csv": csv_path.name,
        }
        with open(csv_path.with_suffix(".manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2)
        log.info("sweep %s written to %s", self.experiment, csv_path)
        return csv_path


CSV_HEADER = ["experiment", "axis", "cell", "seed", "accuracy", "cell_mean", "cell_std"]


def load_sweep(csv_path: str | Path) -> SweepResult:
    """Read a sweep CSV back, verifying stored means/stds against the rows."""
    csv_path = Path(csv_path)
    rows = []
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise DataFormatError(f"{csv_path}: unexpected header {header}")
        rows.extend(reader)
    if not rows:
        raise DataFormatError(f"{csv_path}: no data rows")
    experiment, axis = rows[0][0], rows[0][1]
    cells: dict[str, SweepCell] = {}
    stored: dict[str, tuple[float, float]] = {}
    seeds: list[int] = []
    for row in rows:
        _, _, label, seed, acc, mean, std = row
        cell = cells.setdefault(label, SweepCell(label, label, []))
        cell.accuracies.append(float(acc))
        stored[label] = (float(mean), float(std))
        if int(seed) not in seeds:
            seeds.append(int(seed))
    for label, cell in cells.items():
        mean, std = stored[label]
        if abs(cell.mean - mean) > 1e-6 or abs(cell.std - std) > 1e-6:
            raise DataFormatError(
                f"{csv_path}: stored mean/std for cell {label!r} do not match "
                "the per-seed values"
            )
    result = SweepResult(experiment, axis, list(cells.values()), tuple(seeds))
    manifest_path = csv_path.with_suffix(".manifest.json")
    if manifest_path.exists():
        with open(manifest_path) as fh:
            manifest = json.load(fh)
        result.notes = manifest.get("notes", [])
        result.config = manifest.get("config", {})
        by_label = {c["label"]: c["value"] for c in manifest.get("cells", [])}
        for cell in result.cells:
            cell.value = by_label.get(cell.label, cell.label)
    return result


def plot_data(result: SweepResult) -> list[dict]:
    """Re-emit a sweep as x / y / sigma rows ready for external plotting."""
    rows = []
    for cell in result.cells:
        value = cell.value
        if isinstance(value, (list, tuple)) and len(value) == 2:
            series, x = str(value[0]), value[1]
        else:
            series, x = result.axis, value
        rows.append({"x": x, "y": cell.mean, "sigma": cell.std, "series": series})
    return rows


# ---------------------------------------------------------------------------
# Shared per-seed pipeline pieces
# ---------------------------------------------------------------------------

@dataclass
class SeedMaterials:
    pairs: list[tuple[QuestionRecord, GoldRationale]]
    records: list[QuestionRecord]
    test_records: list[QuestionRecord]
    train_texts: set[str]
    teacher_set: DistillationSet


def label_template(config: ExperimentConfig) -> LabelTemplate:
    return LabelTemplate.COMPACT if config.label_template == "compact" else LabelTemplate.VERBOSE


def teacher_config(config: ExperimentConfig, seed: int) -> TeacherConfig:
    return TeacherConfig(
        corruption_rate=config.corruption_rate,
        corruption_modes=tuple(CorruptionMode(m) for m in config.corruption_modes),
        seed=derive_seed(seed, _TAG_TEACHER),
        annotations_per_question=config.annotations_per_question,
    )


def build_seed_materials(config: ExperimentConfig, seed: int) -> SeedMaterials:
    """Data, teacher annotations, and the filtered+thinned teacher set."""
    kind = config.task_kind
    train_pairs, test_pairs = make_splits(
        kind, config.n_train, config.n_test, seed, config.difficulty
    )
    records = [record for record, _ in train_pairs]
    annotations = annotate_oracle(train_pairs, teacher_config(config, seed))
    kept = filter_annotations(annotations, records)
    full = reformat(kept, records, label_template(config))
    teacher_set = sample_per_question(
        full, config.per_question_keep, derive_seed(seed, _TAG_SAMPLE)
    )
    return SeedMaterials(
        pairs=train_pairs,
        records=records,
        test_records=[record for record, _ in test_pairs],
        train_texts={record.question for record in records},
        teacher_set=teacher_set,
    )


def new_model(config: ExperimentConfig, preset: str, role: str, seed: int) -> TinyTransformer:
    if preset not in PRESETS:
        raise ConfigurationError(
            f"unknown model preset {preset!r}; expected one of {sorted(PRESETS)}"
        )
    tag = _TAG_MENTOR_INIT if role == "mentor" else _TAG_STUDENT_INIT
    return TinyTransformer(
        PRESETS[preset], CharTokenizer(), role=role, seed=derive_seed(seed, tag)
    )


def hyperparameters(config: ExperimentConfig, seed: int, **overrides) -> distill.DistillHyperparameters:
    values = dict(
        lam=config.lam,
        temperature=config.tau,
        epochs=config.epochs,
        batch_size=config.batch_size,
        learning_rate=config.learning_rate,
        warmup_fraction=config.warmup_fraction,
        seed=seed,
        augmentation_degree=config.degree,
        ablation=distill.Ablation(config.ablation),
    )
    values.update(overrides)
    return distill.DistillHyperparameters(**values)


def train_mentor_for(
    config: ExperimentConfig, seed: int, teacher_set: DistillationSet
) -> TinyTransformer:
    mentor = new_model(config, config.mentor_preset, "mentor", seed)
    hp = hyperparameters(
        config, seed,
        epochs=config.mentor_epochs,
        learning_rate=config.mentor_learning_rate or config.learning_rate,
        warmup_fraction=config.mentor_warmup_fraction or config.warmup_fraction,
        ablation=distill.Ablation.NO_SLD,
    )
    distill.train_mentor(mentor, teacher_set, hp)
    return mentor


def augment_for(
    config: ExperimentConfig,
    seed: int,
    mentor: TinyTransformer,
    records: list[QuestionRecord],
    degree: int | None = None,
) -> DistillationSet:
    return distill.augment_with_mentor(
        mentor,
        records,
        degree if degree is not None else config.degree,
        derive_seed(seed, _TAG_AUG),
        template=label_template(config),
        max_new_tokens=config.max_new_tokens,
    )


def student_cell(
    config: ExperimentConfig,
    seed: int,
    materials: SeedMaterials,
    train_set: DistillationSet,
    mentor: TinyTransformer | None,
    ablation: distill.Ablation,
    lam: float | None = None,
    soft_labels=None,
    student_preset: str | None = None,
) -> float:
    """Train a fresh student on train_set and return held-out accuracy."""
    student = new_model(config, student_preset or config.student_preset, "student", seed)
    overrides = {"ablation": ablation}
    if lam is not None:
        overrides["lam"] = lam
    hp = hyperparameters(config, seed, **overrides)
    distill.train_student(student, mentor, train_set, hp, soft_labels=soft_labels)
    report = evaluate(
        student,
        materials.test_records,
        train_questions=materials.train_texts,
        max_new_tokens=config.max_new_tokens,
    )
    return report.accuracy


def soft_labels_for(
    mentor: TinyTransformer, train_set: DistillationSet, tau: float, batch_size: int
):
    encoded = encode_examples(mentor.tokenizer, train_set)
    return distill.compute_soft_labels(mentor, encoded, tau, batch_size=batch_size)


# ---------------------------------------------------------------------------
# Per-seed sweep workers (top level so a process pool can pickle them)
# ---------------------------------------------------------------------------

def _ablation_seed(config: ExperimentConfig, seed: int) -> dict[str, float]:
    mats = build_seed_materials(config, seed)
    out: dict[str, float] = {}
    out["vanilla"] = student_cell(
        config, seed, mats, mats.teacher_set, None, distill.Ablation.NO_SLD
    )
    mentor = train_mentor_for(config, seed, mats.teacher_set)
    d_mentor = augment_for(config, seed, mentor, mats.records)
    d_train = union_sets(mats.teacher_set, d_mentor)
    soft = soft_labels_for(mentor, d_train, config.tau, config.batch_size)
    out["full"] = student_cell(
        config, seed, mats, d_train, mentor, distill.Ablation.FULL, soft_labels=soft
    )
    out["no_rd"] = student_cell(
        config, seed, mats, d_train, mentor, distill.Ablation.NO_RD, soft_labels=soft
    )
    out["no_sld"] = student_cell(
        config, seed, mats, d_train, mentor, distill.Ablation.NO_SLD
    )
    return out


def _degree_seed(config: ExperimentConfig, seed: int) -> dict[str, float]:
    mats = build_seed_materials(config, seed)
    mentor = None
    out: dict[str, float] = {}
    for degree in config.degree_grid:
        if degree == 0:
            out["0"] = student_cell(
                config, seed, mats, mats.teacher_set, None, distill.Ablation.NO_SLD
            )
            continue
        if mentor is None:
            mentor = train_mentor_for(config, seed, mats.teacher_set)
        d_mentor = augment_for(config, seed, mentor, mats.records, degree=degree)
        d_train = union_sets(mats.teacher_set, d_mentor)
        out[str(degree)] = student_cell(
            config, seed, mats, d_train, mentor, distill.Ablation.FULL
        )
    return out


def _lowresource_cell_list(config: ExperimentConfig) -> list[tuple[str, float]]:
    if config.lowresource_cells:
        return [(str(arm), float(fraction)) for arm, fraction in config.lowresource_cells]
    return [
        (arm, fraction)
        for arm in ("vanilla", "mentor")
        for fraction in config.fraction_grid
    ]


def _lowresource_seed(config: ExperimentConfig, seed: int) -> dict[str, float]:
    mats = build_seed_materials(config, seed)
    cells = _lowresource_cell_list(config)
    out: dict[str, float] = {}
    for arm, fraction in cells:
        teacher_f = subsample_fraction(
            mats.teacher_set, fraction, derive_seed(seed, _TAG_SUBSAMPLE)
        )
        if arm == "vanilla":
            out[f"vanilla@{fraction}"] = student_cell(
                config, seed, mats, teacher_f, None, distill.Ablation.NO_SLD
            )
        else:
            mentor = train_mentor_for(config, seed, teacher_f)
            d_mentor = augment_for(config, seed, mentor, mats.records)
            d_train = union_sets(teacher_f, d_mentor)
            out[f"mentor@{fraction}"] = student_cell(
                config, seed, mats, d_train, mentor, distill.Ablation.FULL
            )
    return out


def _mentorsize_seed(config: ExperimentConfig, seed: int) -> dict[str, float]:
    mats = build_seed_materials(config, seed)
    out: dict[str, float] = {}
    for preset in config.mentor_size_grid:
        cell_config = dataclasses.replace(config, mentor_preset=preset)
        mentor = train_mentor_for(cell_config, seed, mats.teacher_set)
        d_mentor = augment_for(cell_config, seed, mentor, mats.records)
        d_train = union_sets(mats.teacher_set, d_mentor)
        out[preset] = student_cell(
            cell_config, seed, mats, d_train, mentor, distill.Ablation.FULL,
            student_preset="micro",
        )
    return out


def _lambda_seed(config: ExperimentConfig, seed: int) -> dict[str, float]:
    mats = build_seed_materials(config, seed)
    mentor = train_mentor_for(config, seed, mats.teacher_set)
    d_mentor = augment_for(config, seed, mentor, mats.records)
    d_train = union_sets(mats.teacher_set, d_mentor)
    soft = soft_labels_for(mentor, d_train, config.tau, config.batch_size)
    out: dict[str, float] = {}
    for lam in config.lambda_grid:
        out[f"{lam:g}"] = student_cell(
            config, seed, mats, d_train, mentor, distill.Ablation.FULL,
            lam=lam, soft_labels=soft if lam > 0 else None,
        )
    return out


_SEED_WORKERS = {
    "ablation": _ablation_seed,
    "degree": _degree_seed,
    "lowresource": _lowresource_seed,
    "mentorsize": _mentorsize_seed,
    "lambda": _lambda_seed,
}


def _pool_entry(args: tuple[str, ExperimentConfig, int]) -> dict[str, float]:
    experiment, config, seed = args
    limit_blas_threads()
    return _SEED_WORKERS[experiment](config, seed)


def _run_over_seeds(experiment: str, config: ExperimentConfig) -> list[dict[str, float]]:
    """One worker per seed; grouping a seed's cells together lets them share
    the seed's trained mentor."""
    seeds = config.seeds
    if config.workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(config.workers, len(seeds))) as pool:
            return list(pool.map(_pool_entry, [(experiment, config, s) for s in seeds]))
    worker = _SEED_WORKERS[experiment]
    results = []
    for seed in seeds:
        log.info("%s sweep: seed %d", experiment, seed)
        results.append(worker(config, seed))
    return results


def _assemble(
    experiment: str,
    axis: str,
    config: ExperimentConfig,
    per_seed: list[dict[str, float]],
    cell_values: list[tuple[str, object]],
) -> SweepResult:
    cells = [
        SweepCell(label, value, [seed_out[label] for seed_out in per_seed])
        for label, value in cell_values
    ]
    return SweepResult(
        experiment=experiment,
        axis=axis,
        cells=cells,
        seeds=tuple(config.seeds),
        config=config.to_dict(),
    )


# ---------------------------------------------------------------------------
# Public sweep runners
# ---------------------------------------------------------------------------

def run_ablation(config: ExperimentConfig, save: bool = True) -> SweepResult:
    """Full / no-RD / no-SLD / vanilla students under identical data and seeds."""
    per_seed = _run_over_seeds("ablation", config)
    labels = [("full", "full"), ("no_rd", "no_rd"), ("no_sld", "no_sld"),
              ("vanilla", "vanilla")]
    result = _assemble("ablation", "variant", config, per_seed, labels)
    full = result.cell("full")
    runner_up = max(
        (result.cell("no_rd"), result.cell("no_sld")), key=lambda c: c.mean
    )
    margin = full.mean - runner_up.mean
    result.notes.append(
        f"full vs strongest ablation ({runner_up.label}): "
        f"margin {margin * 100:+.2f} points"
    )
    if margin < 0.01 and abs(margin) <= full.std + runner_up.std:
        result.notes.append(
            f"overlap: full ({full.mean:.4f} +/- {full.std:.4f}) and "
            f"{runner_up.label} ({runner_up.mean:.4f} +/- {runner_up.std:.4f}) "
            "are within one combined standard deviation"
        )
    vanilla_gap = full.mean - result.cell("vanilla").mean
    result.notes.append(f"full vs vanilla: margin {vanilla_gap * 100:+.2f} points")
    if save:
        result.save(config.out_dir)
    return result


def run_degree_sweep(config: ExperimentConfig, save: bool = True) -> SweepResult:
    """Student accuracy as the mentor generates 0/1/3/6/9 rationales per question."""
    per_seed = _run_over_seeds("degree", config)
    labels = [(str(d), d) for d in config.degree_grid]
    result = _assemble("degree", "augmentation_degree", config, per_seed, labels)
    if save:
        result.save(config.out_dir)
    return result


def run_lowresource_sweep(
    config: ExperimentConfig,
    cells: list[tuple[str, float]] | None = None,
    save: bool = True,
) -> SweepResult:
    """Vanilla-KD vs mentor-augmented students across teacher-data fractions.

    `cells` restricts the (arm, fraction) grid; the default is the full
    cartesian product.
    """
    if cells is not None:
        config = dataclasses.replace(config, lowresource_cells=tuple(cells))
    cell_list = _lowresource_cell_list(config)
    per_seed = _run_over_seeds("lowresource", config)
    labels = [(f"{arm}@{fraction}", (arm, fraction)) for arm, fraction in cell_list]
    result = _assemble("lowresource", "fraction", config, per_seed, labels)
    if save:
        result.save(config.out_dir)
    return result


def run_mentorsize_sweep(config: ExperimentConfig, save: bool = True) -> SweepResult:
    """Micro students distilled from mentors of increasing capacity.

    The micro-sized mentor cell is the self-distillation case (mentor and
    student share a size).
    """
    per_seed = _run_over_seeds("mentorsize", config)
    labels = [(preset, preset) for preset in config.mentor_size_grid]
    result = _assemble("mentorsize", "mentor_preset", config, per_seed, labels)
    if save:
        result.save(config.out_dir)
    return result


def run_lambda_sweep(config: ExperimentConfig, save: bool = True) -> SweepResult:
    """Loss-interpolation sweep from 0 (no soft labels) to 1 (only soft labels)."""
    per_seed = _run_over_seeds("lambda", config)
    labels = [(f"{lam:g}", lam) for lam in config.lambda_grid]
    result = _assemble("lambda", "lambda", config, per_seed, labels)
    mid = [c for c in result.cells if 0.0 < float(c.label) < 1.0]
    if mid:
        best_mid = max(mid, key=lambda c: c.mean)
        for endpoint in ("0", "1"):
            try:
                cell = result.cell(endpoint)
            except KeyError:
                continue
            gap = best_mid.mean - cell.mean
            result.notes.append(
                f"lambda={cell.label} vs best mid lambda={best_mid.label}: "
                f"margin {gap * 100:+.2f} points"
            )
            if gap < 0.0 or abs(gap) <= best_mid.std + cell.std:
                result.notes.append(
                    f"overlap: lambda={cell.label} and lambda={best_mid.label} "
                    "are within one combined standard deviation"
                )
    if save:
        result.save(config.out_dir)
    return result
