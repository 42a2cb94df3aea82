"""End-to-end pipeline: generate data, annotate, filter, train the mentor,
augment, build the union set, train the student, evaluate.

Every stage writes its artifact (JSONL / checkpoint / CSV) into the output
directory together with a manifest holding the fully resolved config, so any
stage can be re-run identically from disk.
"""

from __future__ import annotations

import datetime as _dt
import json
import logging
import time
from pathlib import Path

from . import distill
from .config import ExperimentConfig
from .dataset import (
    filter_annotations,
    reformat,
    sample_per_question,
    save_annotations,
    save_jsonl,
    save_records,
    subsample_fraction,
    union_sets,
    validate_set,
)
from .errors import ConfigurationError
from .evaluation import (
    _TAG_SAMPLE,
    _TAG_SUBSAMPLE,
    augment_for,
    derive_seed,
    evaluate,
    hyperparameters,
    label_template,
    make_splits,
    new_model,
    teacher_config,
    train_mentor_for,
)
from .model import save_checkpoint
from .teacher import RemoteEndpointConfig, annotate_oracle, annotate_remote

log = logging.getLogger(__name__)


def write_manifest(out_dir: Path, stage: str, config: ExperimentConfig, extra: dict) -> Path:
    manifest = {
        "stage": stage,
        "created": _dt.datetime.now().isoformat(timespec="seconds"),
        "config": config.to_dict(),
        **extra,
    }
    path = out_dir / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2)
    return path


def annotate_records(config: ExperimentConfig, pairs, seed: int):
    """Teacher annotations via the configured source (oracle or remote)."""
    if config.teacher == "oracle":
        return annotate_oracle(pairs, teacher_config(config, seed))
    if not config.endpoint_url:
        raise ConfigurationError("remote teacher requires endpoint_url in the config")
    endpoint = RemoteEndpointConfig(
        url=config.endpoint_url,
        model=config.endpoint_model,
        requests_per_minute=config.requests_per_minute,
    )
    result = annotate_remote([record for record, _ in pairs], endpoint)
    if result.failures:
        log.warning("%d questions failed remote annotation", len(result.failures))
    return result.annotations


def run_pipeline(config: ExperimentConfig, out_dir: str | Path) -> dict:
    """Run the full distillation sequence; returns a summary dict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = config.seed
    kind = config.task_kind
    durations: dict[str, float] = {}
    counts: dict[str, int] = {}

    def timed(name: str):
        class _Timer:
            def __enter__(self_inner):
                self_inner.start = time.perf_counter()

            def __exit__(self_inner, *exc):
                durations[name] = round(time.perf_counter() - self_inner.start, 3)

        return _Timer()

    with timed("gen_data"):
        train_pairs, test_pairs = make_splits(
            kind, config.n_train, config.n_test, seed, config.difficulty
        )
        save_records(train_pairs, out / "train_records.jsonl")
        save_records(test_pairs, out / "test_records.jsonl")
    records = [record for record, _ in train_pairs]
    test_records = [record for record, _ in test_pairs]
    counts["questions"] = len(records)

    with timed("annotate"):
        annotations = annotate_records(config, train_pairs, seed)
        save_annotations(annotations, out / "annotations.jsonl")
    counts["annotations"] = len(annotations)

    with timed("filter"):
        kept = filter_annotations(annotations, records)
        save_annotations(kept, out / "annotations_kept.jsonl")
        teacher_full = reformat(kept, records, label_template(config))
        teacher_set = sample_per_question(
            teacher_full, config.per_question_keep, derive_seed(seed, _TAG_SAMPLE)
        )
        if config.fraction < 1.0:
            teacher_set = subsample_fraction(
                teacher_set, config.fraction, derive_seed(seed, _TAG_SUBSAMPLE)
            )
        validate_set(teacher_set, kind)
        save_jsonl(teacher_set, out / "d_teacher.jsonl")
    counts["teacher_examples"] = len(teacher_set)

    with timed("train_mentor"):
        mentor = train_mentor_for(config, seed, teacher_set)
        save_checkpoint(mentor, out / "mentor.npz")

    with timed("augment"):
        d_mentor = augment_for(config, seed, mentor, records)
        validate_set(d_mentor, kind)
        save_jsonl(d_mentor, out / "d_mentor.jsonl")
    counts["mentor_examples"] = len(d_mentor)

    with timed("union"):
        d_train = union_sets(teacher_set, d_mentor)
        save_jsonl(d_train, out / "d_train.jsonl")
    counts["train_examples"] = len(d_train)

    with timed("train_student"):
        student = new_model(config, config.student_preset, "student", seed)
        hp = hyperparameters(config, seed)
        distill.train_student(
            student,
            mentor,
            d_train,
            hp,
            metrics_path=out / "student_metrics.csv",
            eval_records=test_records,
            task_kind=kind,
        )
        save_checkpoint(student, out / "student.npz")

    with timed("evaluate"):
        report = evaluate(
            student,
            test_records,
            train_questions={r.question for r in records},
            max_new_tokens=config.max_new_tokens,
        )
        report_payload = {
            "task": report.task.value,
            "split_size": report.split_size,
            "accuracy": report.accuracy,
            "examples": [
                {
                    "question_id": ex.question_id,
                    "prediction": ex.prediction,
                    "gold": ex.gold,
                    "correct": ex.correct,
                }
                for ex in report.examples
            ],
        }
        with open(out / "eval_report.json", "w") as fh:
            json.dump(report_payload, fh, indent=2)

    summary = {
        "accuracy": report.accuracy,
        "counts": counts,
        "durations_s": durations,
        "out_dir": str(out),
    }
    write_manifest(out, "pipeline", config, {
        "seed": seed,
        "counts": counts,
        "durations_s": durations,
        "accuracy": report.accuracy,
        "artifacts": sorted(p.name for p in out.iterdir() if p.name != "manifest.json"),
    })
    log.info("pipeline finished: accuracy %.4f (%s)", report.accuracy, counts)
    return summary
