"""Subcommand CLI wiring config files to the pipeline stages.

Exit codes: 0 success, 1 usage error, 2 runtime error. Flag precedence is
command line > config file > built-in defaults.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import distill, evaluation, pipeline
from .config import ExperimentConfig, apply_overrides, load_config
from .dataset import (
    filter_annotations,
    load_annotations,
    load_jsonl,
    load_records,
    reformat,
    sample_per_question,
    save_annotations,
    save_jsonl,
    save_records,
    union_sets,
)
from .errors import MentorKDError
from .evaluation import (
    augment_for,
    evaluate,
    hyperparameters,
    label_template,
    load_sweep,
    make_splits,
    new_model,
    plot_data,
)
from .model import load_checkpoint, save_checkpoint
from .tasks import TaskKind

log = logging.getLogger(__name__)

SWEEPS = {
    "ablation": evaluation.run_ablation,
    "degree": evaluation.run_degree_sweep,
    "lowresource": evaluation.run_lowresource_sweep,
    "mentorsize": evaluation.run_mentorsize_sweep,
    "lambda": evaluation.run_lambda_sweep,
}


class _Parser(argparse.ArgumentParser):
    """argparse normally exits 2 on usage errors; the contract here is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="TOML config file")
    parser.add_argument("--seed", type=int, help="run seed")
    parser.add_argument("--out", help="output file or directory")
    parser.add_argument("--lambda", dest="lam", type=float,
                        help="loss interpolation weight")
    parser.add_argument("--tau", type=float, help="distillation temperature")
    parser.add_argument("--degree", type=int, help="mentor rationales per question")
    parser.add_argument("--fraction", type=float, help="teacher-data fraction")
    parser.add_argument("--ablation", choices=["full", "no-rd", "no-sld"],
                        help="student training variant")
    parser.add_argument("--teacher", choices=["oracle", "remote"],
                        help="annotation source")


def build_parser() -> _Parser:
    parser = _Parser(prog="mentorkd", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    commands = {
        "gen-data": "generate train/test question records",
        "annotate": "produce teacher annotations for question records",
        "filter": "keep annotations whose prediction matches gold",
        "train-mentor": "fine-tune a mentor on a teacher set",
        "augment": "generate and filter mentor rationales",
        "train-student": "train a student with the joint objective",
        "evaluate": "greedy-decode accuracy of a checkpoint",
        "sweep": "run an experiment sweep",
        "plot-data": "re-emit a sweep as x/y/sigma columns",
        "pipeline": "run the full sequence end to end",
    }
    parsers = {}
    for name, help_text in commands.items():
        sp = sub.add_parser(name, help=help_text)
        _add_common(sp)
        parsers[name] = sp

    parsers["annotate"].add_argument("--records", required=True)
    parsers["filter"].add_argument("--records", required=True)
    parsers["filter"].add_argument("--annotations", required=True)
    parsers["train-mentor"].add_argument("--data", required=True)
    parsers["augment"].add_argument("--mentor", required=True)
    parsers["augment"].add_argument("--records", required=True)
    parsers["train-student"].add_argument(
        "--data", action="append", required=True,
        help="training JSONL (repeat to union several sets)",
    )
    parsers["train-student"].add_argument("--mentor")
    parsers["train-student"].add_argument("--metrics")
    parsers["evaluate"].add_argument("--model", required=True)
    parsers["evaluate"].add_argument("--records", required=True)
    parsers["evaluate"].add_argument("--train-records")
    parsers["sweep"].add_argument("--experiment", required=True,
                                  choices=sorted(SWEEPS))
    parsers["plot-data"].add_argument("--results", required=True)
    return parser


def _resolve_config(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    ablation = getattr(args, "ablation", None)
    return apply_overrides(
        config,
        seed=getattr(args, "seed", None),
        lam=getattr(args, "lam", None),
        tau=getattr(args, "tau", None),
        degree=getattr(args, "degree", None),
        fraction=getattr(args, "fraction", None),
        teacher=getattr(args, "teacher", None),
        ablation=ablation.replace("-", "_") if ablation else None,
        out_dir=getattr(args, "out", None) if args.command == "sweep" else None,
    )


def _out_path(args, default: str) -> Path:
    path = Path(args.out) if args.out else Path(default)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _stage_manifest(path: Path, stage: str, config: ExperimentConfig, inputs: dict) -> None:
    out_dir = path if path.is_dir() else path.parent
    pipeline.write_manifest(out_dir, stage, config, {"inputs": inputs})


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    from .runtime import limit_blas_threads

    limit_blas_threads()
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return 1
    try:
        return _dispatch(args)
    except MentorKDError as exc:
        print(f"mentorkd: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"mentorkd: error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    config = _resolve_config(args)
    command = args.command

    if command == "gen-data":
        out = Path(args.out or "data")
        out.mkdir(parents=True, exist_ok=True)
        train, test = make_splits(
            config.task_kind, config.n_train, config.n_test,
            config.seed, config.difficulty,
        )
        save_records(train, out / "train_records.jsonl")
        save_records(test, out / "test_records.jsonl")
        _stage_manifest(out, "gen-data", config, {})
        print(f"wrote {len(train)} train / {len(test)} test records to {out}")
        return 0

    if command == "annotate":
        pairs = load_records(args.records)
        annotations = pipeline.annotate_records(config, pairs, config.seed)
        out = _out_path(args, "annotations.jsonl")
        save_annotations(annotations, out)
        _stage_manifest(out, "annotate", config, {"records": args.records})
        print(f"wrote {len(annotations)} annotations to {out}")
        return 0

    if command == "filter":
        pairs = load_records(args.records)
        records = [record for record, _ in pairs]
        annotations = load_annotations(args.annotations)
        kept = filter_annotations(annotations, records)
        out = _out_path(args, "annotations_kept.jsonl")
        save_annotations(kept, out)
        _stage_manifest(out, "filter", config,
                        {"records": args.records, "annotations": args.annotations})
        print(f"kept {len(kept)} of {len(annotations)} annotations -> {out}")
        return 0

    if command == "train-mentor":
        teacher_set = load_jsonl(args.data)
        mentor = new_model(config, config.mentor_preset, "mentor", config.seed)
        hp = hyperparameters(config, config.seed, epochs=config.mentor_epochs,
                             ablation=distill.Ablation.NO_SLD)
        _, losses = distill.train_mentor(mentor, teacher_set, hp)
        out = _out_path(args, "mentor.npz")
        save_checkpoint(mentor, out)
        _stage_manifest(out, "train-mentor", config,
                        {"data": args.data, "loss_curve": losses})
        print(f"mentor saved to {out} (final loss {losses[-1]:.4f})" if losses
              else f"mentor saved to {out}")
        return 0

    if command == "augment":
        mentor, _ = load_checkpoint(args.mentor)
        pairs = load_records(args.records)
        records = [record for record, _ in pairs]
        d_mentor = augment_for(config, config.seed, mentor, records)
        out = _out_path(args, "d_mentor.jsonl")
        save_jsonl(d_mentor, out)
        _stage_manifest(out, "augment", config,
                        {"mentor": args.mentor, "records": args.records})
        print(f"wrote {len(d_mentor)} mentor examples to {out}")
        return 0

    if command == "train-student":
        sets = [load_jsonl(path) for path in args.data]
        train_set = sets[0]
        for extra in sets[1:]:
            train_set = union_sets(train_set, extra)
        mentor = None
        if args.mentor:
            mentor, _ = load_checkpoint(args.mentor)
        student = new_model(config, config.student_preset, "student", config.seed)
        hp = hyperparameters(config, config.seed)
        distill.train_student(
            student, mentor, train_set, hp,
            metrics_path=args.metrics,
            task_kind=config.task_kind,
        )
        out = _out_path(args, "student.npz")
        save_checkpoint(student, out)
        _stage_manifest(out, "train-student", config,
                        {"data": args.data, "mentor": args.mentor})
        print(f"student saved to {out}")
        return 0

    if command == "evaluate":
        model, _ = load_checkpoint(args.model)
        records = [record for record, _ in load_records(args.records)]
        train_questions = None
        if args.train_records:
            train_questions = {
                record.question for record, _ in load_records(args.train_records)
            }
        report = evaluate(model, records, train_questions=train_questions,
                          max_new_tokens=config.max_new_tokens)
        payload = {
            "task": report.task.value,
            "split_size": report.split_size,
            "accuracy": report.accuracy,
        }
        if args.out:
            out = _out_path(args, "eval_report.json")
            with open(out, "w") as fh:
                json.dump(payload, fh, indent=2)
            _stage_manifest(out, "evaluate", config,
                            {"model": args.model, "records": args.records})
        print(json.dumps(payload))
        return 0

    if command == "sweep":
        result = SWEEPS[args.experiment](config)
        for cell in result.cells:
            print(f"{args.experiment} {cell.label}: "
                  f"{cell.mean:.4f} +/- {cell.std:.4f} (n={len(cell.accuracies)})")
        for note in result.notes:
            print(f"note: {note}")
        return 0

    if command == "plot-data":
        result = load_sweep(args.results)
        rows = plot_data(result)
        target = open(args.out, "w", newline="") if args.out else sys.stdout
        try:
            writer = csv.writer(target)
            writer.writerow(["x", "y", "sigma", "series"])
            for row in rows:
                writer.writerow([row["x"], f"{row['y']:.6f}",
                                 f"{row['sigma']:.6f}", row["series"]])
        finally:
            if args.out:
                target.close()
        return 0

    if command == "pipeline":
        out = args.out or str(Path(config.out_dir) / "pipeline")
        summary = pipeline.run_pipeline(config, out)
        print(json.dumps(summary))
        return 0

    raise AssertionError(f"unhandled command {command!r}")


if __name__ == "__main__":
    sys.exit(main())
