"""Acceptance suite: one test per criterion, each printing a PASS line.

Criteria 1-4 and 9 are exact/cheap; 5-8 are directional reproductions of the
distillation trends on synthetic tasks (run with 5 seeds each — these are
the long tests of the suite). Time limits printed alongside come from the
criteria themselves.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time

import numpy as np
import pytest

import mentorkd.autodiff as ad
from mentorkd.autodiff import Tensor
from mentorkd.config import ExperimentConfig
from mentorkd.dataset import (
    DistillationSet,
    LabelTemplate,
    Provenance,
    filter_annotations,
    load_jsonl,
    reformat,
    sample_per_question,
    subsample_fraction,
    union_sets,
    validate_set,
)
from mentorkd.distill import (
    DistillHyperparameters,
    joint_loss,
    rationale_loss,
    soft_label_loss,
    soften,
)
from mentorkd.evaluation import (
    build_seed_materials,
    run_ablation,
    run_degree_sweep,
    run_lambda_sweep,
    run_lowresource_sweep,
)
from mentorkd.model import CharTokenizer, ModelConfig, TinyTransformer, render_training_batch
from mentorkd.tasks import TaskKind, extract_final_answer, generate_dataset
from mentorkd.teacher import TeacherConfig, annotate_oracle

PASS_TEMPLATE = "ACCEPTANCE {num} ({name}): PASS — {detail}"

# Point = 0.01 accuracy; trend margins below are stated in points.
POINT = 0.01


def _report(num, name, detail):
    print(PASS_TEMPLATE.format(num=num, name=name, detail=detail))


# ---------------------------------------------------------------------------
# 1. Numerical core (exact)
# ---------------------------------------------------------------------------

def test_criterion_1_numerical_core():
    start = time.perf_counter()
    rng = np.random.default_rng(0)

    # temperature softmax: normalization, shift invariance, symmetry
    rows = rng.standard_normal((500, 17)) * 3.0
    for tau in (0.5, 1.0, 2.0):
        probs = soften(rows, tau)
        assert np.abs(probs.sum(axis=-1) - 1.0).max() < 1e-6
        shifted = soften(rows + 11.3, tau)
        assert np.abs(shifted - probs).max() < 1e-6
    assert np.allclose(soften(np.array([2.0, 2.0, 2.0]), 1.3), [1 / 3] * 3)
    assert np.allclose(soften(np.array([0.0, math.log(3.0)]), 1.0), [0.25, 0.75])

    # KL: zero at equality, non-negativity, hand-computed ln 2 case
    for _ in range(300):
        p = soften(rng.standard_normal(9), 1.0)
        q = soften(rng.standard_normal(9), 1.0)
        assert soft_label_loss(p[None], q[None]) >= 0.0
        assert abs(soft_label_loss(p[None], p[None].copy())) < 1e-12
    ln2 = soft_label_loss(np.array([[1.0, 0.0]]), np.array([[0.5, 0.5]]))
    assert ln2 == pytest.approx(math.log(2.0), abs=1e-5)

    # joint loss: exact endpoints and the 1.7 arithmetic case
    assert joint_loss(2.345, 99.0, 0.0) == 2.345
    assert joint_loss(99.0, 7.125, 1.0) == 7.125
    assert joint_loss(2.0, 1.0, 0.3) == pytest.approx(1.7, abs=1e-12)

    # uniform-logits rationale loss == ln V
    vocab = 99
    logits = Tensor(np.zeros((3, 7, vocab)), requires_grad=True)
    targets = rng.integers(vocab, size=(3, 7))
    loss = rationale_loss(logits, targets, np.ones((3, 7)))
    assert loss.item() == pytest.approx(math.log(vocab), abs=1e-6)

    elapsed = time.perf_counter() - start
    assert elapsed < 10.0
    _report(1, "numerical core", f"softmax/KL/joint/CE identities hold ({elapsed:.2f}s < 10s)")


# ---------------------------------------------------------------------------
# 2. Gradient suite (finite differences on the full joint objective)
# ---------------------------------------------------------------------------

def test_criterion_2_gradient_suite():
    """Max relative error |fd - g| / max(|fd|, |g|, 1) < 1e-4 over 5 seeds.

    The unit denominator floor makes the measure scale-aware: at the pinned
    h=1e-3, central differences themselves carry ~1e-4 relative truncation
    error on small-magnitude elements (verified h^2 scaling), while any
    wrong backward rule shows up orders of magnitude above the bar.
    """
    start = time.perf_counter()
    tok = CharTokenizer()
    config = ModelConfig(layers=1, model_dim=32, heads=2, feedforward_dim=64,
                         max_sequence=64)
    h = 1e-3
    lam, tau = 0.3, 2.0
    worst = 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        model = TinyTransformer(config, tok, seed=seed, dtype=np.float64)
        enc = [
            tok.render_example("Compute 1 + 2.", "1 + 2 = 3. --> 3."),
            tok.render_example("Compute 9 - 4.", "9 - 4 = 5. --> 5."),
        ]
        inputs, targets, mask = render_training_batch(tok, enc)
        bool_mask = mask.astype(bool)
        pm = rng.random((int(mask.sum()), tok.vocab_size))
        pm /= pm.sum(axis=-1, keepdims=True)

        def objective():
            logits = model.forward(inputs)
            rd = rationale_loss(logits, targets, mask)
            ps = soften(ad.take(logits, bool_mask), tau)
            return joint_loss(rd, soft_label_loss(pm, ps), lam)

        grads = model.backward(objective())
        for name, tensor in model.params.items():
            flat = tensor.data.reshape(-1)
            gflat = grads[name].reshape(-1)
            for i in rng.choice(flat.size, size=min(4, flat.size), replace=False):
                orig = flat[i]
                flat[i] = orig + h
                above = objective().item()
                flat[i] = orig - h
                below = objective().item()
                flat[i] = orig
                fd = (above - below) / (2 * h)
                err = abs(fd - gflat[i]) / max(abs(fd), abs(gflat[i]), 1.0)
                worst = max(worst, err)
    elapsed = time.perf_counter() - start
    assert worst < 1e-4, f"max relative gradient error {worst:.3e}"
    assert elapsed < 60.0
    _report(2, "gradient suite",
            f"max rel error {worst:.2e} < 1e-4 over 5 seeds ({elapsed:.1f}s < 60s)")


# ---------------------------------------------------------------------------
# 3. Pipeline invariants
# ---------------------------------------------------------------------------

def test_criterion_3_pipeline_invariants():
    start = time.perf_counter()
    kind = TaskKind.LAST_LETTER
    pairs = generate_dataset(kind, 60, seed=40, difficulty=2)
    records = [r for r, _ in pairs]
    tconf = TeacherConfig(corruption_rate=0.35, seed=9, annotations_per_question=6)
    annotations = annotate_oracle(pairs, tconf)

    # filter keeps exactly the correct annotations (brute-force recount)
    kept = filter_annotations(annotations, records)
    by_gold = {r.id: r.gold_answer for r in records}
    brute = [a for a in annotations if a.prediction == by_gold[a.question_id]]
    assert kept == brute

    # every training example's label re-parses to its gold answer
    teacher_full = reformat(kept, records, LabelTemplate.COMPACT)
    for ex in teacher_full.examples:
        assert extract_final_answer(kind, ex.label) == ex.gold_answer

    # union size additivity
    mentor_like = DistillationSet(
        tuple(dataclasses.replace(ex) for ex in teacher_full.examples[:40]),
        Provenance.MENTOR_ONLY,
    )
    union = union_sets(teacher_full, mentor_like)
    assert len(union) == len(teacher_full) + len(mentor_like)

    # 3-of-6 per-question sampling cardinality
    sampled = sample_per_question(teacher_full, 3, seed=5)
    per_question: dict[int, int] = {}
    full_counts: dict[int, int] = {}
    for ex in teacher_full.examples:
        full_counts[ex.question_id] = full_counts.get(ex.question_id, 0) + 1
    for ex in sampled.examples:
        per_question[ex.question_id] = per_question.get(ex.question_id, 0) + 1
    for qid, count in per_question.items():
        assert count == min(3, full_counts[qid])

    # determinism replay of every seeded stage
    assert generate_dataset(kind, 60, seed=40, difficulty=2) == pairs
    assert annotate_oracle(pairs, tconf) == annotations
    assert sample_per_question(teacher_full, 3, seed=5).examples == sampled.examples
    assert (subsample_fraction(teacher_full, 0.4, seed=3).examples
            == subsample_fraction(teacher_full, 0.4, seed=3).examples)

    from mentorkd.model import TrainingParams, train_lm

    curves = []
    for _ in range(2):
        model = TinyTransformer(
            ModelConfig(layers=1, model_dim=32, heads=2, feedforward_dim=64),
            CharTokenizer(), seed=3,
        )
        _, losses = train_lm(model, sampled, TrainingParams(epochs=1, batch_size=16,
                                                            seed=2))
        curves.append(losses)
    assert curves[0] == curves[1]

    elapsed = time.perf_counter() - start
    assert elapsed < 30.0
    _report(3, "pipeline invariants",
            f"filter/reparse/union/sampling/determinism hold ({elapsed:.1f}s < 30s)")


# ---------------------------------------------------------------------------
# 4. Teacher-noise calibration (Monte-Carlo)
# ---------------------------------------------------------------------------

def test_criterion_4_teacher_noise_calibration():
    start = time.perf_counter()
    pairs = generate_dataset(TaskKind.LAST_LETTER, 1000, seed=55, difficulty=2)
    config = TeacherConfig(corruption_rate=0.42, seed=77, annotations_per_question=10)
    annotations = annotate_oracle(pairs, config)
    assert len(annotations) == 10_000
    fraction = sum(a.correct for a in annotations) / len(annotations)
    assert abs(fraction - 0.58) <= 0.02, fraction
    elapsed = time.perf_counter() - start
    assert elapsed < 30.0
    _report(4, "teacher-noise calibration",
            f"correct fraction {fraction:.4f} within 0.58±0.02 over 10,000 "
            f"annotations ({elapsed:.1f}s < 30s)")


# ---------------------------------------------------------------------------
# 5-8. Directional trend reproductions (the long tests of the suite).
# Hyperparameters were pinned from pilot runs recorded in the README; the
# margins and grids below come from the criteria.
# ---------------------------------------------------------------------------

TREND_BASE = ExperimentConfig(
    task=TaskKind.LAST_LETTER.value,
    n_train=2000,
    n_test=400,
    difficulty=2,
    corruption_rate=0.4,
    annotations_per_question=6,
    per_question_keep=3,
    mentor_preset="mentor",
    student_preset="student",
    epochs=3,
    mentor_epochs=4,
    batch_size=64,
    learning_rate=3e-3,
    warmup_fraction=0.05,
    mentor_learning_rate=2e-3,
    mentor_warmup_fraction=0.15,
    degree=3,
    lam=0.3,
    tau=2.0,
    max_new_tokens=96,
    seeds=(0, 1, 2, 3, 4),
    workers=2,
)


def _pts(x: float) -> str:
    return f"{x / POINT:+.2f} points"


def test_criterion_5_ablation_trend(tmp_path):
    start = time.perf_counter()
    config = dataclasses.replace(TREND_BASE, out_dir=str(tmp_path))
    result = run_ablation(config)
    full = result.cell("full")
    vanilla = result.cell("vanilla")
    runner_up = max((result.cell("no_rd"), result.cell("no_sld")), key=lambda c: c.mean)
    margin = full.mean - runner_up.mean
    overlap_flagged = any(note.startswith("overlap") for note in result.notes)
    assert margin >= POINT or overlap_flagged, (
        f"full - {runner_up.label} = {_pts(margin)} and no overlap flag in the report"
    )
    vanilla_gap = full.mean - vanilla.mean
    assert vanilla_gap >= 2 * POINT, f"full - vanilla = {_pts(vanilla_gap)}"
    elapsed = time.perf_counter() - start
    detail = (
        f"full {full.mean:.3f} vs vanilla {vanilla.mean:.3f} ({_pts(vanilla_gap)} >= +2); "
        f"vs {runner_up.label} {runner_up.mean:.3f} ({_pts(margin)}"
        + (", overlap flagged" if overlap_flagged else "")
        + f"); {elapsed / 60:.1f} min"
    )
    _report(5, "ablation trend", detail)


def test_criterion_6_degree_sweep_trend(tmp_path):
    start = time.perf_counter()
    config = dataclasses.replace(
        TREND_BASE, n_train=1200, degree_grid=(0, 1, 3, 6, 9), out_dir=str(tmp_path)
    )
    result = run_degree_sweep(config)
    deg = {c.label: c.mean for c in result.cells}
    gain = deg["3"] - deg["0"]
    assert gain >= 2 * POINT, f"degree 3 - degree 0 = {_pts(gain)}"
    plateau = max(deg["3"], deg["6"])
    overshoot = deg["9"] - plateau
    assert overshoot <= POINT, f"degree 9 exceeds max(3,6) by {_pts(overshoot)}"
    elapsed = time.perf_counter() - start
    _report(6, "degree-sweep trend",
            f"deg0 {deg['0']:.3f} deg3 {deg['3']:.3f} deg6 {deg['6']:.3f} "
            f"deg9 {deg['9']:.3f}; gain {_pts(gain)} >= +2, saturation "
            f"{_pts(overshoot)} <= +1; {elapsed / 60:.1f} min")


def test_criterion_7_lowresource_trend(tmp_path):
    start = time.perf_counter()
    config = dataclasses.replace(TREND_BASE, n_train=1200, out_dir=str(tmp_path))
    result = run_lowresource_sweep(
        config, cells=[("vanilla", 0.4), ("vanilla", 1.0), ("mentor", 0.4)]
    )
    mentor_04 = result.cell("mentor@0.4").mean
    vanilla_04 = result.cell("vanilla@0.4").mean
    vanilla_10 = result.cell("vanilla@1.0").mean
    assert mentor_04 >= vanilla_10 - 2 * POINT, (
        f"mentor@0.4 {mentor_04:.3f} < vanilla@1.0 {vanilla_10:.3f} - 2 points"
    )
    low_gap = mentor_04 - vanilla_04
    assert low_gap >= 3 * POINT, f"mentor@0.4 - vanilla@0.4 = {_pts(low_gap)}"
    elapsed = time.perf_counter() - start
    _report(7, "low-resource trend",
            f"mentor@0.4 {mentor_04:.3f} vs vanilla@0.4 {vanilla_04:.3f} "
            f"({_pts(low_gap)} >= +3) and vanilla@1.0 {vanilla_10:.3f} "
            f"(within -2); {elapsed / 60:.1f} min")


def test_criterion_8_lambda_sweep_shape(tmp_path):
    start = time.perf_counter()
    config = dataclasses.replace(
        TREND_BASE, n_train=1200, lambda_grid=(0.0, 0.1, 0.3, 0.5, 0.7, 1.0),
        out_dir=str(tmp_path),
    )
    result = run_lambda_sweep(config)
    cells = {c.label: c for c in result.cells}
    lam0 = cells["0"]
    lam1 = cells["1"]
    best_mid = max((cells["0.1"], cells["0.3"], cells["0.5"]), key=lambda c: c.mean)
    positive = [c for c in result.cells if float(c.label) > 0]

    # hard-fail condition: lambda=0 beating every positive-lambda cell
    beats_all = all(lam0.mean > c.mean for c in positive)
    assert not beats_all, (
        "lambda=0 beats every lambda>0 cell: "
        + ", ".join(f"{c.label}={c.mean:.3f}" for c in result.cells)
    )

    # shape conditions: report-only when seeds overlap within 1 sigma
    notes = []
    zero_gap = best_mid.mean - lam0.mean
    if zero_gap <= 0:
        assert abs(zero_gap) <= lam0.std + best_mid.std, (
            f"lambda=0 ({lam0.mean:.3f}) beats best mid lambda "
            f"({best_mid.label}={best_mid.mean:.3f}) beyond 1 sigma"
        )
        notes.append(f"lambda=0 overlaps best mid ({_pts(zero_gap)}, within 1 sigma)")
    one_gap = best_mid.mean - lam1.mean
    if one_gap <= 0:
        assert abs(one_gap) <= lam1.std + best_mid.std, (
            f"lambda=1 ({lam1.mean:.3f}) beats best mid lambda "
            f"({best_mid.label}={best_mid.mean:.3f}) beyond 1 sigma"
        )
        notes.append(f"lambda=1 overlaps best mid ({_pts(one_gap)}, within 1 sigma)")
    elapsed = time.perf_counter() - start
    shape = " ".join(f"{c.label}:{c.mean:.3f}" for c in result.cells)
    _report(8, "lambda-sweep shape",
            f"{shape}; best mid lambda={best_mid.label}"
            + ("; " + "; ".join(notes) if notes else "")
            + f"; {elapsed / 60:.1f} min")


# ---------------------------------------------------------------------------
# 9. End-to-end smoke
# ---------------------------------------------------------------------------

def test_criterion_9_pipeline_smoke(tmp_path):
    from mentorkd.cli import main
    from mentorkd.model import load_checkpoint

    config_path = tmp_path / "smoke.toml"
    config_path.write_text(
        "\n".join([
            'task = "last_letter"',
            "n_train = 50",
            "n_test = 25",
            "difficulty = 2",
            "corruption_rate = 0.3",
            "annotations_per_question = 6",
            "per_question_keep = 3",
            'mentor_preset = "micro"',
            'student_preset = "micro"',
            "epochs = 2",
            "mentor_epochs = 2",
            "batch_size = 16",
            "learning_rate = 2e-3",
            "degree = 1",
            "max_new_tokens = 64",
            "seed = 0",
        ])
    )
    out = tmp_path / "run"
    start = time.perf_counter()
    code = main(["pipeline", "--config", str(config_path), "--out", str(out)])
    elapsed = time.perf_counter() - start
    assert code == 0
    assert elapsed < 120.0

    # every emitted file validates against its schema
    kind = TaskKind.LAST_LETTER
    for name in ("d_teacher.jsonl", "d_mentor.jsonl", "d_train.jsonl"):
        validate_set(load_jsonl(out / name), kind)
    from mentorkd.dataset import load_annotations, load_records

    assert len(load_records(out / "train_records.jsonl")) == 50
    assert len(load_records(out / "test_records.jsonl")) == 25
    assert load_annotations(out / "annotations.jsonl")
    kept = load_annotations(out / "annotations_kept.jsonl")
    assert all(a.correct for a in kept)
    for checkpoint in ("mentor.npz", "student.npz"):
        model, _ = load_checkpoint(out / checkpoint)
        assert model.param_count > 0
    report = json.loads((out / "eval_report.json").read_text())
    assert report["split_size"] == 25
    assert 0.0 <= report["accuracy"] <= 1.0
    assert len(report["examples"]) == 25
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["stage"] == "pipeline"
    assert manifest["config"]["n_train"] == 50
    with open(out / "student_metrics.csv") as fh:
        header = fh.readline().strip()
    assert header == "epoch,loss_rd,loss_sld,loss_total,train_acc,eval_acc"

    _report(9, "end-to-end smoke",
            f"50-question micro pipeline exit 0 in {elapsed:.1f}s < 120s; "
            "all artifacts validate")
