"""Filtering, reformatting, set algebra, and JSONL persistence."""

from __future__ import annotations

import json
from collections import Counter

import pytest

from mentorkd.dataset import (
    DistillationSet,
    LabelTemplate,
    Provenance,
    TrainingExample,
    filter_annotations,
    load_annotations,
    load_jsonl,
    load_records,
    reformat,
    sample_per_question,
    save_annotations,
    save_jsonl,
    save_records,
    strip_final_answer,
    subsample_fraction,
    union_sets,
    validate_set,
)
from mentorkd.errors import ConfigurationError, DataFormatError, DanglingReferenceError
from mentorkd.tasks import MARKER_VERBOSE, TaskKind, extract_final_answer, generate_dataset
from mentorkd.teacher import AnnotationSource, CoTAnnotation, TeacherConfig, annotate_oracle


@pytest.fixture(scope="module")
def pairs():
    return generate_dataset(TaskKind.LAST_LETTER, 30, seed=4, difficulty=2)


@pytest.fixture(scope="module")
def records(pairs):
    return [record for record, _ in pairs]


@pytest.fixture(scope="module")
def mixed_annotations(pairs):
    return annotate_oracle(pairs, TeacherConfig(corruption_rate=0.4, seed=8))


def _example(qid=0, source=AnnotationSource.TEACHER, label="x. --> y.", gold="y"):
    return TrainingExample(qid, f"question {qid}", label, gold, source)


# -- filter -------------------------------------------------------------------

def test_filter_keeps_all_correct(pairs, records):
    annotations = annotate_oracle(pairs, TeacherConfig(corruption_rate=0.0, seed=0,
                                                       annotations_per_question=1))
    assert filter_annotations(annotations, records) == annotations


def test_filter_drops_all_incorrect(pairs, records):
    annotations = annotate_oracle(
        pairs, TeacherConfig(corruption_rate=1.0, seed=0, annotations_per_question=2)
    )
    assert filter_annotations(annotations, records) == []


def test_filter_mixed_matches_brute_force_recount(mixed_annotations, records):
    kept = filter_annotations(mixed_annotations, records)
    expected = sum(1 for a in mixed_annotations if a.correct)
    assert len(kept) == expected
    # relative order preserved
    it = iter(mixed_annotations)
    for ann in kept:
        while next(it) is not ann:
            pass


def test_filter_dangling_id_errors(records):
    stray = CoTAnnotation(9999, "steps", "x", AnnotationSource.TEACHER, True)
    with pytest.raises(DanglingReferenceError, match="9999"):
        filter_annotations([stray], records)


# -- reformat -----------------------------------------------------------------

def test_reformat_compact_matches_template_example():
    from mentorkd.tasks import QuestionRecord

    record = QuestionRecord(0, "Take the last letters ...", "oyla", TaskKind.LAST_LETTER)
    annotation = CoTAnnotation(0, "1. o 2. y 3. l 4. a", "oyla",
                               AnnotationSource.TEACHER, True)
    dset = reformat([annotation], [record], LabelTemplate.COMPACT)
    assert dset.examples[0].label == "1. o 2. y 3. l 4. a. --> oyla."


def test_reformat_verbose_has_one_trailing_marker(mixed_annotations, records):
    kept = filter_annotations(mixed_annotations, records)
    dset = reformat(kept, records, LabelTemplate.VERBOSE)
    for ex in dset.examples:
        assert ex.label.count(MARKER_VERBOSE) == 1
        assert ex.label.endswith(f"{MARKER_VERBOSE} {ex.gold_answer}.")


def test_reformat_strips_existing_conclusion(mixed_annotations, records):
    kept = filter_annotations(mixed_annotations, records)
    dset = reformat(kept, records, LabelTemplate.COMPACT)
    for ex in dset.examples:
        # the oracle rationale carried a verbose conclusion; it must be gone
        assert MARKER_VERBOSE not in ex.label
        assert ex.label.endswith(f"--> {ex.gold_answer}.")


def test_reformat_roundtrip_property(records, pairs):
    # labels re-parse to gold over a large generated batch
    annotations = annotate_oracle(
        pairs, TeacherConfig(corruption_rate=0.3, seed=12, annotations_per_question=34)
    )
    kept = filter_annotations(annotations, records)
    assert len(kept) > 500
    for template in LabelTemplate:
        dset = reformat(kept, records, template)
        for ex in dset.examples:
            assert extract_final_answer(TaskKind.LAST_LETTER, ex.label) == ex.gold_answer


def test_reformat_rejects_incorrect_annotation(records):
    bad = CoTAnnotation(0, "steps", "zz", AnnotationSource.TEACHER, False)
    with pytest.raises(ValueError, match="incorrect"):
        reformat([bad], records)


def test_strip_final_answer_handles_missing_marker():
    assert strip_final_answer("no conclusion here") == "no conclusion here"
    assert strip_final_answer("steps. --> oy.") == "steps"
    assert strip_final_answer("a. Therefore, the answer is 5.") == "a"


# -- union / sampling / subsampling --------------------------------------------

def test_union_sizes_add():
    teacher = DistillationSet(tuple(_example(i) for i in range(10)), Provenance.TEACHER_ONLY)
    mentor = DistillationSet(
        tuple(_example(i, AnnotationSource.MENTOR) for i in range(20)),
        Provenance.MENTOR_ONLY,
    )
    union = union_sets(teacher, mentor)
    assert len(union) == 30
    assert union.provenance is Provenance.UNION


def test_union_with_empty_is_identity():
    teacher = DistillationSet(tuple(_example(i) for i in range(5)), Provenance.TEACHER_ONLY)
    empty = DistillationSet((), Provenance.MENTOR_ONLY)
    assert union_sets(teacher, empty).examples == teacher.examples


def test_union_per_question_histogram_adds():
    teacher = DistillationSet(
        tuple(_example(i % 3) for i in range(9)), Provenance.TEACHER_ONLY
    )
    mentor = DistillationSet(
        tuple(_example(i % 2, AnnotationSource.MENTOR) for i in range(6)),
        Provenance.MENTOR_ONLY,
    )
    union = union_sets(teacher, mentor)
    histogram = Counter(ex.question_id for ex in union.examples)
    expected = Counter(ex.question_id for ex in teacher.examples)
    expected.update(ex.question_id for ex in mentor.examples)
    assert histogram == expected


def test_union_associative_up_to_ordering():
    sets = [
        DistillationSet(tuple(_example(i + 10 * k) for i in range(4)),
                        Provenance.TEACHER_ONLY)
        for k in range(3)
    ]
    left = union_sets(union_sets(sets[0], sets[1]), sets[2])
    right = union_sets(sets[0], union_sets(sets[1], sets[2]))
    assert Counter(left.examples) == Counter(right.examples)


def test_sample_per_question_identity_when_k_large():
    dset = DistillationSet(tuple(_example(i % 4) for i in range(12)), Provenance.TEACHER_ONLY)
    assert sample_per_question(dset, 5, seed=0).examples == dset.examples


def test_sample_per_question_three_of_six():
    dset = DistillationSet(
        tuple(_example(i % 7) for i in range(42)), Provenance.TEACHER_ONLY
    )
    sampled = sample_per_question(dset, 3, seed=1)
    histogram = Counter(ex.question_id for ex in sampled.examples)
    assert all(count == 3 for count in histogram.values())
    assert len(histogram) == 7


def test_sample_per_question_deterministic():
    dset = DistillationSet(tuple(_example(i % 5) for i in range(40)), Provenance.TEACHER_ONLY)
    a = sample_per_question(dset, 2, seed=9)
    b = sample_per_question(dset, 2, seed=9)
    assert a.examples == b.examples
    c = sample_per_question(dset, 2, seed=10)
    assert a.examples != c.examples


def test_sample_per_question_validates_k():
    dset = DistillationSet((), Provenance.TEACHER_ONLY)
    with pytest.raises(ConfigurationError):
        sample_per_question(dset, 0, seed=0)


def test_subsample_fraction_identity():
    dset = DistillationSet(tuple(_example(i) for i in range(10)), Provenance.TEACHER_ONLY)
    assert subsample_fraction(dset, 1.0, seed=0).examples == dset.examples


def test_subsample_fraction_keeps_ceil_of_questions():
    dset = DistillationSet(
        tuple(_example(i % 100) for i in range(300)), Provenance.TEACHER_ONLY
    )
    kept = subsample_fraction(dset, 0.4, seed=3)
    kept_ids = {ex.question_id for ex in kept.examples}
    assert len(kept_ids) == 40
    # whole questions kept: every kept id retains all 3 of its examples
    histogram = Counter(ex.question_id for ex in kept.examples)
    assert all(count == 3 for count in histogram.values())


def test_subsample_fraction_deterministic_and_subset():
    dset = DistillationSet(
        tuple(_example(i % 50) for i in range(100)), Provenance.TEACHER_ONLY
    )
    a = subsample_fraction(dset, 0.3, seed=5)
    b = subsample_fraction(dset, 0.3, seed=5)
    assert a.examples == b.examples
    for fraction in (0.1, 0.5, 0.9):
        kept_ids = {ex.question_id for ex in
                    subsample_fraction(dset, fraction, seed=5).examples}
        assert kept_ids <= {ex.question_id for ex in dset.examples}


def test_subsample_fraction_range_validation():
    dset = DistillationSet((), Provenance.TEACHER_ONLY)
    for bad in (0.0, -0.2, 1.01):
        with pytest.raises(ConfigurationError):
            subsample_fraction(dset, bad, seed=0)


# -- persistence ---------------------------------------------------------------

def test_jsonl_roundtrip_empty(tmp_path):
    path = tmp_path / "empty.jsonl"
    save_jsonl(DistillationSet((), Provenance.UNION), path)
    assert path.read_text() == ""
    assert load_jsonl(path).examples == ()


def test_jsonl_roundtrip_and_field_order(tmp_path, mixed_annotations, records):
    kept = filter_annotations(mixed_annotations, records)[:3]
    dset = reformat(kept, records, LabelTemplate.COMPACT)
    path = tmp_path / "set.jsonl"
    save_jsonl(dset, path)
    loaded = load_jsonl(path)
    assert loaded.examples == dset.examples
    assert loaded.provenance is Provenance.TEACHER_ONLY
    first = path.read_text().splitlines()[0]
    assert list(json.loads(first)) == [
        "question_id", "question", "label", "gold_answer", "source",
    ]
    # byte-level reproducibility
    path2 = tmp_path / "set2.jsonl"
    save_jsonl(loaded, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_jsonl_missing_field_cites_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"question_id": 1, "question": "q", "gold_answer": "y", "source": "teacher"}\n')
    with pytest.raises(DataFormatError, match="line 1.*label"):
        load_jsonl(path)


def test_jsonl_invalid_json_cites_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"question_id": 1}\nnot json at all\n')
    with pytest.raises(DataFormatError, match="line 1"):
        load_jsonl(path)


def test_records_roundtrip(tmp_path, pairs):
    path = tmp_path / "records.jsonl"
    save_records(pairs, path)
    assert load_records(path) == pairs


def test_annotations_roundtrip(tmp_path, mixed_annotations):
    path = tmp_path / "annotations.jsonl"
    save_annotations(mixed_annotations, path)
    assert load_annotations(path) == mixed_annotations


def test_validate_set_flags_bad_label():
    bad = DistillationSet(
        (_example(0, label="x. --> wrong.", gold="y"),), Provenance.TEACHER_ONLY
    )
    with pytest.raises(DataFormatError, match="question 0"):
        validate_set(bad, TaskKind.LAST_LETTER)
