"""Shared fixtures and finite-difference helpers."""

from __future__ import annotations

import numpy as np
import pytest

from mentorkd.runtime import limit_blas_threads

limit_blas_threads()

from mentorkd.dataset import LabelTemplate, filter_annotations, reformat
from mentorkd.model import CharTokenizer, ModelConfig, TinyTransformer
from mentorkd.tasks import TaskKind, generate_dataset
from mentorkd.teacher import TeacherConfig, annotate_oracle

MICRO = ModelConfig(layers=1, model_dim=32, heads=2, feedforward_dim=128, max_sequence=128)


@pytest.fixture(scope="session")
def tokenizer():
    return CharTokenizer()


@pytest.fixture()
def micro_model(tokenizer):
    return TinyTransformer(MICRO, tokenizer, role="student", seed=0)


@pytest.fixture(scope="session")
def tiny_pairs():
    return generate_dataset(TaskKind.LAST_LETTER, 8, seed=11, difficulty=2)


@pytest.fixture(scope="session")
def tiny_teacher_set(tiny_pairs):
    records = [r for r, _ in tiny_pairs]
    annotations = annotate_oracle(
        tiny_pairs, TeacherConfig(corruption_rate=0.0, seed=0, annotations_per_question=1)
    )
    return reformat(filter_annotations(annotations, records), records, LabelTemplate.COMPACT)


def central_difference(fn, array: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Dense central-difference gradient of scalar fn w.r.t. array (in place)."""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        above = fn()
        flat[i] = orig - h
        below = fn()
        flat[i] = orig
        out[i] = (above - below) / (2.0 * h)
    return grad


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())
