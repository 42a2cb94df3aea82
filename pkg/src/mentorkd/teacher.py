"""Chain-of-thought annotation sources.

Two interchangeable teachers produce (rationale, prediction) annotations for
question records:

* `annotate_oracle` — a scripted teacher that renders the gold rationale and
  corrupts a controllable fraction of annotations using explicit failure
  modes (wrong conclusion, rationale/answer inconsistency, truncated
  reasoning). Fully deterministic per (seed, question id, annotation index).
* `annotate_remote` — a client for a chat-completions-style HTTP endpoint
  running the two-stage prompt protocol ("Let's think step by step", then
  answer extraction), with retry/backoff and a request-rate cap.
"""

from __future__ import annotations

import logging
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import requests

from .errors import ConfigurationError
from .tasks import (
    MARKER_VERBOSE,
    GoldRationale,
    QuestionRecord,
    TaskKind,
    extract_final_answer,
    normalize_answer,
)

log = logging.getLogger(__name__)


class AnnotationSource(str, Enum):
    TEACHER = "teacher"
    MENTOR = "mentor"


class CorruptionMode(str, Enum):
    WRONG_FINAL_ANSWER = "wrong_final_answer"
    INCONSISTENT_FINAL_ANSWER = "inconsistent_final_answer"
    TRUNCATED_RATIONALE = "truncated_rationale"


ALL_CORRUPTION_MODES = (
    CorruptionMode.WRONG_FINAL_ANSWER,
    CorruptionMode.INCONSISTENT_FINAL_ANSWER,
    CorruptionMode.TRUNCATED_RATIONALE,
)


@dataclass(frozen=True)
class CoTAnnotation:
    """A rationale + final prediction for one question, from teacher or mentor."""

    question_id: int
    rationale: str
    prediction: str
    source: AnnotationSource
    correct: bool


@dataclass(frozen=True)
class TeacherConfig:
    corruption_rate: float = 0.4
    corruption_modes: tuple[CorruptionMode, ...] = ALL_CORRUPTION_MODES
    seed: int = 0
    annotations_per_question: int = 6

    def __post_init__(self) -> None:
        if not 0.0 <= self.corruption_rate <= 1.0:
            raise ConfigurationError(
                f"corruption_rate must be in [0, 1], got {self.corruption_rate}"
            )
        if self.annotations_per_question < 1:
            raise ConfigurationError(
                f"annotations_per_question must be >= 1, got {self.annotations_per_question}"
            )
        if self.corruption_rate > 0 and not self.corruption_modes:
            raise ConfigurationError("corruption_rate > 0 requires at least one mode")


# ---------------------------------------------------------------------------
# Oracle teacher
# ---------------------------------------------------------------------------

def annotate_oracle(
    pairs: list[tuple[QuestionRecord, GoldRationale]], config: TeacherConfig
) -> list[CoTAnnotation]:
    """Emit annotations_per_question annotations per record.

    Each annotation is independently corrupted with probability
    corruption_rate using a uniformly chosen enabled mode, so the number of
    correct annotations is exactly Binomial(n, 1 - rate). A corrupted
    annotation is always incorrect: if a mode's natural wrong answer happens
    to coincide with the gold one (possible for truncated arithmetic), a
    guaranteed-wrong plausible answer is substituted.
    """
    out: list[CoTAnnotation] = []
    for record, rationale in pairs:
        for idx in range(config.annotations_per_question):
            rng = np.random.default_rng([config.seed, record.id, idx])
            corrupted = bool(rng.random() < config.corruption_rate)
            if not corrupted:
                out.append(_render_annotation(record, rationale.steps, record.gold_answer,
                                              record.gold_answer))
                continue
            mode = config.corruption_modes[int(rng.integers(len(config.corruption_modes)))]
            out.append(_corrupt(record, rationale, mode, rng))
    return out


def _render_annotation(
    record: QuestionRecord, steps: tuple[str, ...], conclusion: str, prediction: str
) -> CoTAnnotation:
    text = " ".join(steps) + f" {MARKER_VERBOSE} {conclusion}."
    return CoTAnnotation(
        question_id=record.id,
        rationale=text,
        prediction=prediction,
        source=AnnotationSource.TEACHER,
        correct=prediction == record.gold_answer,
    )


def _corrupt(
    record: QuestionRecord,
    rationale: GoldRationale,
    mode: CorruptionMode,
    rng: np.random.Generator,
) -> CoTAnnotation:
    gold = record.gold_answer
    if mode is CorruptionMode.WRONG_FINAL_ANSWER:
        wrong = _plausible_wrong(record.task, gold, rng)
        return _render_annotation(record, rationale.steps, wrong, wrong)
    if mode is CorruptionMode.INCONSISTENT_FINAL_ANSWER:
        wrong = _plausible_wrong(record.task, gold, rng)
        return _render_annotation(record, rationale.steps, gold, wrong)
    # TRUNCATED_RATIONALE: drop the last step, conclude from the partial state
    steps = rationale.steps[:-1]
    partial = _partial_answer(record, steps)
    if not partial or partial == gold:
        partial = _plausible_wrong(record.task, gold, rng)
    return _render_annotation(record, steps, partial, partial)


def _plausible_wrong(kind: TaskKind, gold: str, rng: np.random.Generator) -> str:
    """A normalized answer of the right shape that differs from gold."""
    if kind is TaskKind.LAST_LETTER:
        pos = int(rng.integers(len(gold)))
        alphabet = "abcdefghijklmnopqrstuvwxyz"
        replacement = alphabet[int(rng.integers(26))]
        while replacement == gold[pos]:
            replacement = alphabet[int(rng.integers(26))]
        return gold[:pos] + replacement + gold[pos + 1:]
    if kind is TaskKind.SHUFFLED_OBJECTS:
        options = [c for c in "abc" if c != gold]
        return options[int(rng.integers(len(options)))]
    if kind is TaskKind.CHAIN_ARITHMETIC:
        offset = int(rng.integers(1, 4)) * (1 if rng.random() < 0.5 else -1)
        return str(int(gold) + offset)
    raise ConfigurationError(f"unknown task kind: {kind!r}")


_STEP_LETTER = re.compile(r"- ([a-z])\.$")
_STEP_RESULT = re.compile(r"= (-?\d+)\.$")
_STEP_START = re.compile(r"Start with (-?\d+)\.$")
_ASKED_PERSON = re.compile(r"Which ball does (\w+) have")
_CHOICE_COLOR = re.compile(r"\(([A-C])\) (\w+) ball")


def _partial_answer(record: QuestionRecord, steps: tuple[str, ...]) -> str:
    """Answer a lazy reader would give from the truncated step list."""
    kind = record.task
    if kind is TaskKind.LAST_LETTER:
        letters = [m.group(1) for m in map(_STEP_LETTER.search, steps) if m]
        return "".join(letters)
    if kind is TaskKind.CHAIN_ARITHMETIC:
        last = steps[-1]
        m = _STEP_RESULT.search(last) or _STEP_START.search(last)
        return m.group(1) if m else ""
    if kind is TaskKind.SHUFFLED_OBJECTS:
        asked = _ASKED_PERSON.search(record.question)
        if not asked:
            return ""
        holder = re.search(rf"{asked.group(1)} - (\w+)", steps[-1])
        if not holder:
            return ""
        for letter, color in _CHOICE_COLOR.findall(record.question):
            if color == holder.group(1):
                return letter.lower()
        return ""
    return ""


# ---------------------------------------------------------------------------
# Remote teacher (chat-completions endpoint)
# ---------------------------------------------------------------------------

API_KEY_ENV = "MENTORKD_API_KEY"
_RETRYABLE_STATUS = {429}


@dataclass(frozen=True)
class RemoteEndpointConfig:
    url: str
    model: str = "gpt-3.5-turbo"
    temperature: float = 0.7
    requests_per_minute: float = 60.0
    max_attempts: int = 5
    backoff_base: float = 1.0
    backoff_factor: float = 2.0
    max_concurrency: int = 4
    timeout: float = 30.0


@dataclass(frozen=True)
class RemoteFailure:
    question_id: int
    error: str
    attempts: int


@dataclass
class RemoteAnnotationResult:
    annotations: list[CoTAnnotation] = field(default_factory=list)
    failures: list[RemoteFailure] = field(default_factory=list)


class _RateLimiter:
    """Serializes request starts so the configured requests/minute holds."""

    def __init__(self, requests_per_minute: float):
        self._interval = 60.0 / requests_per_minute if requests_per_minute > 0 else 0.0
        self._lock = threading.Lock()
        self._next_allowed = 0.0

    def acquire(self) -> None:
        if self._interval <= 0:
            return
        while True:
            with self._lock:
                now = time.monotonic()
                if now >= self._next_allowed:
                    self._next_allowed = now + self._interval
                    return
                wait = self._next_allowed - now
            time.sleep(wait)


class RemoteCallError(Exception):
    def __init__(self, message: str, attempts: int):
        super().__init__(message)
        self.attempts = attempts


def _post_with_retry(
    session: requests.Session,
    config: RemoteEndpointConfig,
    headers: dict,
    prompt: str,
    limiter: _RateLimiter,
) -> tuple[str, int]:
    """POST one chat message; returns (completion text, attempts used)."""
    payload = {
        "model": config.model,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": config.temperature,
    }
    last_error = "unknown error"
    for attempt in range(1, config.max_attempts + 1):
        limiter.acquire()
        try:
            resp = session.post(config.url, json=payload, headers=headers,
                                timeout=config.timeout)
        except requests.RequestException as exc:
            last_error = f"transport error: {exc}"
        else:
            if resp.status_code == 200:
                try:
                    return resp.json()["choices"][0]["message"]["content"], attempt
                except (ValueError, KeyError, IndexError, TypeError) as exc:
                    raise RemoteCallError(f"malformed response body: {exc}", attempt)
            if resp.status_code in _RETRYABLE_STATUS or resp.status_code >= 500:
                last_error = f"HTTP {resp.status_code}"
            else:
                raise RemoteCallError(f"HTTP {resp.status_code}", attempt)
        if attempt < config.max_attempts:
            delay = config.backoff_base * config.backoff_factor ** (attempt - 1)
            log.info("retrying after %s (attempt %d/%d, sleeping %.2fs)",
                     last_error, attempt, config.max_attempts, delay)
            time.sleep(delay)
    raise RemoteCallError(f"retries exhausted: {last_error}", config.max_attempts)


def annotate_remote(
    records: list[QuestionRecord], endpoint: RemoteEndpointConfig
) -> RemoteAnnotationResult:
    """Two-stage Zero-shot-CoT annotation against a chat endpoint.

    Stage 1 prompts `Q: {q}. A: Let's think step by step.` and keeps the
    completion as the rationale; stage 2 re-prompts with the rationale plus
    the answer marker and extracts the prediction. Per-question failures are
    recorded and the batch continues; results are ordered by question id.
    """
    api_key = os.environ.get(API_KEY_ENV)
    if not api_key:
        raise ConfigurationError(
            f"environment variable {API_KEY_ENV} is not set (required for the remote teacher)"
        )
    headers = {"Authorization": f"Bearer {api_key}"}
    limiter = _RateLimiter(endpoint.requests_per_minute)
    session = requests.Session()
    result = RemoteAnnotationResult()
    result_lock = threading.Lock()

    def annotate_one(record: QuestionRecord) -> None:
        prompt1 = f"Q: {record.question}. A: Let's think step by step."
        try:
            rationale, attempts1 = _post_with_retry(session, endpoint, headers,
                                                    prompt1, limiter)
            prompt2 = f"{prompt1} {rationale} {MARKER_VERBOSE}"
            completion, attempts2 = _post_with_retry(session, endpoint, headers,
                                                     prompt2, limiter)
        except RemoteCallError as exc:
            log.warning("question %d failed: %s", record.id, exc)
            with result_lock:
                result.failures.append(RemoteFailure(record.id, str(exc), exc.attempts))
            return
        prediction = extract_final_answer(record.task, prompt2 + completion)
        annotation = CoTAnnotation(
            question_id=record.id,
            rationale=rationale.strip(),
            prediction=prediction,
            source=AnnotationSource.TEACHER,
            correct=prediction == normalize_answer(record.task, record.gold_answer),
        )
        log.info("question %d annotated in %d attempts", record.id,
                 attempts1 + attempts2)
        with result_lock:
            result.annotations.append(annotation)

    with ThreadPoolExecutor(max_workers=endpoint.max_concurrency) as pool:
        list(pool.map(annotate_one, records))
    result.annotations.sort(key=lambda a: a.question_id)
    result.failures.sort(key=lambda f: f.question_id)
    return result
