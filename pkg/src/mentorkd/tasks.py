"""Synthetic multi-step reasoning task families.

Three families, each with a seeded generator, a gold-rationale templater,
and an answer normalizer:

* last letter concatenation (symbolic): concatenate the last letters of
  2-6 first names,
* shuffled objects (logical): track 3 balls through 3 pairwise swaps and
  answer as a multiple-choice letter,
* chain arithmetic: evaluate a left-to-right +/- chain over small integers.

Answers are stored pre-normalized so downstream filtering is a plain string
comparison. Generation is pure given (kind, n, seed, difficulty); there is
no hidden global RNG.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass
from enum import Enum

from .errors import ConfigurationError

# Final-answer markers recognized by extract_final_answer. The verbose one is
# used by teacher-style rationales, the compact one by training labels.
MARKER_VERBOSE = "Therefore, the answer is"
MARKER_COMPACT = "-->"
ANSWER_MARKERS = (MARKER_VERBOSE, MARKER_COMPACT)


class TaskKind(str, Enum):
    LAST_LETTER = "last_letter"
    SHUFFLED_OBJECTS = "shuffled_objects"
    CHAIN_ARITHMETIC = "chain_arithmetic"


@dataclass(frozen=True)
class QuestionRecord:
    """One task instance: question text plus its normalized gold answer."""

    id: int
    question: str
    gold_answer: str
    task: TaskKind


@dataclass(frozen=True)
class GoldRationale:
    """Oracle step-by-step solution; final_answer matches the record's gold."""

    steps: tuple[str, ...]
    final_answer: str


# Difficulty meaning per kind: word count / swap count / operation count.
DIFFICULTY_BOUNDS: dict[TaskKind, tuple[int, int]] = {
    TaskKind.LAST_LETTER: (2, 6),
    TaskKind.SHUFFLED_OBJECTS: (3, 3),
    # Lower bound 1 (not 2) so a single-step chain like "3 + 0" is
    # constructible for smoke checks.
    TaskKind.CHAIN_ARITHMETIC: (1, 4),
}

NAME_POOL = (
    "Dino Toby Abigail Manuela Alice Bob Claire Dave Erin Frank Grace Henry "
    "Irene Jack Karen Liam Mona Nora Oscar Peter Quinn Rosa Steve Tina Uma "
    "Victor Wendy Xena Yara Zane Aaron Bella Carlos Daisy Edgar Fiona George "
    "Hanna Ivan Julia Kevin Laura Marco Nina Omar Paula Ramon Sara Tomas "
    "Ursula Vince Willa Xavi Yusuf Zelda Andre Bruno Carmen Diego Elena "
    "Felix Gina Hugo Ines Jorge Kira Lucas Marta Nadia Otto Pablo Rita "
    "Santi Tessa Ulric Vera Wade Yuri Zoe Adam Beth Cody Dora Eli Fred "
    "Gwen Hank Ida Joel Kate Luis Mia Noah Olga Pia Rex Sam Ted Una Val "
    "Walt Yoko Zack Amber Boris Celia Dimas Edith Fabio Greta Heidi Igor "
    "Janet Kurt Lidia Mateo Nelly Orson Perla Raul Sonia Tania Ugo Viola "
    "Wilma Yana Zaid Alma Bert Cleo Dante Elsa Floyd Gilda Homer Iris "
    "Jonas Kyle Lena Milo Naomi Opal Piotr Rhea Silas Tilda Umber Vito "
    "Wanda Yael Zora Anton Blake Cesar Delia Ellen Flora Gavin Helga "
    "Indra Jade Keith Lola Moira Nigel Odette Pearl Ruben Stella Troy "
    "Ulla Vasco Wren Ximena Yvonne Zenon Arlo Bree Colin Dunia Evan "
    "Farah Goran Hilde Ilsa Jonah Katia Lars Mirta Nuno Oriol Priya "
    "Rocco Selma Timur Udo Velma Wolf Yehudi Zarco Asier Benji Clara "
    "Dalia Ernest Fanny Gaspar Hector Ingrid Jules Klaus Leire Magda "
    "Nestor Olaf Petra Rufus Saul Teo Ulises Vilma Wilbur Yolanda Zeno"
).split()

COLOR_POOL = (
    "red pink black blue green yellow purple white orange brown gray teal"
).split()

_ORDINALS = ("First,", "Then,", "Finally,", "Next,", "After that,")


def _check_difficulty(kind: TaskKind, difficulty: int) -> None:
    lo, hi = DIFFICULTY_BOUNDS[kind]
    if not lo <= difficulty <= hi:
        raise ConfigurationError(
            f"difficulty {difficulty} out of bounds for {kind.value}: "
            f"allowed range is {lo}..{hi}"
        )


# ---------------------------------------------------------------------------
# Builders (question text + gold rationale from explicit ingredients)
# ---------------------------------------------------------------------------

def build_last_letter(words: list[str], record_id: int = 0) -> tuple[QuestionRecord, GoldRationale]:
    """Last-letter-concatenation instance for an explicit word list."""
    question = (
        f'Take the last letters of each words in "{" ".join(words)}" '
        "and concatenate them."
    )
    letters = [w[-1].lower() for w in words]
    gold = "".join(letters)
    steps = tuple(f"{i + 1}. {w} - {c}." for i, (w, c) in enumerate(zip(words, letters)))
    record = QuestionRecord(record_id, question, gold, TaskKind.LAST_LETTER)
    return record, GoldRationale(steps, gold)


def build_shuffled_objects(
    people: list[str],
    colors: list[str],
    swaps: list[tuple[int, int]],
    asked: int,
    record_id: int = 0,
) -> tuple[QuestionRecord, GoldRationale]:
    """Ball-swapping instance from explicit swap pairs (0-based indices).

    person i starts with colors[i]; choice letters (A)(B)(C) follow the
    initial color order; the gold answer is the lowercase letter of the
    ball held by `people[asked]` after all swaps.
    """
    n = len(people)
    intro = ", ".join(f"{people[i]} has a {colors[i]} ball" for i in range(n))
    swap_sentences = []
    # holder[i] = index of the ball person i currently holds
    holder = list(range(n))
    steps = []
    for k, (a, b) in enumerate(swaps):
        swap_sentences.append(f"{_ORDINALS[k]} {people[a]} and {people[b]} swap balls.")
        holder[a], holder[b] = holder[b], holder[a]
        state = ", ".join(f"{people[i]} - {colors[holder[i]]}" for i in range(n))
        steps.append(f"Swap {k + 1}: {state}.")
    choices = " ".join(f"({chr(ord('A') + i)}) {colors[i]} ball" for i in range(n))
    question = (
        f"{', '.join(people[:-1])}, and {people[-1]} each hold a ball: {intro}. "
        f"{' '.join(swap_sentences)} "
        f"Which ball does {people[asked]} have at the end? "
        f"Answer choices: {choices}"
    )
    gold = chr(ord("a") + holder[asked])
    record = QuestionRecord(record_id, question, gold, TaskKind.SHUFFLED_OBJECTS)
    return record, GoldRationale(tuple(steps), gold)


def build_chain_arithmetic(
    start: int, operations: list[tuple[str, int]], record_id: int = 0
) -> tuple[QuestionRecord, GoldRationale]:
    """Left-to-right +/- chain from an explicit operation list."""
    expr = str(start) + "".join(f" {op} {v}" for op, v in operations)
    question = f"Compute {expr}."
    steps = [f"Start with {start}."]
    acc = start
    for op, v in operations:
        nxt = acc + v if op == "+" else acc - v
        steps.append(f"{acc} {op} {v} = {nxt}.")
        acc = nxt
    gold = str(acc)
    record = QuestionRecord(record_id, question, gold, TaskKind.CHAIN_ARITHMETIC)
    return record, GoldRationale(tuple(steps), gold)


# ---------------------------------------------------------------------------
# Seeded generation
# ---------------------------------------------------------------------------

def generate_dataset(
    kind: TaskKind, n: int, seed: int, difficulty: int
) -> list[tuple[QuestionRecord, GoldRationale]]:
    """Generate n unique task instances, deterministic in all arguments."""
    if n < 1:
        raise ConfigurationError(f"n must be >= 1, got {n}")
    _check_difficulty(kind, difficulty)
    rng = random.Random(seed)
    out: list[tuple[QuestionRecord, GoldRationale]] = []
    seen: set[str] = set()
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 200 * n + 1000:
            raise RuntimeError(
                f"could not generate {n} unique {kind.value} questions "
                f"at difficulty {difficulty}"
            )
        record, rationale = _sample_instance(kind, rng, difficulty, len(out))
        if record.question in seen:
            continue
        seen.add(record.question)
        out.append((record, rationale))
    return out


def _sample_instance(
    kind: TaskKind, rng: random.Random, difficulty: int, record_id: int
) -> tuple[QuestionRecord, GoldRationale]:
    if kind is TaskKind.LAST_LETTER:
        words = rng.sample(NAME_POOL, difficulty)
        return build_last_letter(words, record_id)
    if kind is TaskKind.SHUFFLED_OBJECTS:
        people = rng.sample(NAME_POOL, 3)
        colors = rng.sample(COLOR_POOL, 3)
        swaps = []
        for _ in range(difficulty):
            a, b = rng.sample(range(3), 2)
            swaps.append((min(a, b), max(a, b)))
        asked = rng.randrange(3)
        return build_shuffled_objects(people, colors, swaps, asked, record_id)
    if kind is TaskKind.CHAIN_ARITHMETIC:
        start = rng.randint(0, 20)
        operations = [(rng.choice("+-"), rng.randint(0, 20)) for _ in range(difficulty)]
        return build_chain_arithmetic(start, operations, record_id)
    raise ConfigurationError(f"unknown task kind: {kind!r}")


# ---------------------------------------------------------------------------
# Answer normalization and extraction
# ---------------------------------------------------------------------------

_ALPHA_TOKEN = re.compile(r"[a-z]+")
_CHOICE_PAREN = re.compile(r"\(([a-z])\)")
_CHOICE_BARE = re.compile(r"\b([a-c])\b")
_INTEGER = re.compile(r"-?\d+")


def normalize_answer(kind: TaskKind, raw: str) -> str:
    """Reduce raw answer text to canonical form for gold comparison.

    Rules (fixed so filtering is deterministic): lowercase and strip
    surrounding whitespace/punctuation; multiple-choice answers reduce to
    the single choice letter, preferring a parenthesized "(a)" over a bare
    one; numeric answers reduce to the last integer literal in canonical
    form. Unparseable input normalizes to "" (which never matches a gold
    answer).
    """
    text = raw.strip().lower()
    if kind is TaskKind.LAST_LETTER:
        tokens = _ALPHA_TOKEN.findall(text)
        return tokens[-1] if tokens else ""
    if kind is TaskKind.SHUFFLED_OBJECTS:
        paren = _CHOICE_PAREN.findall(text)
        if paren:
            return paren[-1]
        stripped = text.strip(" \t.,;:!?\"'()")
        if len(stripped) == 1 and "a" <= stripped <= "c":
            return stripped
        bare = _CHOICE_BARE.findall(text)
        return bare[-1] if bare else ""
    if kind is TaskKind.CHAIN_ARITHMETIC:
        numbers = _INTEGER.findall(text)
        return str(int(numbers[-1])) if numbers else ""
    raise ConfigurationError(f"unknown task kind: {kind!r}")


def extract_final_answer(kind: TaskKind, generation: str) -> str:
    """Pull the normalized final answer out of full generated text.

    Scans for the last occurrence of either answer marker and normalizes the
    trailing text; with no marker, normalizes the last line instead.
    """
    best = -1
    best_end = -1
    for marker in ANSWER_MARKERS:
        pos = generation.rfind(marker)
        if pos > best:
            best = pos
            best_end = pos + len(marker)
    if best >= 0:
        return normalize_answer(kind, generation[best_end:])
    lines = generation.rstrip().splitlines()
    return normalize_answer(kind, lines[-1]) if lines else ""


def render_rationale(rationale: GoldRationale) -> str:
    """Render steps plus a compact final-answer sentence."""
    return " ".join(rationale.steps) + f" {MARKER_COMPACT} {rationale.final_answer}."
