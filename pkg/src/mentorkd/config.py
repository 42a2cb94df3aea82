"""Run configuration: defaults, TOML loading, and CLI overrides.

One flat key/value file drives every stage. Precedence is command line >
config file > built-in defaults; unknown keys are hard errors so typos never
silently fall back to defaults.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from .errors import ConfigurationError
from .tasks import DIFFICULTY_BOUNDS, TaskKind

DEGREE_GRID = (0, 1, 3, 6, 9)
FRACTION_GRID = (0.2, 0.4, 0.6, 0.8, 1.0)
LAMBDA_GRID = (0.0, 0.1, 0.3, 0.5, 0.7, 1.0)
MENTOR_SIZE_GRID = ("micro", "student", "mentor", "large_mentor")


@dataclass(frozen=True)
class ExperimentConfig:
    # task / data
    task: str = TaskKind.LAST_LETTER.value
    n_train: int = 2000
    n_test: int = 400
    difficulty: int = 2
    # teacher
    teacher: str = "oracle"  # oracle | remote
    corruption_rate: float = 0.4
    corruption_modes: tuple[str, ...] = (
        "wrong_final_answer",
        "inconsistent_final_answer",
        "truncated_rationale",
    )
    annotations_per_question: int = 6
    per_question_keep: int = 3  # the 3-of-6 selection
    endpoint_url: str = ""
    endpoint_model: str = "gpt-3.5-turbo"
    requests_per_minute: float = 60.0
    # models
    mentor_preset: str = "mentor"
    student_preset: str = "student"
    label_template: str = "compact"  # compact | verbose
    max_new_tokens: int = 256
    # distillation
    lam: float = 0.3
    tau: float = 2.0
    epochs: int = 2
    mentor_epochs: int = 2
    batch_size: int = 64
    learning_rate: float = 3e-4
    warmup_fraction: float = 0.05
    mentor_learning_rate: float = 0.0  # 0 = inherit learning_rate
    mentor_warmup_fraction: float = 0.0  # 0 = inherit warmup_fraction
    degree: int = 3
    fraction: float = 1.0
    ablation: str = "full"  # full | no_rd | no_sld
    # experiment control
    seed: int = 0
    seeds: tuple[int, ...] = (0, 1, 2, 3)
    workers: int = 1
    out_dir: str = "results"
    # sweep grids
    degree_grid: tuple[int, ...] = DEGREE_GRID
    fraction_grid: tuple[float, ...] = FRACTION_GRID
    lambda_grid: tuple[float, ...] = LAMBDA_GRID
    mentor_size_grid: tuple[str, ...] = MENTOR_SIZE_GRID
    # empty = the full (arm x fraction) product; otherwise explicit
    # ("vanilla"|"mentor", fraction) cells for the low-resource sweep
    lowresource_cells: tuple = ()

    def __post_init__(self) -> None:
        if self.task not in {k.value for k in TaskKind}:
            raise ConfigurationError(
                f"unknown task {self.task!r}; expected one of "
                f"{sorted(k.value for k in TaskKind)}"
            )
        lo, hi = DIFFICULTY_BOUNDS[TaskKind(self.task)]
        if not lo <= self.difficulty <= hi:
            raise ConfigurationError(
                f"difficulty {self.difficulty} out of bounds for {self.task}: "
                f"allowed range is {lo}..{hi}"
            )
        if self.teacher not in ("oracle", "remote"):
            raise ConfigurationError(f"teacher must be oracle or remote, got {self.teacher!r}")
        if self.label_template not in ("compact", "verbose"):
            raise ConfigurationError(
                f"label_template must be compact or verbose, got {self.label_template!r}"
            )
        if self.ablation not in ("full", "no_rd", "no_sld"):
            raise ConfigurationError(
                f"ablation must be full, no_rd, or no_sld, got {self.ablation!r}"
            )
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigurationError(f"fraction must be in (0, 1], got {self.fraction}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigurationError(f"lambda must be in [0, 1], got {self.lam}")
        if self.tau <= 0:
            raise ConfigurationError(f"tau must be positive, got {self.tau}")
        if self.workers < 1:
            raise ConfigurationError(f"workers must be >= 1, got {self.workers}")

    @property
    def task_kind(self) -> TaskKind:
        return TaskKind(self.task)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for key, value in out.items():
            if isinstance(value, tuple):
                out[key] = list(value)
        return out


# TOML accepts "lambda" even though the dataclass field is `lam`.
_KEY_ALIASES = {"lambda": "lam"}
_FIELD_NAMES = {f.name for f in fields(ExperimentConfig)}
_TUPLE_FIELDS = {
    f.name for f in fields(ExperimentConfig) if "tuple" in str(f.type)
}


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse a TOML config file; unknown keys are hard errors."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid TOML: {exc}")
    return config_from_mapping(raw, origin=str(path))


def config_from_mapping(raw: dict, origin: str = "<config>") -> ExperimentConfig:
    values = {}
    for key, value in raw.items():
        name = _KEY_ALIASES.get(key, key)
        if name not in _FIELD_NAMES:
            raise ConfigurationError(f"{origin}: unknown config key {key!r}")
        if name in _TUPLE_FIELDS:
            if not isinstance(value, (list, tuple)):
                raise ConfigurationError(f"{origin}: key {key!r} must be a list")
            value = tuple(value)
        values[name] = value
    return ExperimentConfig(**values)


def apply_overrides(config: ExperimentConfig, **overrides) -> ExperimentConfig:
    """Replace fields with non-None override values (CLI precedence)."""
    updates = {}
    for key, value in overrides.items():
        if value is None:
            continue
        name = _KEY_ALIASES.get(key, key)
        if name not in _FIELD_NAMES:
            raise ConfigurationError(f"unknown override {key!r}")
        if name in _TUPLE_FIELDS and not isinstance(value, tuple):
            value = tuple(value)
        updates[name] = value
    if not updates:
        return config
    return dataclasses.replace(config, **updates)
