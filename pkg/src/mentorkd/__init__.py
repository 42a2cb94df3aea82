"""Desk-scale reasoning distillation: teacher CoT annotation, mentor
fine-tuning and rationale augmentation, and student training with a joint
rationale + soft-label objective, on synthetic multi-step tasks."""

__version__ = "0.1.0"

from .tasks import TaskKind, QuestionRecord, GoldRationale  # noqa: F401
from .teacher import CoTAnnotation, TeacherConfig  # noqa: F401
from .dataset import DistillationSet, LabelTemplate, TrainingExample  # noqa: F401
from .config import ExperimentConfig  # noqa: F401
