"""Trainable decoder-only transformer: tokenizer, architecture, training."""

from .checkpoint import load_checkpoint, save_checkpoint
from .tokenizer import BOS_ID, EOS_ID, PAD_ID, SEP_ID, CharTokenizer
from .training import (
    TrainingParams,
    TrainState,
    encode_examples,
    fit,
    init_train_state,
    train_lm,
)
from .transformer import (
    PRESETS,
    ModelConfig,
    TinyTransformer,
    render_training_batch,
)

__all__ = [
    "BOS_ID",
    "EOS_ID",
    "PAD_ID",
    "SEP_ID",
    "CharTokenizer",
    "ModelConfig",
    "PRESETS",
    "TinyTransformer",
    "TrainState",
    "TrainingParams",
    "encode_examples",
    "fit",
    "init_train_state",
    "load_checkpoint",
    "render_training_batch",
    "save_checkpoint",
    "train_lm",
]
