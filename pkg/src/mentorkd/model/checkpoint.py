"""Versioned model checkpoints: one .npz holding config, vocabulary,
parameters, and (optionally) the optimizer state."""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from ..errors import DataFormatError
from .tokenizer import CharTokenizer
from .training import TrainState
from .transformer import ModelConfig, TinyTransformer

FORMAT_VERSION = 1


def save_checkpoint(
    model: TinyTransformer, path: str | Path, state: TrainState | None = None
) -> None:
    meta = {
        "format_version": FORMAT_VERSION,
        "config": asdict(model.config),
        "role": model.role,
        "characters": model.tokenizer.characters,
        "dtype": model.dtype.name,
        "train_state": None,
    }
    arrays = {f"param/{name}": t.data for name, t in model.params.items()}
    if state is not None:
        meta["train_state"] = {
            "step": state.step,
            "epoch": state.epoch,
            "total_steps": state.total_steps,
            "warmup_steps": state.warmup_steps,
            "base_lr": state.base_lr,
            "seed": state.seed,
        }
        arrays.update({f"adam_m/{name}": a for name, a in state.m.items()})
        arrays.update({f"adam_v/{name}": a for name, a in state.v.items()})
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path: str | Path) -> tuple[TinyTransformer, TrainState | None]:
    with np.load(path) as blob:
        if "meta" not in blob:
            raise DataFormatError(f"{path}: not a model checkpoint (no meta entry)")
        meta = json.loads(bytes(blob["meta"]).decode("utf-8"))
        version = meta.get("format_version")
        if version != FORMAT_VERSION:
            raise DataFormatError(
                f"{path}: unsupported checkpoint format version {version!r} "
                f"(expected {FORMAT_VERSION})"
            )
        config = ModelConfig(**meta["config"])
        tokenizer = CharTokenizer(meta["characters"])
        model = TinyTransformer(
            config, tokenizer, role=meta["role"], dtype=np.dtype(meta["dtype"])
        )
        model.load_state_dict(
            {key[len("param/"):]: blob[key] for key in blob.files if key.startswith("param/")}
        )
        state = None
        if meta["train_state"] is not None:
            ts = meta["train_state"]
            state = TrainState(
                step=ts["step"],
                epoch=ts["epoch"],
                total_steps=ts["total_steps"],
                warmup_steps=ts["warmup_steps"],
                base_lr=ts["base_lr"],
                seed=ts["seed"],
                m={key[len("adam_m/"):]: blob[key] for key in blob.files
                   if key.startswith("adam_m/")},
                v={key[len("adam_v/"):]: blob[key] for key in blob.files
                   if key.startswith("adam_v/")},
            )
    return model, state
