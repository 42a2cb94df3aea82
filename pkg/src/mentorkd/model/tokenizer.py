"""Character-level tokenizer shared by mentor and student models.

A fixed vocabulary (printable ASCII plus PAD/BOS/EOS/SEP specials) keeps the
two models position-aligned token for token, which is what makes per-position
soft-label distillation exact.
"""

from __future__ import annotations

import numpy as np

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
SEP_ID = 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<sep>")


class CharTokenizer:
    def __init__(self, characters: str | None = None):
        self.characters = characters if characters is not None else "".join(
            chr(c) for c in range(32, 127)
        )
        if len(set(self.characters)) != len(self.characters):
            raise ValueError("tokenizer characters must be unique")
        self._char_to_id = {
            ch: i + len(SPECIAL_TOKENS) for i, ch in enumerate(self.characters)
        }
        self._id_to_char = {i: ch for ch, i in self._char_to_id.items()}

    @property
    def vocab_size(self) -> int:
        return len(SPECIAL_TOKENS) + len(self.characters)

    def __eq__(self, other) -> bool:
        return isinstance(other, CharTokenizer) and self.characters == other.characters

    def encode(self, text: str) -> list[int]:
        try:
            return [self._char_to_id[ch] for ch in text]
        except KeyError as exc:
            raise ValueError(f"character {exc.args[0]!r} is not in the vocabulary")

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i < len(SPECIAL_TOKENS):
                continue
            ch = self._id_to_char.get(i)
            if ch is None:
                raise ValueError(f"token id {i} is not in the vocabulary")
            out.append(ch)
        return "".join(out)

    def render_example(self, question: str, label: str) -> tuple[np.ndarray, int]:
        """Token ids `BOS question SEP label EOS` plus the SEP position."""
        q = self.encode(question)
        l = self.encode(label)
        ids = np.array([BOS_ID] + q + [SEP_ID] + l + [EOS_ID], dtype=np.int64)
        return ids, 1 + len(q)

    def render_prompt(self, question: str) -> np.ndarray:
        """Token ids `BOS question SEP` (generation prefix)."""
        return np.array([BOS_ID] + self.encode(question) + [SEP_ID], dtype=np.int64)
