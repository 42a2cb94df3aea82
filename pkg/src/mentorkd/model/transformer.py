"""Decoder-only transformer trainable from scratch at desk scale.

The training/evaluation forward pass runs on the autodiff tape; generation
uses a separate numpy-only incremental decoder with per-layer key/value
caches (tests pin the two paths to produce identical logits). Question and
label share one sequence separated by SEP; causal masking makes position t
depend only on tokens up to t.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from .tokenizer import BOS_ID, EOS_ID, PAD_ID, SEP_ID, CharTokenizer

_NEG_MASK = -1e9  # additive attention mask; exp underflows to exactly 0.0
_LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    layers: int
    model_dim: int
    heads: int
    feedforward_dim: int
    max_sequence: int = 512
    dropout_rate: float = 0.0

    def __post_init__(self) -> None:
        if self.model_dim % self.heads != 0:
            raise ValueError(
                f"model_dim {self.model_dim} not divisible by heads {self.heads}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")


# Size tiers: mentor > student > micro; large_mentor extends the ladder for
# the mentor-capacity sweep.
PRESETS: dict[str, ModelConfig] = {
    "micro": ModelConfig(layers=1, model_dim=32, heads=2, feedforward_dim=64),
    "student": ModelConfig(layers=2, model_dim=64, heads=2, feedforward_dim=128),
    "mentor": ModelConfig(layers=4, model_dim=128, heads=4, feedforward_dim=256),
    "large_mentor": ModelConfig(layers=6, model_dim=192, heads=6, feedforward_dim=384),
}


class TinyTransformer:
    """GPT-style decoder with learned positional embeddings.

    role is descriptive ("mentor" / "student"); the architecture only
    depends on config.
    """

    def __init__(
        self,
        config: ModelConfig,
        tokenizer: CharTokenizer,
        role: str = "student",
        seed: int = 0,
        dtype=np.float32,
    ):
        self.config = config
        self.tokenizer = tokenizer
        self.role = role
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self._init_params(seed)
        self._mask_cache: dict[int, np.ndarray] = {}

    def _init_params(self, seed) -> None:
        rng = np.random.default_rng(seed)
        cfg = self.config
        vocab = self.tokenizer.vocab_size

        def normal(*shape):
            return Tensor(
                (rng.standard_normal(shape) * 0.02).astype(self.dtype), requires_grad=True
            )

        def zeros(*shape):
            return Tensor(np.zeros(shape, dtype=self.dtype), requires_grad=True)

        def ones(*shape):
            return Tensor(np.ones(shape, dtype=self.dtype), requires_grad=True)

        p = self.params
        p["tok_emb"] = normal(vocab, cfg.model_dim)
        p["pos_emb"] = normal(cfg.max_sequence, cfg.model_dim)
        for i in range(cfg.layers):
            p[f"l{i}.ln1.g"] = ones(cfg.model_dim)
            p[f"l{i}.ln1.b"] = zeros(cfg.model_dim)
            for proj in ("wq", "wk", "wv"):
                p[f"l{i}.attn.{proj}"] = normal(cfg.model_dim, cfg.model_dim)
                p[f"l{i}.attn.{proj}_b"] = zeros(cfg.model_dim)
            p[f"l{i}.attn.wo"] = normal(cfg.model_dim, cfg.model_dim)
            p[f"l{i}.attn.wo_b"] = zeros(cfg.model_dim)
            p[f"l{i}.ln2.g"] = ones(cfg.model_dim)
            p[f"l{i}.ln2.b"] = zeros(cfg.model_dim)
            p[f"l{i}.mlp.w1"] = normal(cfg.model_dim, cfg.feedforward_dim)
            p[f"l{i}.mlp.b1"] = zeros(cfg.feedforward_dim)
            p[f"l{i}.mlp.w2"] = normal(cfg.feedforward_dim, cfg.model_dim)
            p[f"l{i}.mlp.b2"] = zeros(cfg.model_dim)
        p["lnf.g"] = ones(cfg.model_dim)
        p["lnf.b"] = zeros(cfg.model_dim)
        p["unembed"] = normal(cfg.model_dim, vocab)
        p["unembed_b"] = zeros(vocab)

    @property
    def param_count(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def _causal_mask(self, t: int) -> np.ndarray:
        mask = self._mask_cache.get(t)
        if mask is None:
            mask = (np.triu(np.ones((t, t), dtype=self.dtype), k=1) * _NEG_MASK)[None, None]
            self._mask_cache[t] = mask
        return mask

    # -- training / evaluation forward --------------------------------------

    def forward(
        self,
        ids: np.ndarray,
        train: bool = False,
        dropout_rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Teacher-forced logits of shape (batch, T, vocab)."""
        if ids.ndim != 2:
            raise ValueError(f"ids must be 2-d (batch, time), got shape {ids.shape}")
        batch, t = ids.shape
        if t > self.config.max_sequence:
            raise ValueError(
                f"sequence length {t} exceeds max_sequence {self.config.max_sequence}"
            )
        if ids.max(initial=0) >= self.tokenizer.vocab_size:
            raise ValueError("token id out of vocabulary range")
        cfg = self.config
        heads, head_dim = cfg.heads, cfg.model_dim // cfg.heads
        p = self.params
        drop = cfg.dropout_rate if train else 0.0
        scale = 1.0 / np.sqrt(head_dim)

        x = ad.add(ad.embedding(p["tok_emb"], ids), ad.take(p["pos_emb"], slice(0, t)))
        mask = self._causal_mask(t)
        for i in range(cfg.layers):
            h = ad.layer_norm(x, p[f"l{i}.ln1.g"], p[f"l{i}.ln1.b"], _LN_EPS)
            q = ad.split_heads(ad.affine(h, p[f"l{i}.attn.wq"], p[f"l{i}.attn.wq_b"]), heads)
            k = ad.split_heads(ad.affine(h, p[f"l{i}.attn.wk"], p[f"l{i}.attn.wk_b"]), heads)
            v = ad.split_heads(ad.affine(h, p[f"l{i}.attn.wv"], p[f"l{i}.attn.wv_b"]), heads)
            scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), scale)
            probs = ad.masked_softmax(scores, mask)
            probs = self._dropout(probs, drop, dropout_rng)
            ctx = ad.merge_heads(ad.matmul(probs, v))
            x = ad.add(x, ad.affine(ctx, p[f"l{i}.attn.wo"], p[f"l{i}.attn.wo_b"]))
            h2 = ad.layer_norm(x, p[f"l{i}.ln2.g"], p[f"l{i}.ln2.b"], _LN_EPS)
            inner = ad.gelu(ad.affine(h2, p[f"l{i}.mlp.w1"], p[f"l{i}.mlp.b1"]))
            mlp = ad.affine(inner, p[f"l{i}.mlp.w2"], p[f"l{i}.mlp.b2"])
            x = ad.add(x, self._dropout(mlp, drop, dropout_rng))
        x = ad.layer_norm(x, p["lnf.g"], p["lnf.b"], _LN_EPS)
        return ad.affine(x, p["unembed"], p["unembed_b"])

    @staticmethod
    def _dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
        if rate <= 0.0:
            return x
        if rng is None:
            raise ValueError("dropout requires a generator in training mode")
        keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
        return ad.mul(x, Tensor(keep))

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Gradient of a scalar loss for every parameter."""
        for tensor in self.params.values():
            tensor.grad = None
        loss.backward()
        grads = {}
        for name, tensor in self.params.items():
            grads[name] = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        return grads

    # -- parameter snapshots -------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise ValueError("parameter name mismatch in state dict")
        for name, data in state.items():
            if self.params[name].data.shape != data.shape:
                raise ValueError(f"shape mismatch for {name}")
            self.params[name].data = data.astype(self.dtype)

    # -- generation -----------------------------------------------------------

    def generate(self, question: str, max_new_tokens: int) -> str:
        """Greedy decode from `BOS question SEP`; returns the label text."""
        return self.generate_batch([question], max_new_tokens)[0]

    def generate_batch(
        self,
        questions: list[str],
        max_new_tokens: int,
        temperature: float | None = None,
        sample_keys: list[tuple[int, ...]] | None = None,
    ) -> list[str]:
        """Decode a batch; greedy unless a temperature is given.

        With a temperature, per-sequence RNG streams are derived from
        sample_keys so results do not depend on batch composition.
        """
        if not questions:
            return []
        if temperature is not None and sample_keys is None:
            raise ValueError("temperature sampling requires sample_keys")
        prompts = [self.tokenizer.render_prompt(q) for q in questions]
        token_rows = self._decode(prompts, max_new_tokens, temperature, sample_keys)
        return [self.tokenizer.decode(row) for row in token_rows]

    def _decode(
        self,
        prompts: list[np.ndarray],
        max_new_tokens: int,
        temperature: float | None,
        sample_keys: list[tuple[int, ...]] | None,
    ) -> list[list[int]]:
        cfg = self.config
        batch = len(prompts)
        lengths = np.array([len(p) for p in prompts])
        longest = int(lengths.max())
        if longest > cfg.max_sequence:
            raise ValueError(
                f"prompt length {longest} exceeds max_sequence {cfg.max_sequence}"
            )
        budget = min(max_new_tokens, cfg.max_sequence - longest)
        if budget <= 0:
            return [[] for _ in prompts]

        offsets = longest - lengths  # left padding per sequence
        total = longest + budget
        ids = np.full((batch, longest), PAD_ID, dtype=np.int64)
        for b, prompt in enumerate(prompts):
            ids[b, offsets[b]:] = prompt
        key_valid = np.zeros((batch, total), dtype=bool)
        key_valid[:, :longest] = np.arange(longest)[None, :] >= offsets[:, None]
        pos_ids = np.maximum(np.arange(longest)[None, :] - offsets[:, None], 0)

        uniforms = None
        if temperature is not None:
            uniforms = np.empty((batch, budget))
            for b in range(batch):
                rng = np.random.default_rng(list(sample_keys[b]))
                uniforms[b] = rng.random(budget)

        logits, caches = self._prefill(ids, key_valid[:, :longest], pos_ids, total)
        out: list[list[int]] = [[] for _ in prompts]
        finished = np.zeros(batch, dtype=bool)
        for step in range(budget):
            logits[:, PAD_ID] = _NEG_MASK  # PAD is never a decodable token
            next_ids = self._pick(logits, temperature, uniforms, step)
            next_ids[finished] = PAD_ID
            for b, token in enumerate(next_ids):
                if finished[b]:
                    continue
                if token == EOS_ID:
                    finished[b] = True
                else:
                    out[b].append(int(token))
            if finished.all():
                break
            key_valid[:, longest + step] = ~finished
            positions = lengths + step
            logits = self._decode_step(
                next_ids, positions, caches, longest + step,
                key_valid[:, :longest + step + 1],
            )
        return out

    @staticmethod
    def _pick(logits, temperature, uniforms, step) -> np.ndarray:
        if temperature is None:
            return np.argmax(logits, axis=-1)
        scaled = logits / temperature
        scaled -= scaled.max(axis=-1, keepdims=True)
        probs = np.exp(scaled)
        probs /= probs.sum(axis=-1, keepdims=True)
        cdf = np.cumsum(probs, axis=-1)
        u = uniforms[:, step, None]
        picked = (cdf < u).sum(axis=-1).astype(np.int64)
        return np.minimum(picked, logits.shape[-1] - 1)

    # numpy-only forward with per-layer K/V caches; kept in lockstep with
    # forward() above and pinned to it by tests.

    def _attn_proj(self, p, i, name, h, heads, head_dim):
        batch, t, d = h.shape
        out = (h.reshape(-1, d) @ p[f"l{i}.attn.{name}"] + p[f"l{i}.attn.{name}_b"])
        return out.reshape(batch, t, heads, head_dim).transpose(0, 2, 1, 3)

    def _prefill(self, ids, key_valid, pos_ids, total_len):
        cfg = self.config
        p = {name: t.data for name, t in self.params.items()}
        batch, t = ids.shape
        heads, head_dim = cfg.heads, cfg.model_dim // cfg.heads
        x = p["tok_emb"][ids] + p["pos_emb"][pos_ids]
        mask = self._causal_mask(t) + np.where(key_valid, 0.0, _NEG_MASK).astype(
            self.dtype
        )[:, None, None, :]
        caches = []
        for i in range(cfg.layers):
            h = _np_layernorm(x, p[f"l{i}.ln1.g"], p[f"l{i}.ln1.b"])
            q = self._attn_proj(p, i, "wq", h, heads, head_dim)
            k = self._attn_proj(p, i, "wk", h, heads, head_dim)
            v = self._attn_proj(p, i, "wv", h, heads, head_dim)
            k_cache = np.zeros((batch, heads, total_len, head_dim), dtype=self.dtype)
            v_cache = np.zeros_like(k_cache)
            k_cache[:, :, :t] = k
            v_cache[:, :, :t] = v
            caches.append((k_cache, v_cache))
            scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(head_dim) + mask
            probs = _np_softmax(scores)
            ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(batch, t, cfg.model_dim)
            x = x + ctx @ p[f"l{i}.attn.wo"] + p[f"l{i}.attn.wo_b"]
            h2 = _np_layernorm(x, p[f"l{i}.ln2.g"], p[f"l{i}.ln2.b"])
            x = x + _np_gelu(h2 @ p[f"l{i}.mlp.w1"] + p[f"l{i}.mlp.b1"]) @ p[f"l{i}.mlp.w2"] + p[f"l{i}.mlp.b2"]
        x = _np_layernorm(x[:, -1], p["lnf.g"], p["lnf.b"])
        return x @ p["unembed"] + p["unembed_b"], caches

    def _decode_step(self, token_ids, positions, caches, write_index, key_valid):
        cfg = self.config
        p = {name: t.data for name, t in self.params.items()}
        batch = token_ids.shape[0]
        heads, head_dim = cfg.heads, cfg.model_dim // cfg.heads
        x = p["tok_emb"][token_ids] + p["pos_emb"][positions]  # (B, D)
        key_mask = np.where(key_valid, 0.0, _NEG_MASK).astype(self.dtype)[:, None, :]
        for i in range(cfg.layers):
            h = _np_layernorm(x, p[f"l{i}.ln1.g"], p[f"l{i}.ln1.b"])
            q = (h @ p[f"l{i}.attn.wq"] + p[f"l{i}.attn.wq_b"]).reshape(batch, heads, head_dim)
            k_new = (h @ p[f"l{i}.attn.wk"] + p[f"l{i}.attn.wk_b"]).reshape(batch, heads, head_dim)
            v_new = (h @ p[f"l{i}.attn.wv"] + p[f"l{i}.attn.wv_b"]).reshape(batch, heads, head_dim)
            k_cache, v_cache = caches[i]
            k_cache[:, :, write_index] = k_new
            v_cache[:, :, write_index] = v_new
            k = k_cache[:, :, : write_index + 1]
            v = v_cache[:, :, : write_index + 1]
            scores = np.einsum("bhd,bhtd->bht", q, k) / np.sqrt(head_dim) + key_mask
            probs = _np_softmax(scores)
            ctx = np.einsum("bht,bhtd->bhd", probs, v).reshape(batch, cfg.model_dim)
            x = x + ctx @ p[f"l{i}.attn.wo"] + p[f"l{i}.attn.wo_b"]
            h2 = _np_layernorm(x, p[f"l{i}.ln2.g"], p[f"l{i}.ln2.b"])
            x = x + _np_gelu(h2 @ p[f"l{i}.mlp.w1"] + p[f"l{i}.mlp.b1"]) @ p[f"l{i}.mlp.w2"] + p[f"l{i}.mlp.b2"]
        x = _np_layernorm(x, p["lnf.g"], p["lnf.b"])
        return x @ p["unembed"] + p["unembed_b"]


def _np_layernorm(x, g, b):
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + _LN_EPS) * g + b


def _np_softmax(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _np_gelu(x):
    x2 = x * x
    return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * (x2 * x))))


def render_training_batch(
    tokenizer: CharTokenizer, encoded: list[tuple[np.ndarray, int]]
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Right-pad rendered sequences into (inputs, targets, label_mask).

    targets[b, j] is the next token for inputs[b, j]; label_mask selects the
    positions whose target belongs to the label span (SEP onward, EOS
    included) so question tokens never contribute to the loss.
    """
    longest = max(len(ids) for ids, _ in encoded)
    batch = len(encoded)
    ids = np.full((batch, longest), PAD_ID, dtype=np.int64)
    for b, (row, _) in enumerate(encoded):
        ids[b, : len(row)] = row
    inputs = ids[:, :-1]
    targets = ids[:, 1:]
    mask = np.zeros(targets.shape, dtype=np.float64)
    for b, (row, sep_pos) in enumerate(encoded):
        mask[b, sep_pos : len(row) - 1] = 1.0
    return inputs, targets, mask
