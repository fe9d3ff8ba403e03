"""A small seeded masked-diffusion transformer.

The model is untrained; it only has to produce deterministic token streams so
attention schedules can be compared end to end.

Weight generation (``init_model``) uses ``numpy.random.Generator(PCG64(seed))``
and draws standard normals in this order, each scaled as noted:

1. token embedding ``(vocab, D)``, scale 1
2. position embedding ``(max_len, D)``, scale 0.5
3. per layer: ``Wq, Wk`` ``(D, D)`` scale ``QK_GAIN / sqrt(D)``; ``Wv, Wo``
   ``(D, D)`` scale ``1 / sqrt(D)``; ``W1`` ``(D, F)`` scale ``1 / sqrt(D)``;
   ``W2`` ``(F, D)`` scale ``1 / sqrt(F)``
4. output projection ``(D, vocab)``, scale ``1 / sqrt(D)``

with ``D = n_heads * head_dim`` and ``F = FFN_MULT * D``. Layer-norm gains are
ones, all biases zeros.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .attention import HeadInputs, multi_head_attention
from .pattern import SparseDConfig
from .scheduler import ScheduleMode, ScheduleResult, run_schedule

QK_GAIN = 2.0
FFN_MULT = 4
LN_EPS = 1e-5


@dataclass(frozen=True)
class ToyModelConfig:
    n_layers: int = 2
    n_heads: int = 4
    head_dim: int = 16
    vocab_size: int = 64
    max_len: int = 1024
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2 (one id is the mask token)")
        for name in ("n_layers", "n_heads", "head_dim", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def d_model(self) -> int:
        return self.n_heads * self.head_dim

    @property
    def mask_token(self) -> int:
        return self.vocab_size - 1

    def param_count(self) -> int:
        D, F, V = self.d_model, FFN_MULT * self.d_model, self.vocab_size
        per_layer = 4 * D * D + 2 * D * F + F + D + 4 * D
        return V * D + self.max_len * D + self.n_layers * per_layer + 2 * D + D * V

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "ToyModelConfig":
        known = {f.name for f in fields(cls)}
        values = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, val = line.partition("=")
            key = key.strip()
            if key not in known:
                raise ValueError(f"unknown model config key {key!r}")
            values[key] = int(val.strip())
        return cls(**values)


@dataclass
class LayerParams:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class ToyModel:
    config: ToyModelConfig
    tok_emb: np.ndarray
    pos_emb: np.ndarray
    layers: list[LayerParams]
    lnf_g: np.ndarray
    lnf_b: np.ndarray
    w_out: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        out = [self.tok_emb, self.pos_emb]
        for lp in self.layers:
            out.extend(getattr(lp, f.name) for f in fields(lp))
        out += [self.lnf_g, self.lnf_b, self.w_out]
        return out

    def param_count(self) -> int:
        return sum(a.size for a in self.arrays())


def init_model(config: ToyModelConfig) -> ToyModel:
    rng = np.random.Generator(np.random.PCG64(config.seed))
    D, F, V = config.d_model, FFN_MULT * config.d_model, config.vocab_size

    def normal(shape, scale):
        return rng.standard_normal(shape) * scale

    tok_emb = normal((V, D), 1.0)
    pos_emb = normal((config.max_len, D), 0.5)
    layers = []
    for _ in range(config.n_layers):
        wq = normal((D, D), QK_GAIN / math.sqrt(D))
        wk = normal((D, D), QK_GAIN / math.sqrt(D))
        wv = normal((D, D), 1.0 / math.sqrt(D))
        wo = normal((D, D), 1.0 / math.sqrt(D))
        w1 = normal((D, F), 1.0 / math.sqrt(D))
        w2 = normal((F, D), 1.0 / math.sqrt(F))
        layers.append(
            LayerParams(
                ln1_g=np.ones(D), ln1_b=np.zeros(D),
                wq=wq, wk=wk, wv=wv, wo=wo,
                ln2_g=np.ones(D), ln2_b=np.zeros(D),
                w1=w1, b1=np.zeros(F), w2=w2, b2=np.zeros(D),
            )
        )
    w_out = normal((D, V), 1.0 / math.sqrt(D))
    return ToyModel(config, tok_emb, pos_emb, layers, np.ones(D), np.zeros(D), w_out)


def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * g + b


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def forward(tokens, model: ToyModel, attend=None) -> np.ndarray:
    """Bidirectional pre-norm transformer; returns ``(l, vocab)`` logits.

    ``attend(layer, heads)`` receives one :class:`HeadInputs` per head and
    returns per-head outputs. Without it every head runs dense attention.
    """
    cfg = model.config
    tokens = np.asarray(tokens, dtype=np.int64)
    l = tokens.shape[0]
    if l > cfg.max_len:
        raise ValueError(f"sequence length {l} exceeds max_len {cfg.max_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ValueError("unknown token id")
    if attend is None:

        def attend(layer, heads):
            return multi_head_attention(heads)

    H, hd = cfg.n_heads, cfg.head_dim
    x = model.tok_emb[tokens] + model.pos_emb[:l]
    for i, lp in enumerate(model.layers):
        h = _layer_norm(x, lp.ln1_g, lp.ln1_b)
        q = (h @ lp.wq).reshape(l, H, hd)
        k = (h @ lp.wk).reshape(l, H, hd)
        v = (h @ lp.wv).reshape(l, H, hd)
        heads = [
            HeadInputs(
                np.ascontiguousarray(q[:, j]),
                np.ascontiguousarray(k[:, j]),
                np.ascontiguousarray(v[:, j]),
            )
            for j in range(H)
        ]
        outs = attend(i, heads)
        x = x + np.concatenate(outs, axis=1) @ lp.wo
        h = _layer_norm(x, lp.ln2_g, lp.ln2_b)
        x = x + _gelu(h @ lp.w1 + lp.b1) @ lp.w2 + lp.b2
    return _layer_norm(x, model.lnf_g, model.lnf_b) @ model.w_out


@dataclass
class SequenceState:
    tokens: np.ndarray
    prefill_len: int
    mask_token: int
    step: int = 0
    unmasked: np.ndarray = field(default=None)

    @classmethod
    def start(cls, prompt, gen_len: int, mask_token: int) -> "SequenceState":
        prompt = np.asarray(prompt, dtype=np.int64)
        if np.any(prompt == mask_token):
            raise ValueError("prompt contains the mask token")
        tokens = np.concatenate([prompt, np.full(gen_len, mask_token, dtype=np.int64)])
        unmasked = np.zeros(tokens.shape[0], dtype=bool)
        unmasked[: prompt.shape[0]] = True
        return cls(tokens, prompt.shape[0], mask_token, 0, unmasked)

    @property
    def n_masked(self) -> int:
        return int((~self.unmasked).sum())


def unmask_step(state: SequenceState, logits, k: int) -> SequenceState:
    """Reveal the ``k`` most confident masked positions.

    Confidence is the largest logit over real tokens (the mask id is never a
    candidate). Ties go to the lower position, then to the lower token id.
    """
    logits = np.asarray(logits, dtype=np.float64)
    masked = np.flatnonzero(~state.unmasked)
    k = min(k, masked.size)
    tokens = state.tokens.copy()
    unmasked = state.unmasked.copy()
    if k > 0:
        real = np.delete(logits[masked], state.mask_token, axis=1)
        choice = np.argmax(real, axis=1)
        choice = choice + (choice >= state.mask_token)
        conf = real.max(axis=1)
        pick = np.argsort(-conf, kind="stable")[:k]
        pos = masked[pick]
        tokens[pos] = choice[pick]
        unmasked[pos] = True
    return SequenceState(tokens, state.prefill_len, state.mask_token, state.step + 1, unmasked)


def tokens_per_step(gen_len: int, total_steps: int) -> list[int]:
    """Spread ``gen_len`` reveals over the steps as evenly as possible."""
    return [
        (t * gen_len) // total_steps - ((t - 1) * gen_len) // total_steps
        for t in range(1, total_steps + 1)
    ]


def synthetic_prompt(length: int, vocab_size: int, seed: int) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(seed + 1))
    return rng.integers(0, vocab_size - 1, size=length, dtype=np.int64)


@dataclass
class GenerationResult:
    tokens: np.ndarray
    prefill_len: int
    traces: list
    schedule: ScheduleResult

    @property
    def cache(self):
        return self.schedule.scheduler.cache

    @property
    def attn_dumps(self):
        return self.schedule.scheduler.attn_dumps

    @property
    def logits(self):
        return self.schedule.logits


def generate(
    prompt,
    gen_len: int,
    model: ToyModel,
    mode: ScheduleMode,
    sparse_config: SparseDConfig,
    threads: int = 1,
    dump_attn: bool = False,
    record_masks: bool = False,
    keep_logits: bool = False,
    chunk_blocks: int = 1,
) -> GenerationResult:
    prompt = np.asarray(prompt, dtype=np.int64)
    if prompt.shape[0] + gen_len > model.config.max_len:
        raise ValueError("prompt + gen_len exceeds max_len")
    state = SequenceState.start(prompt, gen_len, model.config.mask_token)
    schedule = tokens_per_step(gen_len, sparse_config.total_steps)

    def fwd(tokens, attend):
        return forward(tokens, model, attend)

    def unmask(st, logits, step):
        return unmask_step(st, logits, schedule[step - 1])

    result = run_schedule(
        fwd,
        unmask,
        mode,
        sparse_config,
        state,
        threads=threads,
        chunk_blocks=chunk_blocks,
        dump_attn=dump_attn,
        record_masks=record_masks,
        keep_logits=keep_logits,
    )
    return GenerationResult(result.state.tokens, state.prefill_len, result.traces, result)


def read_tokens(path) -> np.ndarray:
    return np.array([int(t) for t in Path(path).read_text().split()], dtype=np.int64)


def write_tokens(path, tokens) -> None:
    Path(path).write_text(" ".join(str(int(t)) for t in tokens) + "\n")
