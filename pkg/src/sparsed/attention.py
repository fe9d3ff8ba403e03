"""Attention executors and FLOP accounting.

``dense_attention`` and ``masked_dense_attention`` are the reference paths.
``block_sparse_attention`` only touches kept tiles and normalises with an
online (running max / running sum) softmax, which is where the speedup
comes from.
"""

from __future__ import annotations

import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .masks import BlockMask
from .numerics import as_matrix, stable_softmax_rows

# query rows per chunk on the dense path; bounds the live score buffer
DENSE_ROW_CHUNK = 1024


@dataclass(frozen=True)
class HeadInputs:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        q, k, v = as_matrix(self.q), as_matrix(self.k), as_matrix(self.v)
        if q.shape[1] < 1:
            raise ValueError("empty head dimension")
        if k.shape != q.shape:
            raise ValueError(f"k shape {k.shape} != q shape {q.shape}")
        if v.shape[0] != q.shape[0]:
            raise ValueError(f"v has {v.shape[0]} rows, expected {q.shape[0]}")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "v", v)

    @property
    def seq_len(self) -> int:
        return self.q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.q.shape[1]


@dataclass
class FlopCounter:
    """Multiply-add counts for the two quadratic attention products.

    ``aux_flops`` collects softmax and pooling work; it is reported but kept
    out of the sparse/dense ratio.
    """

    score_flops: int = 0
    weighted_sum_flops: int = 0
    aux_flops: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def add(self, score: int = 0, av: int = 0, aux: int = 0) -> None:
        with self._lock:
            self.score_flops += int(score)
            self.weighted_sum_flops += int(av)
            self.aux_flops += int(aux)

    def merge(self, other: "FlopCounter") -> None:
        self.add(other.score_flops, other.weighted_sum_flops, other.aux_flops)

    @property
    def total(self) -> int:
        return self.score_flops + self.weighted_sum_flops

    def snapshot(self) -> tuple[int, int, int]:
        return self.score_flops, self.weighted_sum_flops, self.aux_flops


def _scale(d: int) -> float:
    return 1.0 / math.sqrt(d)


def dense_attention(h: HeadInputs, counter: FlopCounter | None = None) -> np.ndarray:
    l, d = h.q.shape
    scale = _scale(d)
    kt = h.k.T
    out = np.empty((l, h.v.shape[1]))
    for start in range(0, l, DENSE_ROW_CHUNK):
        stop = min(start + DENSE_ROW_CHUNK, l)
        probs = stable_softmax_rows((h.q[start:stop] @ kt) * scale)
        out[start:stop] = probs @ h.v
    if counter is not None:
        counter.add(score=2 * l * l * d, av=2 * l * l * h.v.shape[1], aux=3 * l * l)
    return out


def masked_dense_attention(
    h: HeadInputs, bias, counter: FlopCounter | None = None
) -> np.ndarray:
    l, d = h.q.shape
    bias = as_matrix(bias)
    if bias.shape != (l, l):
        raise ValueError(f"bias shape {bias.shape}, expected {(l, l)}")
    probs = stable_softmax_rows((h.q @ h.k.T) * _scale(d) + bias)
    if counter is not None:
        counter.add(score=2 * l * l * d, av=2 * l * l * h.v.shape[1], aux=3 * l * l)
    return probs @ h.v


def _kept_spans(kept: np.ndarray) -> list[tuple[int, int]]:
    """Group sorted block indices into runs of consecutive blocks."""
    spans = []
    start = prev = int(kept[0])
    for b in kept[1:]:
        b = int(b)
        if b != prev + 1:
            spans.append((start, prev + 1))
            start = b
        prev = b
    spans.append((start, prev + 1))
    return spans


def block_sparse_attention(
    h: HeadInputs, mask: BlockMask, counter: FlopCounter | None = None
) -> np.ndarray:
    """Attention restricted to the kept tiles of ``mask``.

    Runs of adjacent kept key blocks are processed as one slice; the running
    max and denominator are carried across runs, so no score row is ever
    materialised beyond the kept tiles.
    """
    l, d = h.q.shape
    if mask.seq_len != l:
        raise ValueError("mask shape mismatch")
    bs = mask.block_size
    dv = h.v.shape[1]
    scale = _scale(d)
    out = np.empty((l, dv))
    score_flops = av_flops = aux = 0
    for qb in range(mask.n_query_blocks):
        q0, q1 = qb * bs, min((qb + 1) * bs, l)
        qs = h.q[q0:q1] * scale
        rows = q1 - q0
        run_max = np.full(rows, -np.inf)
        run_sum = np.zeros(rows)
        acc = np.zeros((rows, dv))
        for kb0, kb1 in _kept_spans(mask.kept_blocks(qb)):
            k0, k1 = kb0 * bs, min(kb1 * bs, l)
            s = qs @ h.k[k0:k1].T
            new_max = np.maximum(run_max, s.max(axis=1))
            alpha = np.exp(run_max - new_max)
            p = np.exp(s - new_max[:, None])
            run_sum = run_sum * alpha + p.sum(axis=1)
            acc = acc * alpha[:, None] + p @ h.v[k0:k1]
            run_max = new_max
            cols = k1 - k0
            score_flops += 2 * rows * cols * d
            av_flops += 2 * rows * cols * dv
            aux += 3 * rows * cols
        out[q0:q1] = acc / run_sum[:, None]
    if counter is not None:
        counter.add(score=score_flops, av=av_flops, aux=aux)
    return out


def _run_head(h: HeadInputs, mask: BlockMask | None) -> tuple[np.ndarray, FlopCounter]:
    local = FlopCounter()
    if mask is None:
        return dense_attention(h, local), local
    return block_sparse_attention(h, mask, local), local


def multi_head_attention(
    heads: Sequence[HeadInputs],
    masks: Sequence[BlockMask | None] | None = None,
    counter: FlopCounter | None = None,
    threads: int = 1,
) -> list[np.ndarray]:
    """Run every head with its own mask (``None`` = dense).

    Outputs come back in head order and FLOPs are merged in head order, so
    the result does not depend on ``threads``.
    """
    if masks is None:
        masks = [None] * len(heads)
    if len(masks) != len(heads):
        raise ValueError(f"got {len(masks)} masks for {len(heads)} heads")
    if threads > 1 and len(heads) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_head, heads, masks))
    else:
        results = [_run_head(h, m) for h, m in zip(heads, masks)]
    if counter is not None:
        for _, local in results:
            counter.merge(local)
    return [out for out, _ in results]
