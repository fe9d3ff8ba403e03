"""Head-specific pattern capture.

Pooled attention scores are computed one chunk of query blocks at a time, so
the full ``l x l`` probability matrix never exists. Each query-block row then
keeps its top-ranked key blocks separately inside the prefill and the
generation region, with the same ratio for both.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .masks import BlockMask, n_blocks
from .numerics import as_matrix, block_avg_pool, stable_softmax_rows


@dataclass(frozen=True)
class SparseDConfig:
    rho: float = 0.5
    skip: float = 0.2
    block_size: int = 32
    total_steps: int = 32

    def __post_init__(self):
        if not 0.0 < self.rho <= 1.0:
            raise ValueError("rho must lie in (0, 1]")
        if not 0.0 <= self.skip < 1.0:
            raise ValueError("skip must lie in [0, 1)")
        if self.block_size < 1:
            raise ValueError("invalid block size")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")


@dataclass(frozen=True)
class PooledScores:
    grid: np.ndarray
    block_size: int
    prefill_boundary_block: int


def prefill_boundary_block(prefill_len: int, block_size: int) -> int:
    """Key blocks starting before ``prefill_len`` belong to the prefill region."""
    return n_blocks(prefill_len, block_size)


def region_keep_count(rho: float, n_region: int) -> int:
    """ceil(rho * n), at least 1 for a non-empty region, at most n.

    The product is rounded to 9 decimals first so 0.3 * 10 counts as 3.
    """
    if n_region <= 0:
        return 0
    k = math.ceil(round(rho * n_region, 9))
    return min(n_region, max(1, k))


def pooled_scores_chunked(
    q,
    k,
    block_size: int,
    chunk_blocks: int = 1,
    prefill_len: int = 0,
    counter=None,
) -> PooledScores:
    """Block-averaged ``softmax(q k^T / sqrt(d))`` computed chunk by chunk.

    Each chunk holds ``chunk_blocks`` query blocks against all keys; softmax
    rows always span every key, so the result does not depend on the chunking.
    """
    q = as_matrix(q)
    k = as_matrix(k)
    l, d = q.shape
    if d == 0:
        raise ValueError("empty head dimension")
    if k.shape != (l, d):
        raise ValueError(f"q {q.shape} and k {k.shape} must match")
    if block_size < 1:
        raise ValueError("invalid block size")
    if chunk_blocks < 1:
        raise ValueError("chunk_blocks must be >= 1")
    scale = 1.0 / math.sqrt(d)
    kt = k.T
    step = chunk_blocks * block_size
    parts = []
    for start in range(0, l, step):
        rows = q[start : start + step]
        probs = stable_softmax_rows((rows @ kt) * scale)
        parts.append(block_avg_pool(probs, block_size))
        if counter is not None:
            counter.add(score=2 * rows.shape[0] * l * d, aux=2 * rows.shape[0] * l)
    return PooledScores(
        grid=np.vstack(parts),
        block_size=block_size,
        prefill_boundary_block=prefill_boundary_block(prefill_len, block_size),
    )


def _top(scores: np.ndarray, count: int) -> np.ndarray:
    # stable sort on negated scores: ties go to the lower index
    return np.argsort(-scores, kind="stable")[:count]


def isolated_topk_row(pooled_row, prefill_boundary_block: int, rho: float) -> set[int]:
    """Top key blocks chosen separately for prefill and generation regions."""
    if rho <= 0:
        raise ValueError("empty selection")
    if rho > 1:
        raise ValueError("rho must be <= 1")
    row = np.asarray(pooled_row, dtype=np.float64)
    b = prefill_boundary_block
    if not 0 <= b <= row.size:
        raise ValueError("prefill boundary outside the row")
    pre = _top(row[:b], region_keep_count(rho, b))
    gen = _top(row[b:], region_keep_count(rho, row.size - b)) + b
    return {int(i) for i in pre} | {int(i) for i in gen}


def joint_selection_variant(pooled_row, rho: float) -> set[int]:
    """Top key blocks over the whole row, ignoring the prefill split."""
    if rho <= 0:
        raise ValueError("empty selection")
    if rho > 1:
        raise ValueError("rho must be <= 1")
    row = np.asarray(pooled_row, dtype=np.float64)
    return {int(i) for i in _top(row, region_keep_count(rho, row.size))}


def mask_from_pooled(
    pooled: PooledScores,
    seq_len: int,
    prefill_len: int,
    rho: float,
    selection: str = "isolated",
) -> BlockMask:
    grid = pooled.grid
    keep = np.zeros(grid.shape, dtype=bool)
    for i, row in enumerate(grid):
        if selection == "isolated":
            kept = isolated_topk_row(row, pooled.prefill_boundary_block, rho)
        elif selection == "joint":
            kept = joint_selection_variant(row, rho)
        else:
            raise ValueError(f"unknown selection {selection!r}")
        keep[i, sorted(kept)] = True
    return BlockMask(seq_len, pooled.block_size, prefill_len, keep)


def build_pattern(
    q,
    k,
    prefill_len: int,
    config: SparseDConfig,
    chunk_blocks: int = 1,
    selection: str = "isolated",
    counter=None,
) -> BlockMask:
    q = as_matrix(q)
    l = q.shape[0]
    if not 0 <= prefill_len <= l:
        raise ValueError("prefill_len must lie in [0, l]")
    pooled = pooled_scores_chunked(
        q, k, config.block_size, chunk_blocks, prefill_len, counter=counter
    )
    return mask_from_pooled(pooled, l, prefill_len, config.rho, selection)


class PatternCache:
    """Per-(layer, head) masks, written once and read-only afterwards."""

    def __init__(self):
        self._entries: dict[tuple[int, int], BlockMask] = {}
        self.captured_at_step: int | None = None
        self.hits = 0

    @property
    def is_captured(self) -> bool:
        return self.captured_at_step is not None

    def __len__(self):
        return len(self._entries)

    def __contains__(self, key):
        return key in self._entries

    def keys(self):
        return self._entries.keys()

    def store(self, entries: Mapping[tuple[int, int], BlockMask], step: int) -> None:
        if self.is_captured:
            raise RuntimeError("pattern already captured")
        if not entries:
            raise ValueError("capture needs at least one (layer, head) entry")
        self._entries = dict(entries)
        self.captured_at_step = step

    def retrieve(self, layer: int, head: int) -> BlockMask:
        if not self.is_captured:
            raise RuntimeError("no pattern captured yet")
        self.hits += 1
        return self._entries[(layer, head)]

    def items(self):
        return sorted(self._entries.items())


def capture(
    cache: PatternCache,
    qk: Mapping[tuple[int, int], tuple[np.ndarray, np.ndarray]]
    | Iterable[tuple[tuple[int, int], tuple[np.ndarray, np.ndarray]]],
    prefill_len: int,
    config: SparseDConfig,
    step: int,
    chunk_blocks: int = 1,
    selection: str = "isolated",
    counter=None,
) -> PatternCache:
    """Build one mask per (layer, head) and freeze them into ``cache``."""
    if cache.is_captured:
        raise RuntimeError("pattern already captured")
    items = qk.items() if isinstance(qk, Mapping) else qk
    entries = {
        key: build_pattern(q, k, prefill_len, config, chunk_blocks, selection, counter)
        for key, (q, k) in items
    }
    cache.store(entries, step)
    return cache
