"""Block-granular sparse attention patterns.

A :class:`BlockMask` decides, per head, which ``block_size`` x ``block_size``
score tiles are computed. Queries and keys share the sequence length, so the
grid is square. The baselines here (sliding window, streaming with sinks) are
bidirectional since diffusion LMs attend in both directions.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import NEG_INF


def n_blocks(seq_len: int, block_size: int) -> int:
    return -(-seq_len // block_size)


@dataclass(frozen=True, eq=False)
class BlockMask:
    seq_len: int
    block_size: int
    prefill_len: int
    keep: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.block_size < 1:
            raise ValueError("invalid block size")
        if not 0 <= self.prefill_len <= self.seq_len:
            raise ValueError(
                f"prefill_len {self.prefill_len} outside [0, {self.seq_len}]"
            )
        nb = n_blocks(self.seq_len, self.block_size)
        keep = np.array(self.keep, dtype=bool)
        if keep.shape != (nb, nb):
            raise ValueError(f"keep grid shape {keep.shape}, expected {(nb, nb)}")
        if not keep.any(axis=1).all():
            bad = int(np.flatnonzero(~keep.any(axis=1))[0])
            raise ValueError(f"query block {bad} keeps no key block")
        keep.setflags(write=False)
        object.__setattr__(self, "keep", keep)

    @property
    def n_query_blocks(self) -> int:
        return self.keep.shape[0]

    @property
    def n_key_blocks(self) -> int:
        return self.keep.shape[1]

    def kept_blocks(self, query_block: int) -> np.ndarray:
        return np.flatnonzero(self.keep[query_block])

    def same_pattern(self, other: "BlockMask") -> bool:
        return (
            self.seq_len == other.seq_len
            and self.block_size == other.block_size
            and np.array_equal(self.keep, other.keep)
        )

    def __eq__(self, other):
        if not isinstance(other, BlockMask):
            return NotImplemented
        return self.prefill_len == other.prefill_len and self.same_pattern(other)

    __hash__ = object.__hash__

    def to_csv(self) -> str:
        """0/1 grid, one line per query block."""
        out = io.StringIO()
        for row in self.keep:
            out.write(",".join("1" if x else "0" for x in row))
            out.write("\n")
        return out.getvalue()

    def save_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def from_csv(cls, text: str, seq_len: int, block_size: int, prefill_len: int = 0):
        rows = [ln for ln in text.splitlines() if ln.strip()]
        keep = np.array([[c.strip() == "1" for c in ln.split(",")] for ln in rows])
        return cls(seq_len, block_size, prefill_len, keep)


def _check_sizes(seq_len: int, block_size: int, prefill_len: int) -> None:
    if seq_len < 1:
        raise ValueError("seq_len must be positive")
    if block_size < 1:
        raise ValueError("invalid block size")
    if not 0 <= prefill_len <= seq_len:
        raise ValueError("prefill_len must lie in [0, seq_len]")


def full_mask(seq_len: int, block_size: int, prefill_len: int = 0) -> BlockMask:
    _check_sizes(seq_len, block_size, prefill_len)
    nb = n_blocks(seq_len, block_size)
    return BlockMask(seq_len, block_size, prefill_len, np.ones((nb, nb), dtype=bool))


def _window_grid(seq_len: int, block_size: int, window_size: int) -> np.ndarray:
    # Tiles i, j contain a pair with |q - k| < window_size iff the gap between
    # their token intervals is below window_size.
    starts = np.arange(0, seq_len, block_size)
    ends = np.minimum(starts + block_size, seq_len) - 1
    gap_right = starts[None, :] - ends[:, None]  # key block after query block
    gap_left = starts[:, None] - ends[None, :]  # key block before query block
    gap = np.maximum(np.maximum(gap_right, gap_left), 0)
    return gap < window_size


def sliding_window_mask(
    seq_len: int, block_size: int, prefill_len: int, window_size: int
) -> BlockMask:
    _check_sizes(seq_len, block_size, prefill_len)
    if window_size <= 0:
        raise ValueError("empty window")
    if window_size < block_size:
        raise ValueError("window_size must be at least block_size")
    keep = _window_grid(seq_len, block_size, window_size)
    return BlockMask(seq_len, block_size, prefill_len, keep)


def streaming_mask(
    seq_len: int,
    block_size: int,
    prefill_len: int,
    window_size: int,
    sink_fraction: float,
) -> BlockMask:
    """Sliding window plus every key block touching the first sink tokens."""
    if not 0.0 <= sink_fraction <= 1.0:
        raise ValueError("sink_fraction must lie in [0, 1]")
    base = sliding_window_mask(seq_len, block_size, prefill_len, window_size)
    n_sink = math.ceil(sink_fraction * seq_len)
    keep = base.keep.copy()
    if n_sink > 0:
        keep[:, : n_blocks(n_sink, block_size)] = True
    return BlockMask(seq_len, block_size, prefill_len, keep)


def mask_to_dense_bias(mask: BlockMask) -> np.ndarray:
    """Expand a block mask to an ``l x l`` additive bias (0 or ``NEG_INF``)."""
    l, bs = mask.seq_len, mask.block_size
    token_block = np.arange(l) // bs
    kept = mask.keep[np.ix_(token_block, token_block)]
    bias = np.zeros((l, l))
    bias[~kept] = NEG_INF
    return bias


def density(mask: BlockMask) -> float:
    return float(mask.keep.sum()) / mask.keep.size
