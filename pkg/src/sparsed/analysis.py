"""Measurements: output error, retained mass, cross-step similarity, FLOP model.

Also holds the binary PGM writer used for attention and similarity maps.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .masks import BlockMask
from .numerics import as_matrix, cosine_similarity
from .pattern import SparseDConfig
from .scheduler import capture_step


def output_error(sparse_out, dense_out) -> float:
    """Relative Frobenius error ``|sparse - dense| / |dense|``."""
    s = np.asarray(sparse_out, dtype=np.float64)
    d = np.asarray(dense_out, dtype=np.float64)
    if s.shape != d.shape:
        raise ValueError(f"shape mismatch {s.shape} vs {d.shape}")
    denom = np.linalg.norm(d)
    if denom == 0.0:
        raise ValueError("dense output is zero")
    return float(np.linalg.norm(s - d) / denom)


@dataclass(frozen=True)
class RetainedMass:
    per_block_row: np.ndarray
    per_row: np.ndarray
    mean: float


def retained_mass(attention_probs, mask: BlockMask) -> RetainedMass:
    a = as_matrix(attention_probs)
    l = mask.seq_len
    if a.shape != (l, l):
        raise ValueError(f"attention map {a.shape} does not match mask length {l}")
    if not np.allclose(a.sum(axis=1), 1.0, atol=1e-6):
        raise ValueError("attention rows must sum to 1")
    token_block = np.arange(l) // mask.block_size
    kept = mask.keep[np.ix_(token_block, token_block)]
    per_row = np.where(kept, a, 0.0).sum(axis=1)
    per_block = np.add.reduceat(per_row, np.arange(0, l, mask.block_size))
    counts = np.bincount(token_block)
    return RetainedMass(per_block / counts, per_row, float(per_row.mean()))


def region_retained_mass(attention_probs, query_block: int, key_blocks, block_size: int) -> float:
    """Mean over the query block's rows of mass inside ``key_blocks``."""
    a = as_matrix(attention_probs)
    l = a.shape[0]
    rows = a[query_block * block_size : min((query_block + 1) * block_size, l)]
    total = 0.0
    for kb in sorted(key_blocks):
        total += rows[:, kb * block_size : min((kb + 1) * block_size, l)].sum()
    return total / rows.shape[0]


@dataclass(frozen=True)
class SimilarityReport:
    layer: int
    head: int
    steps: tuple[int, ...]
    matrix: np.ndarray

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["step"] + list(self.steps))
        for s, row in zip(self.steps, self.matrix):
            w.writerow([s] + [f"{x:.6f}" for x in row])
        return out.getvalue()


def step_similarity(
    dumps: Mapping[int, Mapping[tuple[int, int], np.ndarray]], layer: int, head: int
) -> SimilarityReport:
    """Cosine similarity between one head's flattened maps for every step pair."""
    steps = tuple(sorted(dumps))
    if len(steps) < 2:
        raise ValueError("need at least two dumped steps")
    maps = [np.asarray(dumps[s][(layer, head)], dtype=np.float64) for s in steps]
    shape = maps[0].shape
    if any(m.shape != shape for m in maps):
        raise ValueError("attention maps differ in shape across steps")
    n = len(steps)
    sim = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            sim[i, j] = sim[j, i] = cosine_similarity(maps[i], maps[j])
    return SimilarityReport(layer, head, steps, sim)


def flop_ratio_model(config: SparseDConfig, density: float) -> float:
    """Predicted sparse/dense attention-FLOP ratio over a whole run.

    ``s`` full steps, ``T - s`` steps at ``density``, plus half a dense step
    for the score-only pass at capture.
    """
    if not 0.0 < density <= 1.0:
        raise ValueError("density must lie in (0, 1]")
    T = config.total_steps
    s = capture_step(config)
    return (s + (T - s) * density + 0.5) / T


def measured_flop_ratio(sparse_traces: Sequence, dense_traces: Sequence) -> float:
    num = sum(t.attention_flops for t in sparse_traces)
    den = sum(t.attention_flops for t in dense_traces)
    if den == 0:
        raise ValueError("dense run recorded no FLOPs")
    return num / den


def token_agreement(tokens, reference, prefill_len: int = 0) -> float:
    a = np.asarray(tokens)[prefill_len:]
    b = np.asarray(reference)[prefill_len:]
    if a.shape != b.shape:
        raise ValueError("token sequences differ in length")
    if a.size == 0:
        return 1.0
    return float(np.mean(a == b))


def logit_relative_error(logits: Sequence[np.ndarray], reference: Sequence[np.ndarray]) -> float:
    """Relative Frobenius error over the stacked per-step logits."""
    return output_error(np.stack(list(logits)), np.stack(list(reference)))


def max_logit_diff(logits: Sequence[np.ndarray], reference: Sequence[np.ndarray]) -> float:
    return float(max(np.abs(a - b).max() for a, b in zip(logits, reference)))


def to_gray8(values, boundary_col: int | None = None) -> np.ndarray:
    """Max-normalise to 0..255; optionally insert a white column before ``boundary_col``."""
    a = np.asarray(values, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("expected a 2-D map")
    peak = a.max() if a.size else 0.0
    if peak > 0:
        img = np.floor(np.clip(a, 0.0, None) / peak * 255.0 + 0.5).astype(np.uint8)
    else:
        img = np.zeros(a.shape, dtype=np.uint8)
    if boundary_col is not None and 0 < boundary_col < a.shape[1]:
        line = np.full((a.shape[0], 1), 255, dtype=np.uint8)
        img = np.hstack([img[:, :boundary_col], line, img[:, boundary_col:]])
    return img


def pgm_bytes(values, boundary_col: int | None = None) -> bytes:
    img = to_gray8(values, boundary_col)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def write_pgm(path, values, boundary_col: int | None = None) -> None:
    Path(path).write_bytes(pgm_bytes(values, boundary_col))


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)
