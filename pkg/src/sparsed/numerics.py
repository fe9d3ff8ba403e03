"""Dense numeric primitives shared by the attention and selection code.

Matrices are plain 2-D ``float64`` numpy arrays. Additive bias matrices use
``NEG_INF`` as the "masked" sentinel; it is only ever assigned, never the
result of arithmetic.
"""

from __future__ import annotations

import numpy as np

NEG_INF = -np.inf


def as_matrix(m) -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def stable_softmax_rows(scores) -> np.ndarray:
    """Row-wise softmax with max subtraction.

    Entries equal to ``NEG_INF`` come out as exactly 0. A row with no finite
    entry means the mask upstream is broken, so it raises instead of
    producing NaNs.
    """
    s = as_matrix(scores)
    if s.shape[1] == 0:
        raise ValueError("softmax needs at least one column")
    row_max = s.max(axis=1, keepdims=True)
    if np.any(row_max == NEG_INF):
        raise ValueError("fully masked row")
    e = np.exp(s - row_max)
    return e / e.sum(axis=1, keepdims=True)


def _block_starts(n: int, block_size: int) -> np.ndarray:
    return np.arange(0, n, block_size)


def block_counts(n: int, block_size: int) -> np.ndarray:
    """Number of valid entries in each block along an axis of length ``n``."""
    starts = _block_starts(n, block_size)
    return np.minimum(starts + block_size, n) - starts


def block_avg_pool(m, block_size: int) -> np.ndarray:
    """Mean of each ``block_size`` x ``block_size`` tile.

    Ragged edge tiles are averaged over their valid entries only.
    """
    if block_size < 1:
        raise ValueError("invalid block size")
    a = as_matrix(m)
    rows, cols = a.shape
    if rows == 0 or cols == 0:
        raise ValueError("cannot pool an empty matrix")
    summed = np.add.reduceat(a, _block_starts(rows, block_size), axis=0)
    summed = np.add.reduceat(summed, _block_starts(cols, block_size), axis=1)
    counts = np.outer(block_counts(rows, block_size), block_counts(cols, block_size))
    return summed / counts


def cosine_similarity(a, b) -> float:
    x = np.asarray(a, dtype=np.float64).ravel()
    y = np.asarray(b, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    nx = np.linalg.norm(x)
    ny = np.linalg.norm(y)
    if nx == 0.0 or ny == 0.0:
        raise ValueError("undefined similarity")
    c = float(np.dot(x, y) / (nx * ny))
    return min(1.0, max(-1.0, c))
