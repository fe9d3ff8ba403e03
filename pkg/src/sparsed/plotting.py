"""Matplotlib figures written next to the CSV reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no Software/date chunks, so identical data gives identical PNG bytes
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def attention_grid(dumps, steps, layer: int, heads, prefill_len: int, path) -> Path:
    """Heads as rows, steps as columns; red line splits prefill/generation keys."""
    steps = list(steps)
    heads = list(heads)
    fig, axes = plt.subplots(
        len(heads), len(steps), figsize=(2.0 * len(steps), 2.0 * len(heads)), squeeze=False
    )
    for r, h in enumerate(heads):
        for c, s in enumerate(steps):
            ax = axes[r][c]
            a = dumps[s][(layer, h)]
            ax.imshow(a, cmap="viridis", interpolation="nearest", vmin=0.0, vmax=a.max())
            if 0 < prefill_len < a.shape[1]:
                ax.axvline(prefill_len - 0.5, color="red", linewidth=1.0)
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(f"step {s}", fontsize=9)
            if c == 0:
                ax.set_ylabel(f"L{layer} H{h}", fontsize=9)
    fig.tight_layout()
    return _save(fig, path)


def similarity_grid(reports, path) -> Path:
    reports = list(reports)
    n = len(reports)
    cols = min(n, 4)
    rows = -(-n // cols)
    fig, axes = plt.subplots(rows, cols, figsize=(2.6 * cols, 2.4 * rows), squeeze=False)
    for ax in axes.flat[n:]:
        ax.axis("off")
    for ax, rep in zip(axes.flat, reports):
        im = ax.imshow(rep.matrix, cmap="magma", vmin=min(0.0, rep.matrix.min()), vmax=1.0)
        ax.set_title(f"L{rep.layer} H{rep.head}", fontsize=9)
        ax.set_xlabel("step", fontsize=8)
        ax.set_ylabel("step", fontsize=8)
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    fig.tight_layout()
    return _save(fig, path)


def bench_plot(rows, path) -> Path:
    fig, (ax_t, ax_s) = plt.subplots(1, 2, figsize=(9, 3.5))
    modes = sorted({r["mode"] for r in rows}, key=lambda m: (m != "dense", m))
    for mode in modes:
        sel = sorted((r for r in rows if r["mode"] == mode), key=lambda r: r["seq_len"])
        x = [r["seq_len"] for r in sel]
        ax_t.plot(x, [r["median_step_ns"] / 1e6 for r in sel], marker="o", label=mode)
        ax_s.plot(x, [float(r["speedup"]) for r in sel], marker="o", label=mode)
    ax_t.set_xlabel("sequence length")
    ax_t.set_ylabel("median attention ms / step")
    ax_s.set_xlabel("sequence length")
    ax_s.set_ylabel("speedup vs dense")
    ax_s.axhline(1.0, color="grey", linestyle="--", linewidth=0.8)
    ax_t.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def ablation_plot(rows, path) -> Path:
    sweep = rows[0]["sweep"]
    x = [float(r["value"]) for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(x, [float(r["token_agreement"]) for r in rows], marker="o", label="token agreement")
    ax.plot(x, [float(r["density"]) for r in rows], marker="s", label="density")
    ax.set_xlabel(sweep)
    ax.set_ylim(0.0, 1.05)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def sensitivity_plot(rows, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for kind, style in (("full-to-sparse", "o-"), ("sparse-to-full", "s--")):
        sel = [r for r in rows if r["schedule"] == kind]
        ax.plot(
            [r["switch_step"] for r in sel],
            [float(r["logit_rel_error"]) for r in sel],
            style,
            label=kind,
        )
    ax.set_xlabel("switch step")
    ax.set_ylabel("logit relative error vs dense")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def mask_grid(masks, path) -> Path:
    """Kept-tile grids for captured (layer, head) masks."""
    items = list(masks)
    n = len(items)
    cols = min(n, 4)
    rows = -(-n // cols)
    fig, axes = plt.subplots(rows, cols, figsize=(2.2 * cols, 2.2 * rows), squeeze=False)
    for ax in axes.flat:
        ax.set_xticks([])
        ax.set_yticks([])
    for ax in axes.flat[n:]:
        ax.axis("off")
    for ax, ((layer, head), m) in zip(axes.flat, items):
        ax.imshow(np.asarray(m.keep, dtype=float), cmap="Greys", vmin=0, vmax=1)
        ax.set_title(f"L{layer} H{head}", fontsize=9)
    fig.tight_layout()
    return _save(fig, path)
