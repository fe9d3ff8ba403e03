"""Runners behind the ``bench``, ``ablate`` and ``sensitivity`` commands.

Each runner returns plain row dicts; the CLI turns them into CSV and figures.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, replace

import numpy as np

from .analysis import (
    flop_ratio_model,
    logit_relative_error,
    measured_flop_ratio,
    token_agreement,
)
from .pattern import SparseDConfig
from .scheduler import Phase, ScheduleMode
from .toydlm import ToyModel, generate

BENCH_HEADER = [
    "seq_len",
    "mode",
    "repeats",
    "mean_step_ns",
    "std_step_ns",
    "median_step_ns",
    "total_attn_flops",
    "flop_ratio",
    "predicted_flop_ratio",
    "density",
    "speedup",
]
BENCH_TIMING = ("mean_step_ns", "std_step_ns", "median_step_ns", "speedup")

ABLATE_HEADER = [
    "sweep",
    "value",
    "token_agreement",
    "logit_rel_error",
    "density",
    "mean_step_ns",
]

SENSITIVITY_HEADER = ["schedule", "switch_step", "token_agreement", "logit_rel_error"]


@dataclass(frozen=True)
class RunSpec:
    model: ToyModel
    prompt: np.ndarray
    gen_len: int
    config: SparseDConfig
    threads: int = 1


def sparse_density(traces) -> float:
    """Mean mask density over the sparse steps (1.0 if there were none)."""
    ds = [t.density for t in traces if t.phase is Phase.SPARSE]
    return float(np.mean(ds)) if ds else 1.0


def _step_times(traces) -> list[int]:
    return [t.wall_ns for t in traces]


def bench(
    specs_by_len: dict[int, RunSpec],
    modes: list[ScheduleMode],
    repeats: int,
) -> list[dict]:
    """Per (seq_len, mode): per-step wall time, total FLOPs, speedup vs dense."""
    if not any(m.kind == "dense" for m in modes):
        modes = [ScheduleMode("dense")] + list(modes)
    rows = []
    for seq_len, spec in specs_by_len.items():
        per_mode = {}
        for mode in modes:
            times: list[int] = []
            traces = None
            for _ in range(repeats):
                res = generate(spec.prompt, spec.gen_len, spec.model, mode, spec.config, spec.threads)
                traces = res.traces
                times.extend(_step_times(traces))
            per_mode[mode] = (times, traces)
        dense_times, dense_traces = per_mode[next(m for m in modes if m.kind == "dense")]
        dense_median = statistics.median(dense_times)
        for mode in modes:
            times, traces = per_mode[mode]
            dens = sparse_density(traces)
            predicted = ""
            if mode.kind in ("sparsed", "joint"):
                predicted = f"{flop_ratio_model(spec.config, dens):.6f}"
            median = statistics.median(times)
            rows.append(
                {
                    "seq_len": seq_len,
                    "mode": mode.kind,
                    "repeats": repeats,
                    "mean_step_ns": int(round(statistics.fmean(times))),
                    "std_step_ns": int(round(statistics.pstdev(times))),
                    "median_step_ns": int(round(median)),
                    "total_attn_flops": sum(t.attention_flops for t in traces),
                    "flop_ratio": f"{measured_flop_ratio(traces, dense_traces):.6f}",
                    "predicted_flop_ratio": predicted,
                    "density": f"{dens:.6f}",
                    "speedup": f"{dense_median / median:.4f}" if median else "",
                }
            )
    return rows


def ablate(spec: RunSpec, sweep: str, values: list[float], mode: ScheduleMode | None = None) -> list[dict]:
    """Sweep ``skip`` or ``rho`` and compare each run with the dense run."""
    if sweep not in ("skip", "rho"):
        raise ValueError(f"unknown sweep {sweep!r}")
    if not values:
        raise ValueError("empty sweep list")
    mode = mode or ScheduleMode("sparsed")
    ref = generate(spec.prompt, spec.gen_len, spec.model, ScheduleMode("dense"), spec.config, spec.threads, keep_logits=True)
    rows = []
    for value in values:
        cfg = replace(spec.config, **{sweep: value})
        res = generate(spec.prompt, spec.gen_len, spec.model, mode, cfg, spec.threads, keep_logits=True)
        rows.append(
            {
                "sweep": sweep,
                "value": f"{value:g}",
                "token_agreement": f"{token_agreement(res.tokens, ref.tokens, res.prefill_len):.6f}",
                "logit_rel_error": f"{logit_relative_error(res.logits, ref.logits):.6e}",
                "density": f"{sparse_density(res.traces):.6f}",
                "mean_step_ns": int(round(statistics.fmean(_step_times(res.traces)))),
            }
        )
    return rows


def sensitivity(spec: RunSpec, switch_steps: list[int]) -> list[dict]:
    """Early-step sensitivity: full-then-sparse and sparse-then-full schedules.

    Sparse steps rebuild top-rho block patterns from the current attention,
    so the only variable is *when* sparsity is applied.
    """
    ref = generate(spec.prompt, spec.gen_len, spec.model, ScheduleMode("dense"), spec.config, spec.threads, keep_logits=True)
    rows = []
    for kind in ("full-to-sparse", "sparse-to-full"):
        for x in switch_steps:
            mode = ScheduleMode(kind, switch_step=x)
            res = generate(spec.prompt, spec.gen_len, spec.model, mode, spec.config, spec.threads, keep_logits=True)
            rows.append(
                {
                    "schedule": kind,
                    "switch_step": x,
                    "token_agreement": f"{token_agreement(res.tokens, ref.tokens, res.prefill_len):.6f}",
                    "logit_rel_error": f"{logit_relative_error(res.logits, ref.logits):.6e}",
                }
            )
    return rows
