"""Step scheduling: full attention early, one capture step, sparse reuse after.

:class:`AttentionScheduler` is the hook a model's forward pass calls for
every layer. It decides per step whether heads run dense or block-sparse,
captures patterns at the capture step and records a :class:`StepTrace`.
Ablation and baseline modes share the same machinery.
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .attention import FlopCounter, HeadInputs, multi_head_attention
from .masks import BlockMask, density, sliding_window_mask, streaming_mask
from .numerics import stable_softmax_rows
from .pattern import PatternCache, SparseDConfig, build_pattern, joint_selection_variant

__all__ = [
    "Phase",
    "ScheduleMode",
    "StepTrace",
    "AttentionScheduler",
    "ScheduleResult",
    "capture_step",
    "plan_step",
    "run_schedule",
    "joint_selection_variant",
    "traces_to_csv",
    "TRACE_HEADER",
]


class Phase(str, Enum):
    FULL = "Full"
    CAPTURE = "FullAndCapture"
    SPARSE = "Sparse"


MODE_KINDS = (
    "dense",
    "sparsed",
    "always-sparse",
    "recompute",
    "joint",
    "window",
    "streaming",
    "full-to-sparse",
    "sparse-to-full",
)


@dataclass(frozen=True)
class ScheduleMode:
    """Which attention runs at which step.

    ``full-to-sparse`` / ``sparse-to-full`` switch after ``switch_step`` steps
    and rebuild patterns at every sparse step; they drive the early-step
    sensitivity sweep.
    """

    kind: str = "sparsed"
    window_size: int | None = None
    sink_fraction: float | None = None
    switch_step: int | None = None

    def __post_init__(self):
        if self.kind not in MODE_KINDS:
            raise ValueError(f"unknown mode {self.kind!r}")
        if self.kind in ("window", "streaming"):
            if self.window_size is None or self.window_size <= 0:
                raise ValueError("empty window")
        if self.kind == "streaming":
            if self.sink_fraction is None or not 0.0 <= self.sink_fraction <= 1.0:
                raise ValueError("sink_fraction must lie in [0, 1]")
        if self.kind in ("full-to-sparse", "sparse-to-full"):
            if self.switch_step is None or self.switch_step < 0:
                raise ValueError("switch_step must be >= 0")

    @classmethod
    def parse(cls, kind: str, window_size=None, sink_fraction=None, switch_step=None):
        return cls(kind, window_size, sink_fraction, switch_step)

    @property
    def uses_cache(self) -> bool:
        return self.kind in ("sparsed", "always-sparse", "joint")

    @property
    def rebuilds_every_step(self) -> bool:
        return self.kind in ("recompute", "full-to-sparse", "sparse-to-full")

    @property
    def selection(self) -> str:
        return "joint" if self.kind == "joint" else "isolated"


def capture_step(config: SparseDConfig) -> int:
    """max(1, round_half_up(T * skip))."""
    return max(1, math.floor(round(config.total_steps * config.skip, 9) + 0.5))


def plan_step(step: int, config: SparseDConfig) -> Phase:
    if not 1 <= step <= config.total_steps:
        raise ValueError(f"step {step} outside [1, {config.total_steps}]")
    s = capture_step(config)
    if step < s:
        return Phase.FULL
    if step == s:
        return Phase.CAPTURE
    return Phase.SPARSE


def mode_phase(step: int, mode: ScheduleMode, config: SparseDConfig) -> Phase:
    kind = mode.kind
    if not 1 <= step <= config.total_steps:
        raise ValueError(f"step {step} outside [1, {config.total_steps}]")
    if kind == "dense":
        return Phase.FULL
    if kind in ("window", "streaming"):
        return Phase.SPARSE
    if kind == "always-sparse":
        return Phase.CAPTURE if step == 1 else Phase.SPARSE
    if kind == "full-to-sparse":
        return Phase.FULL if step <= mode.switch_step else Phase.SPARSE
    if kind == "sparse-to-full":
        return Phase.SPARSE if step <= mode.switch_step else Phase.FULL
    return plan_step(step, config)


@dataclass
class StepTrace:
    step: int
    phase: Phase
    flops_score: int = 0
    flops_av: int = 0
    flops_aux: int = 0
    wall_ns: int = 0
    cache_hits: int = 0
    pattern_builds: int = 0
    density: float = 1.0

    @property
    def attention_flops(self) -> int:
        return self.flops_score + self.flops_av


TRACE_HEADER = ["step", "phase", "flops_score", "flops_av", "wall_ns", "cache_hits"]


def traces_to_csv(traces: Sequence[StepTrace], include_timing: bool = True) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    header = TRACE_HEADER if include_timing else [c for c in TRACE_HEADER if c != "wall_ns"]
    w.writerow(header)
    for t in traces:
        row = [t.step, t.phase.value, t.flops_score, t.flops_av, t.wall_ns, t.cache_hits]
        if not include_timing:
            del row[4]
        w.writerow(row)
    return out.getvalue()


class AttentionScheduler:
    """Per-step attention dispatcher handed to a model's forward pass."""

    def __init__(
        self,
        mode: ScheduleMode,
        config: SparseDConfig,
        seq_len: int,
        prefill_len: int,
        threads: int = 1,
        chunk_blocks: int = 1,
        dump_attn: bool = False,
        record_masks: bool = False,
    ):
        self.mode = mode
        self.config = config
        self.seq_len = seq_len
        self.prefill_len = prefill_len
        self.threads = threads
        self.chunk_blocks = chunk_blocks
        self.dump_attn = dump_attn
        self.record_masks = record_masks
        self.cache = PatternCache()
        self.counter = FlopCounter()
        self.attn_dumps: dict[int, dict[tuple[int, int], np.ndarray]] = {}
        self.mask_history: dict[int, dict[tuple[int, int], BlockMask]] = {}
        self.static_mask = self._static_mask()
        self._step = 0
        self._phase: Phase | None = None
        self._trace: StepTrace | None = None
        self._pending: dict[tuple[int, int], BlockMask] = {}
        self._densities: list[float] = []

    def _static_mask(self) -> BlockMask | None:
        m, c = self.mode, self.config
        if m.kind == "window":
            return sliding_window_mask(self.seq_len, c.block_size, self.prefill_len, m.window_size)
        if m.kind == "streaming":
            return streaming_mask(
                self.seq_len, c.block_size, self.prefill_len, m.window_size, m.sink_fraction
            )
        return None

    @property
    def phase(self) -> Phase | None:
        return self._phase

    def begin_step(self, step: int) -> Phase:
        self._step = step
        self._phase = mode_phase(step, self.mode, self.config)
        self._trace = StepTrace(step=step, phase=self._phase)
        self._pending = {}
        self._densities = []
        self._hits_before = self.cache.hits
        self._flops_before = self.counter.snapshot()
        return self._phase

    def _build(self, layer: int, heads: Sequence[HeadInputs], local: FlopCounter) -> list[BlockMask]:
        masks = [
            build_pattern(
                h.q,
                h.k,
                self.prefill_len,
                self.config,
                self.chunk_blocks,
                self.mode.selection,
                counter=local,
            )
            for h in heads
        ]
        self._trace.pattern_builds += len(masks)
        return masks

    def attend(self, layer: int, heads: Sequence[HeadInputs]) -> list[np.ndarray]:
        if self._trace is None:
            raise RuntimeError("attend called outside a step")
        if self.dump_attn:
            self._dump(layer, heads)
        local = FlopCounter()
        t0 = time.perf_counter_ns()
        if self._phase is Phase.FULL:
            outs = multi_head_attention(heads, None, local, self.threads)
            masks = None
        elif self._phase is Phase.CAPTURE:
            outs = multi_head_attention(heads, None, local, self.threads)
            masks = self._build(layer, heads, local)
            for h, m in enumerate(masks):
                self._pending[(layer, h)] = m
        else:
            if self.static_mask is not None:
                masks = [self.static_mask] * len(heads)
            elif self.mode.uses_cache:
                masks = [self.cache.retrieve(layer, h) for h in range(len(heads))]
            else:
                masks = self._build(layer, heads, local)
            outs = multi_head_attention(heads, masks, local, self.threads)
            self._densities.extend(density(m) for m in masks)
        self._trace.wall_ns += time.perf_counter_ns() - t0
        self.counter.merge(local)
        if self.record_masks and masks is not None:
            step_masks = self.mask_history.setdefault(self._step, {})
            for h, m in enumerate(masks):
                step_masks[(layer, h)] = m
        return outs

    def _dump(self, layer: int, heads: Sequence[HeadInputs]) -> None:
        maps = self.attn_dumps.setdefault(self._step, {})
        for h, hi in enumerate(heads):
            maps[(layer, h)] = stable_softmax_rows((hi.q @ hi.k.T) / math.sqrt(hi.head_dim))

    def end_step(self) -> StepTrace:
        trace = self._trace
        if self._phase is Phase.CAPTURE and self.mode.uses_cache:
            self.cache.store(self._pending, self._step)
        s0, a0, x0 = self._flops_before
        s1, a1, x1 = self.counter.snapshot()
        trace.flops_score, trace.flops_av, trace.flops_aux = s1 - s0, a1 - a0, x1 - x0
        trace.cache_hits = self.cache.hits - self._hits_before
        if self._densities:
            trace.density = float(np.mean(self._densities))
        self._trace = None
        return trace


@dataclass
class ScheduleResult:
    state: object
    traces: list[StepTrace]
    scheduler: AttentionScheduler
    logits: list[np.ndarray] = field(default_factory=list)


def run_schedule(
    forward: Callable[[np.ndarray, Callable], np.ndarray],
    unmask: Callable[[object, np.ndarray, int], object],
    mode: ScheduleMode,
    config: SparseDConfig,
    state,
    threads: int = 1,
    chunk_blocks: int = 1,
    dump_attn: bool = False,
    record_masks: bool = False,
    keep_logits: bool = False,
) -> ScheduleResult:
    """Drive ``config.total_steps`` denoising steps.

    ``forward(tokens, attend)`` must route every attention layer through
    ``attend(layer, heads)``; ``unmask(state, logits, step)`` returns the
    next sequence state.
    """
    sched = AttentionScheduler(
        mode,
        config,
        seq_len=len(state.tokens),
        prefill_len=state.prefill_len,
        threads=threads,
        chunk_blocks=chunk_blocks,
        dump_attn=dump_attn,
        record_masks=record_masks,
    )
    traces = []
    kept_logits = []
    for step in range(1, config.total_steps + 1):
        sched.begin_step(step)
        logits = forward(state.tokens, sched.attend)
        traces.append(sched.end_step())
        if keep_logits:
            kept_logits.append(logits)
        state = unmask(state, logits, step)
    return ScheduleResult(state, traces, sched, kept_logits)
