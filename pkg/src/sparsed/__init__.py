"""Block-sparse attention for iterative masked-diffusion denoisers.

Patterns are selected per head from block-pooled attention scores (prefill
and generation keys ranked separately), captured once after a run of full
attention steps, and reused for the remaining steps.
"""

__version__ = "0.1.0"

from .analysis import flop_ratio_model, output_error, retained_mass, step_similarity
from .attention import (
    FlopCounter,
    HeadInputs,
    block_sparse_attention,
    dense_attention,
    masked_dense_attention,
    multi_head_attention,
)
from .masks import (
    BlockMask,
    density,
    full_mask,
    mask_to_dense_bias,
    sliding_window_mask,
    streaming_mask,
)
from .pattern import (
    PatternCache,
    SparseDConfig,
    build_pattern,
    capture,
    isolated_topk_row,
    joint_selection_variant,
    pooled_scores_chunked,
)
from .scheduler import Phase, ScheduleMode, StepTrace, plan_step, run_schedule
from .toydlm import ToyModelConfig, forward, generate, init_model, unmask_step
