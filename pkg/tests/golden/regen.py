"""Regenerate the golden files. Run only after an intentional format change.

    python tests/golden/regen.py
"""

import shutil
from pathlib import Path

import numpy as np

from sparsed import cli
from sparsed.toydlm import ToyModelConfig, forward, init_model

HERE = Path(__file__).parent

TINY_ARGS = [
    "--layers", "1", "--heads", "2", "--head-dim", "4", "--vocab", "16",
    "--seq-len", "16", "--prefill-len", "8", "--steps", "8",
    "--block-size", "4", "--rho", "0.5", "--skip", "0.25", "--seed", "42",
]


def golden_logits():
    model = init_model(ToyModelConfig(n_layers=2, n_heads=2, head_dim=8, vocab_size=32, max_len=16, seed=42))
    tokens = np.arange(16) % 31
    return forward(tokens, model)


def main():
    np.savetxt(HERE / "logits_seed42_l16.txt", golden_logits(), fmt="%.17e")
    out = HERE / "tiny_run"
    cli.main(["generate", *TINY_ARGS, "--mode", "sparsed", "--dump-attn", "--out-dir", str(out)])
    # timing column is not reproducible; keep the golden with wall_ns zeroed
    lines = (out / "trace.csv").read_text().splitlines()
    rows = [lines[0]] + [",".join(r.split(",")[:4] + ["0"] + r.split(",")[5:]) for r in lines[1:]]
    (out / "trace.csv").write_text("\n".join(rows) + "\n")
    shutil.rmtree(out / "figures")


if __name__ == "__main__":
    main()
