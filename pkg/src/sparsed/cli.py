"""``sparsed`` command line: generate, bench, ablate, sensitivity, replay.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .analysis import step_similarity, write_pgm
from .experiments import (
    ABLATE_HEADER,
    BENCH_HEADER,
    SENSITIVITY_HEADER,
    RunSpec,
    ablate,
    bench,
    sensitivity,
)
from .pattern import SparseDConfig
from .scheduler import ScheduleMode, traces_to_csv
from .toydlm import (
    ToyModelConfig,
    generate,
    init_model,
    read_tokens,
    synthetic_prompt,
    write_tokens,
)

log = logging.getLogger("sparsed")

CLI_MODES = ("dense", "sparsed", "always-sparse", "recompute", "joint", "window", "streaming")
# recorded in the manifest; everything else (threads, out_dir) cannot change outputs
NON_MANIFEST_ARGS = {"threads", "out_dir", "func", "verbose"}


class UsageError(Exception):
    pass


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _words(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def _add_common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--layers", type=int, default=2)
    g.add_argument("--heads", type=int, default=4)
    g.add_argument("--head-dim", type=int, default=16)
    g.add_argument("--vocab", type=int, default=64)
    g.add_argument("--max-len", type=int, default=0, help="position table size (0: sequence length)")
    g.add_argument("--model-config", default=None, help="key=value model config file")
    g = p.add_argument_group("sparsity")
    g.add_argument("--rho", type=float, default=0.5)
    g.add_argument("--skip", type=float, default=0.2)
    g.add_argument("--block-size", type=int, default=32)
    g.add_argument("--steps", type=int, default=32)
    g.add_argument("--window-size", type=int, default=64)
    g.add_argument("--sink-fraction", type=float, default=0.1)
    g.add_argument("--chunk-blocks", type=int, default=1)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out-dir", default="out")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_sequence(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seq-len", type=int, default=128)
    p.add_argument("--prefill-len", type=int, default=None, help="default: half the sequence")
    p.add_argument("--prompt-file", default=None, help="whitespace-separated token ids")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparsed", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"sparsed {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="run one denoising generation")
    _add_common(p)
    _add_sequence(p)
    p.add_argument("--mode", choices=CLI_MODES, default="sparsed")
    p.add_argument("--dump-attn", action="store_true", help="write per-step attention maps")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("bench", help="per-step latency and FLOPs against dense")
    _add_common(p)
    p.add_argument("--seq-lens", type=_ints, default=[256, 512])
    p.add_argument("--prefill-frac", type=float, default=0.5)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--modes", type=_words, default=["dense", "sparsed"])
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="sweep skip or rho against a dense reference")
    _add_common(p)
    _add_sequence(p)
    p.add_argument("--sweep", choices=("skip", "rho"), required=True)
    p.add_argument("--values", type=_floats, required=True)
    p.add_argument("--mode", choices=("sparsed", "joint", "recompute", "always-sparse"), default="sparsed")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sensitivity", help="full->sparse / sparse->full switch-step sweep")
    _add_common(p)
    _add_sequence(p)
    p.add_argument("--points", type=_ints, default=None, help="switch steps (default: 0..T in 8 points)")
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("replay", help="re-run a command from its manifest")
    p.add_argument("manifest")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_replay)
    return parser


# ---------------------------------------------------------------- helpers


def _model_config(args, seq_len: int) -> ToyModelConfig:
    try:
        return _build_model_config(args, seq_len)
    except (ValueError, OSError) as e:
        raise UsageError(f"model config: {e}") from e


def _build_model_config(args, seq_len: int) -> ToyModelConfig:
    if args.model_config:
        return ToyModelConfig.from_text(Path(args.model_config).read_text())
    return ToyModelConfig(
        n_layers=args.layers,
        n_heads=args.heads,
        head_dim=args.head_dim,
        vocab_size=args.vocab,
        max_len=args.max_len or seq_len,
        seed=args.seed,
    )


def _sparse_config(args) -> SparseDConfig:
    return SparseDConfig(
        rho=args.rho, skip=args.skip, block_size=args.block_size, total_steps=args.steps
    )


def _mode(args, kind: str) -> ScheduleMode:
    return ScheduleMode(
        kind,
        window_size=args.window_size if kind in ("window", "streaming") else None,
        sink_fraction=args.sink_fraction if kind == "streaming" else None,
    )


def _prompt(args, model_cfg: ToyModelConfig, seq_len: int):
    if args.prompt_file:
        prompt = read_tokens(args.prompt_file)
        if args.prefill_len is not None and args.prefill_len != len(prompt):
            raise UsageError("--prefill-len disagrees with the prompt file length")
        if (prompt < 0).any() or (prompt >= model_cfg.mask_token).any():
            raise UsageError("prompt file has token ids outside the vocabulary")
    else:
        p = seq_len // 2 if args.prefill_len is None else args.prefill_len
        if not 0 <= p < seq_len:
            raise UsageError("--prefill-len must lie in [0, seq-len)")
        prompt = synthetic_prompt(p, model_cfg.vocab_size, args.seed)
    if len(prompt) >= seq_len:
        raise UsageError("prompt leaves no generation positions")
    return prompt


def _validate(args, kinds) -> tuple[SparseDConfig, list[ScheduleMode]]:
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    if args.chunk_blocks < 1:
        raise UsageError("--chunk-blocks must be >= 1")
    try:
        cfg = _sparse_config(args)
        modes = [_mode(args, k) for k in kinds]
    except ValueError as e:
        raise UsageError(str(e)) from e
    if any(m.kind in ("window", "streaming") for m in modes) and args.window_size < args.block_size:
        raise UsageError("--window-size must be at least --block-size")
    return cfg, modes


def _write_csv(path: Path, header, rows) -> None:
    out = io.StringIO()
    w = csv.DictWriter(out, fieldnames=header, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    path.write_text(out.getvalue())


def _manifest_args(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in NON_MANIFEST_ARGS}


def write_manifest(out_dir: Path, args, emitted, warnings=()) -> Path:
    lines = ["tool=sparsed", f"version={__version__}", f"command={args.command}"]
    for key, val in _manifest_args(args).items():
        if key == "command":
            continue
        lines.append(f"arg.{key}={json.dumps(val)}")
    for w in warnings:
        lines.append(f"warning={w}")
    files = sorted(str(p) for p in emitted) + ["manifest.txt"]
    lines.append("files=" + ",".join(sorted(files)))
    path = out_dir / "manifest.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def read_manifest(path) -> tuple[str, dict]:
    command = None
    values = {}
    for line in Path(path).read_text().splitlines():
        key, _, val = line.partition("=")
        if key == "command":
            command = val
        elif key.startswith("arg."):
            values[key[4:]] = json.loads(val)
    if command is None:
        raise UsageError(f"{path} has no command entry")
    return command, values


# ---------------------------------------------------------------- commands


def cmd_generate(args) -> list[str]:
    cfg, (mode,) = _validate(args, [args.mode])
    model_cfg = _model_config(args, args.seq_len)
    prompt = _prompt(args, model_cfg, args.seq_len)
    gen_len = args.seq_len - len(prompt)
    model = init_model(model_cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    res = generate(
        prompt, gen_len, model, mode, cfg,
        threads=args.threads, dump_attn=args.dump_attn, chunk_blocks=args.chunk_blocks,
    )
    emitted = ["tokens.txt", "trace.csv"]
    write_tokens(out / "tokens.txt", res.tokens)
    (out / "trace.csv").write_text(traces_to_csv(res.traces))

    if res.cache.is_captured:
        (out / "masks").mkdir(exist_ok=True)
        for (layer, head), m in res.cache.items():
            name = f"masks/L{layer}_H{head}.csv"
            m.save_csv(out / name)
            emitted.append(name)
        from .plotting import mask_grid

        mask_grid(res.cache.items(), out / "figures" / "masks.png")
        emitted.append("figures/masks.png")

    if args.dump_attn:
        emitted += _emit_attention(out, res, model_cfg, len(prompt))
    return emitted


def _emit_attention(out: Path, res, model_cfg: ToyModelConfig, prefill_len: int) -> list[str]:
    from .plotting import attention_grid, similarity_grid

    emitted = []
    dumps = res.attn_dumps
    (out / "attn").mkdir(exist_ok=True)
    (out / "similarity").mkdir(exist_ok=True)
    for step in sorted(dumps):
        for (layer, head), a in sorted(dumps[step].items()):
            name = f"attn/step{step:03d}_L{layer}_H{head}.pgm"
            write_pgm(out / name, a, boundary_col=prefill_len)
            emitted.append(name)
    reports = []
    if len(dumps) >= 2:
        for layer in range(model_cfg.n_layers):
            for head in range(model_cfg.n_heads):
                rep = step_similarity(dumps, layer, head)
                reports.append(rep)
                base = f"similarity/L{layer}_H{head}"
                (out / f"{base}.csv").write_text(rep.to_csv())
                write_pgm(out / f"{base}.pgm", rep.matrix)
                emitted += [f"{base}.csv", f"{base}.pgm"]
        similarity_grid(reports, out / "figures" / "similarity.png")
        emitted.append("figures/similarity.png")
    steps = sorted(dumps)
    picks = sorted({steps[0], steps[len(steps) // 3], steps[2 * len(steps) // 3], steps[-1]})
    for layer in range(model_cfg.n_layers):
        name = f"figures/attention_L{layer}.png"
        attention_grid(dumps, picks, layer, range(model_cfg.n_heads), prefill_len, out / name)
        emitted.append(name)
    return emitted


def cmd_bench(args) -> tuple[list[str], list[str]]:
    for k in args.modes:
        if k not in CLI_MODES:
            raise UsageError(f"unknown mode {k!r}")
    if not args.seq_lens:
        raise UsageError("--seq-lens is empty")
    if args.repeats < 1:
        raise UsageError("--repeats must be >= 1")
    if not 0.0 <= args.prefill_frac < 1.0:
        raise UsageError("--prefill-frac must lie in [0, 1)")
    cfg, modes = _validate(args, args.modes)
    warnings = []
    if args.repeats < 3:
        warnings.append(f"repeats={args.repeats} < 3; timing spread is unreliable")
        log.warning(warnings[-1])
    model_cfg = _model_config(args, max(args.seq_lens))
    model = init_model(model_cfg)
    specs = {}
    for l in args.seq_lens:
        p = int(l * args.prefill_frac)
        prompt = synthetic_prompt(p, model_cfg.vocab_size, args.seed)
        specs[l] = RunSpec(model, prompt, l - p, cfg, args.threads)
    rows = bench(specs, modes, args.repeats)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "bench.csv", BENCH_HEADER, rows)
    from .plotting import bench_plot

    bench_plot(rows, out / "figures" / "bench.png")
    return ["bench.csv", "figures/bench.png"], warnings


def cmd_ablate(args) -> list[str]:
    if not args.values:
        raise UsageError("empty sweep list")
    cfg, (mode,) = _validate(args, [args.mode])
    for v in args.values:
        try:
            SparseDConfig(**{**cfg.__dict__, args.sweep: v})
        except ValueError as e:
            raise UsageError(f"--values {v}: {e}") from e
    model_cfg = _model_config(args, args.seq_len)
    prompt = _prompt(args, model_cfg, args.seq_len)
    spec = RunSpec(init_model(model_cfg), prompt, args.seq_len - len(prompt), cfg, args.threads)
    rows = ablate(spec, args.sweep, args.values, mode)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "ablation.csv", ABLATE_HEADER, rows)
    from .plotting import ablation_plot

    ablation_plot(rows, out / "figures" / "ablation.png")
    return ["ablation.csv", "figures/ablation.png"]


def cmd_sensitivity(args) -> list[str]:
    cfg, _ = _validate(args, [])
    T = cfg.total_steps
    points = args.points
    if points is None:
        points = sorted({round(i * T / 7) for i in range(8)})
    if not points or min(points) < 0 or max(points) > T:
        raise UsageError("--points must lie in [0, steps]")
    model_cfg = _model_config(args, args.seq_len)
    prompt = _prompt(args, model_cfg, args.seq_len)
    spec = RunSpec(init_model(model_cfg), prompt, args.seq_len - len(prompt), cfg, args.threads)
    rows = sensitivity(spec, points)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "sensitivity.csv", SENSITIVITY_HEADER, rows)
    from .plotting import sensitivity_plot

    sensitivity_plot(rows, out / "figures" / "sensitivity.png")
    return ["sensitivity.csv", "figures/sensitivity.png"]


def cmd_replay(args):
    command, values = read_manifest(args.manifest)
    parser = build_parser()
    defaults = parser.parse_args([command] + _required_stub(command))
    for key, val in values.items():
        if not hasattr(defaults, key):
            raise UsageError(f"manifest argument {key!r} is not known to {command}")
        setattr(defaults, key, val)
    defaults.out_dir = args.out_dir
    defaults.threads = args.threads
    return _dispatch(defaults)


def _required_stub(command: str) -> list[str]:
    # placeholders for required flags; overwritten from the manifest
    return ["--sweep", "rho", "--values", "1"] if command == "ablate" else []


def _dispatch(args):
    result = args.func(args)
    if args.command == "replay":
        return result
    emitted, warnings = result if isinstance(result, tuple) else (result, [])
    write_manifest(Path(args.out_dir), args, emitted, warnings)
    return emitted


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        _dispatch(args)
    except UsageError as e:
        print(f"sparsed: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"sparsed: runtime error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
