"""Command-line entry point: ``tnllm {verify,bench,train,decode}``.

Exit codes: 0 success, 1 a check/run failed, 2 bad usage or bad input.
``TNLLM_SEED`` overrides the default seed of every subcommand.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import bench, verify
from .inference import ALGORITHMS, decode
from .model import (ByteTokenizer, CheckpointError, ModelConfig, OptimConfig, TrainingDivergence,
                    TrainState, init_model, load_checkpoint, preset, save_checkpoint, train)

SEED_ENV = "TNLLM_SEED"


class UsageError(Exception):
    """Bad arguments or unusable input files; mapped to exit code 2."""


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV}={raw!r} is not an integer") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

def cmd_verify(args, out) -> int:
    names = verify.SUITES if args.suite == "all" else (args.suite,)
    checks = verify.run_suites(names, args.seed)
    for line in verify.report(checks):
        print(line, file=out)
    return 0 if all(c.passed for c in checks) else 1


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def cmd_bench(args, out) -> int:
    try:
        spec = bench.BenchSpec(workload=args.workload, ns=args.n, d=args.d, tile=args.tile,
                               reps=args.reps, warmup=args.warmup, dtype=args.dtype,
                               impls=tuple(args.impl), threads=args.threads,
                               mem_limit=args.mem_limit, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    with threadpool_limits(limits=args.threads):
        rows = bench.run(spec)
    text = bench.to_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    out.write(text)
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

TRAIN_KEYS = {"preset", "model", "optim", "batch_size", "seq_len", "data_seed"}


def load_run_config(path: str | None, seed: int) -> tuple[ModelConfig, OptimConfig, dict]:
    """Read a UTF-8 JSON run description.

    Keys: ``preset`` (name, default ``toy``), ``model`` (overrides of
    :class:`ModelConfig`), ``optim`` (:class:`OptimConfig` fields),
    ``batch_size``, ``seq_len`` and ``data_seed``.
    """
    data = {}
    if path:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise UsageError(f"config {path} must hold a JSON object")
    unknown = set(data) - TRAIN_KEYS
    if unknown:
        raise UsageError(f"unknown config keys {sorted(unknown)}; allowed {sorted(TRAIN_KEYS)}")
    try:
        cfg = preset(data.get("preset", "toy"), **{"seed": seed, **data.get("model", {})})
        opt = OptimConfig.from_dict(data.get("optim", {}))
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"bad config: {exc}") from None
    run = {"batch_size": int(data.get("batch_size", 8)), "seq_len": int(data.get("seq_len", 64)),
           "data_seed": int(data.get("data_seed", cfg.seed))}
    if run["batch_size"] < 1 or run["seq_len"] < 1:
        raise UsageError("batch_size and seq_len must be positive")
    return cfg, opt, run


def read_corpus(path: str) -> np.ndarray:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise UsageError(f"cannot read corpus {path}: {exc}") from None
    if not text:
        raise UsageError(f"corpus {path} is empty")
    return np.asarray(ByteTokenizer().encode(text), dtype=np.int64)


def cmd_train(args, out) -> int:
    data = read_corpus(args.corpus)
    if args.steps < 0:
        raise UsageError("--steps must be >= 0")
    if args.resume:
        try:
            ckpt = load_checkpoint(args.resume)
        except (OSError, CheckpointError, ValueError) as exc:
            raise UsageError(f"cannot resume from {args.resume}: {exc}") from None
        cfg = ckpt.config
        try:
            opt = OptimConfig.from_dict(ckpt.meta["optim"])
            run = {k: ckpt.meta[k] for k in ("batch_size", "seq_len", "data_seed")}
        except (KeyError, TypeError, ValueError) as exc:
            raise UsageError(f"{args.resume} lacks training metadata: {exc}") from None
        state = ckpt.state or TrainState.create(ckpt.params)
    else:
        cfg, opt, run = load_run_config(args.config, args.seed)
        state = TrainState.create(init_model(cfg))

    log_rows = []

    def record(step, loss):
        log_rows.append((step, f"{loss:.10g}", f"{opt.lr_at(step - 1):.6g}"))
        if args.verbose:
            print(f"step {step} loss {loss:.4f}", file=out)

    try:
        train(state, cfg, opt, data, args.steps, run["batch_size"], run["seq_len"],
              run["data_seed"], record)
    except TrainingDivergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        if args.log:
            fresh = not (args.resume and Path(args.log).exists())
            with open(args.log, "w" if fresh else "a", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                if fresh:
                    writer.writerow(["step", "loss", "lr"])
                writer.writerows(log_rows)
    meta = {"optim": vars(opt), **run}
    save_checkpoint(args.out, cfg, state.params, state, meta)
    last = f"{state.losses[-1]:.6f}" if state.losses else "nan"
    print(f"trained steps={state.step} final_loss={last} checkpoint={args.out}", file=out)
    return 0


# ---------------------------------------------------------------------------
# decode
# ---------------------------------------------------------------------------

def cmd_decode(args, out) -> int:
    try:
        ckpt = load_checkpoint(args.checkpoint)
    except (OSError, CheckpointError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot load checkpoint {args.checkpoint}: {exc}") from None
    tok = ByteTokenizer()
    prompt = tok.encode(args.prompt)
    if args.steps < 0:
        raise UsageError("--steps must be >= 0")
    if args.steps and not prompt:
        raise UsageError("decoding needs a non-empty --prompt")
    if args.lambda_floor is not None and not 0 < args.lambda_floor <= 1:
        raise UsageError("--lambda-floor must lie in (0, 1]")
    try:
        res = decode(ckpt.params, ckpt.config, prompt, args.steps, args.sampler, args.temperature,
                     args.seed, args.algorithm, args.lambda_floor, args.dtype, return_details=True)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(tok.decode(res.tokens), file=out)
    if args.algorithm == "origin" or res.first_nonfinite is not None:
        pos = "none" if res.first_nonfinite is None else res.first_nonfinite
        print(f"first_nonfinite={pos}", file=out)
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tnllm", description="Linear-attention engine tools.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run self-check suites")
    p.add_argument("--suite", choices=verify.SUITES + ("all",), default="all")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="benchmark kernels and write CSV")
    p.add_argument("--workload", choices=bench.WORKLOADS, default="attn_fwd_bwd")
    p.add_argument("--n", type=_int_list, default=[512, 1024, 2048],
                   help="comma-separated sequence lengths (decode: token positions)")
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--tile", type=int, default=64)
    p.add_argument("--impl", nargs="+", choices=bench.ATTN_IMPLS, default=list(bench.ATTN_IMPLS))
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--mem-limit", type=int, default=2 << 30,
                   help="rows predicted to need more instrumented bytes are marked oom")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", help="also write the CSV to this file")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("train", help="train a byte-level model")
    p.add_argument("--config", help="JSON run description")
    p.add_argument("--corpus", required=True)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="per-step loss CSV")
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="generate text from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", default="")
    p.add_argument("--steps", type=int, default=64)
    p.add_argument("--sampler", choices=("greedy", "temperature"), default="greedy")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--algorithm", choices=ALGORITHMS, default="robust")
    p.add_argument("--lambda-floor", type=float, default=None)
    p.add_argument("--dtype", choices=("float32", "float64"), default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_decode)
    return parser


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.seed is None:
            args.seed = default_seed()
        return args.func(args, out)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
