"""Desk-scale benchmarks: attention forward+backward, per-token decoding and SRMSNorm.

Peak memory is what the kernels report through :class:`MemoryTracker`
(materialised intermediates and staging buffers), not the process RSS, so
the numbers are deterministic and comparable across machines.
"""

from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass, field


from . import attention
from .attention import BlockConfig, KernelStats
from .blocks import srmsnorm
from .inference import Decoder
from .model import ModelConfig, init_model
from .numerics import MemoryTracker, make_rng, resolve_dtype

WORKLOADS = ("attn_fwd_bwd", "inference_decode", "srmsnorm")
ATTN_IMPLS = ("reference", "softmax", "lightning", "lightning_tiled")
CSV_HEADER = ["workload", "n", "d", "tile_r", "tile_c", "impl", "median_ms", "peak_bytes",
              "tiles_computed"]


@dataclass
class BenchSpec:
    workload: str = "attn_fwd_bwd"
    ns: list[int] = field(default_factory=lambda: [1024, 2048])
    d: int = 64
    tile: int = 64
    reps: int = 5
    warmup: int = 1
    dtype: str = "float32"
    impls: tuple[str, ...] = ATTN_IMPLS
    threads: int = 1
    mem_limit: int = 2 << 30
    seed: int = 0

    def __post_init__(self) -> None:
        if self.workload not in WORKLOADS:
            raise ValueError(f"unknown workload {self.workload!r}; expected one of {WORKLOADS}")
        if self.reps < 3:
            raise ValueError("reps must be >= 3 so that a median is meaningful")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")
        if not self.ns or min(self.ns) < 1:
            raise ValueError("sequence lengths must be positive")
        bad = set(self.impls) - set(ATTN_IMPLS)
        if bad:
            raise ValueError(f"unknown implementations {sorted(bad)}; expected {ATTN_IMPLS}")
        resolve_dtype(self.dtype)


def _time(fn, reps: int, warmup: int) -> tuple[float, object]:
    result = None
    for _ in range(warmup):
        result = fn()
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        result = fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples) * 1e3, result


def predicted_bytes(impl: str, n: int, d: int, itemsize: int, tile: int = 64) -> int:
    """Rough upper bound of instrumented bytes, used to skip sizes that cannot fit."""
    if impl in ("reference", "softmax"):
        return 4 * n * n * itemsize + 8 * n * d * itemsize
    tile = min(tile, n)
    return (8 * n * d + 8 * (tile * tile + tile * d + d * d)) * itemsize


def attn_fwd_bwd(impl: str, q, k, v, do, decay, cfg: BlockConfig, threads: int = 1):
    """One forward plus backward pass; returns ``(peak_bytes, tiles_computed)``."""
    tracker = MemoryTracker()
    if impl == "reference":
        attention.reference_forward(q, k, v, decay, tracker)
        fwd_peak = tracker.peak
        tracker.reset()
        attention.reference_backward(q, k, v, decay, do, tracker)
        return max(fwd_peak, tracker.peak), 1
    if impl == "softmax":
        _, probs = attention.softmax_forward(q, k, v, tracker)
        attention.softmax_backward(q, k, v, probs, do, tracker)
        return tracker.peak, 1
    stats = KernelStats()
    cfg = BlockConfig(cfg.block_r, cfg.block_c, "tiled" if impl == "lightning_tiled" else "state")
    attention.lightning_forward(q, k, v, decay, cfg, stats=stats, tracker=tracker, threads=threads)
    fwd_peak = tracker.peak
    tracker.reset()
    attention.lightning_backward(q, k, v, decay, do, cfg, stats=stats, tracker=tracker)
    return max(fwd_peak, tracker.peak), stats.tiles_computed


def _row(workload, n, d, tile_r, tile_c, impl, ms, peak, tiles) -> dict:
    return dict(workload=workload, n=n, d=d, tile_r=tile_r, tile_c=tile_c, impl=impl,
                median_ms="oom" if ms is None else f"{ms:.4f}",
                peak_bytes="oom" if peak is None else peak,
                tiles_computed="oom" if tiles is None else tiles)


def bench_attention(spec: BenchSpec, n: int, impl: str, decay: float = 0.999) -> dict:
    # a rate close to 1 keeps every mask entry and product a normal float at n = 8192;
    # subnormal arithmetic would otherwise dominate the quadratic baseline timings
    dtype = resolve_dtype(spec.dtype)
    tile = min(spec.tile, n)
    if impl in ("reference", "softmax"):
        tile_r = tile_c = n
    else:
        tile_r = tile_c = tile
    if predicted_bytes(impl, n, spec.d, dtype.itemsize, spec.tile) > spec.mem_limit:
        return _row("attn_fwd_bwd", n, spec.d, tile_r, tile_c, impl, None, None, None)
    rng = make_rng([spec.seed, n])
    q, k, v, do = (rng.standard_normal((n, spec.d)).astype(dtype) for _ in range(4))
    q *= 0.1
    k *= 0.1
    cfg = BlockConfig(tile, tile)
    try:
        ms, (peak, tiles) = _time(lambda: attn_fwd_bwd(impl, q, k, v, do, decay, cfg, spec.threads),
                                  spec.reps, spec.warmup)
    except MemoryError:
        return _row("attn_fwd_bwd", n, spec.d, tile_r, tile_c, impl, None, None, None)
    return _row("attn_fwd_bwd", n, spec.d, tile_r, tile_c, impl, ms, peak, tiles)


def decode_model_config(d: int, dtype: str) -> ModelConfig:
    heads = max(1, d // 16)
    return ModelConfig(n_layers=2, d_model=d, n_heads=heads, dtype=dtype, seed=0)


def decode_step_times(params, cfg: ModelConfig, positions: list[int], reps: int,
                      dtype=None, seed: int = 0) -> dict[int, tuple[float, int]]:
    """Median per-token step time (ms) and state bytes once ``t`` tokens have been consumed.

    One decoder is driven from position 0 upwards; at each requested
    position ``reps`` further steps are timed individually.
    """
    dec = Decoder(params, cfg, "robust", dtype)
    size = max(positions) + reps * len(positions) + 1
    tokens = make_rng([seed, 9]).integers(0, cfg.vocab_size, size=size)
    result = {}
    for t in sorted(positions):
        while dec.position < t:
            dec.step(int(tokens[dec.position]))
        samples = []
        for _ in range(reps):
            tok = int(tokens[dec.position])
            t0 = time.perf_counter()
            dec.step(tok)
            samples.append(time.perf_counter() - t0)
        result[t] = (statistics.median(samples) * 1e3, dec.state_bytes)
    return result


def bench_decode(spec: BenchSpec) -> list[dict]:
    cfg = decode_model_config(spec.d, "float64" if spec.dtype == "float64" else "float32")
    params = init_model(cfg)
    times = decode_step_times(params, cfg, spec.ns, max(spec.reps, 16), spec.dtype, spec.seed)
    return [_row("inference_decode", n, spec.d, 0, 0, "robust", ms, nbytes, 0)
            for n, (ms, nbytes) in sorted(times.items())]


def bench_srmsnorm(spec: BenchSpec, n: int) -> dict:
    dtype = resolve_dtype(spec.dtype)
    x = make_rng([spec.seed, n]).standard_normal((n, spec.d)).astype(dtype)
    ms, _ = _time(lambda: srmsnorm(x), spec.reps, spec.warmup)
    return _row("srmsnorm", n, spec.d, 0, 0, "srms", ms, x.nbytes, 0)


def run(spec: BenchSpec, progress=None) -> list[dict]:
    rows = []
    if spec.workload == "inference_decode":
        rows = bench_decode(spec)
    for n in spec.ns:
        if spec.workload == "attn_fwd_bwd":
            for impl in spec.impls:
                rows.append(bench_attention(spec, n, impl))
                if progress:
                    progress(rows[-1])
        elif spec.workload == "srmsnorm":
            rows.append(bench_srmsnorm(spec, n))
    return rows


def to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_HEADER, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()
