"""Single-process simulation of tensor model parallelism for the two mixers.

Workers are simulated one after another (or on a thread pool) in one
process.  The only communication is an explicit all-reduce that sums
per-worker partial results in worker order and is logged in a
:class:`CollectiveLedger`.

SGLU: ``W_v`` and ``W_u`` are split by columns, ``W_o`` by rows, so each
worker produces a full-size partial output and one all-reduce finishes the
forward pass.  GLA: the query/key/value/gate projections are split by
columns in whole-head groups (stored fused as one ``d x 4d/W`` matrix per
worker), each worker runs its own heads with their own decay rates and
rotation angles, and the row-split ``W_o`` again needs one all-reduce.
In the backward pass the replicated input needs its gradient summed across
workers, which is the single backward all-reduce.
"""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention import BlockConfig
from .blocks import GlaParams, SgluParams, gla_bwd, gla_fwd, sglu_bwd, sglu_fwd

AXES = ("column", "row", "replicate")


@dataclass(frozen=True)
class ShardPlan:
    world_size: int
    axes: dict[str, str]

    def __post_init__(self) -> None:
        if self.world_size < 1:
            raise ValueError("world_size must be >= 1")
        bad = {k: a for k, a in self.axes.items() if a not in AXES}
        if bad:
            raise ValueError(f"unknown split axes {bad}; expected one of {AXES}")

    @classmethod
    def sglu(cls, world_size: int) -> "ShardPlan":
        return cls(world_size, {"w_v": "column", "w_u": "column", "w_o": "row"})

    @classmethod
    def gla(cls, world_size: int) -> "ShardPlan":
        # theta rows are heads, so a row split hands each worker its own heads
        return cls(world_size, {"w_q": "column", "w_k": "column", "w_v": "column",
                                "w_u": "column", "w_o": "row", "theta": "row"})


class CollectiveLedger:
    """Counts simulated collectives per pass.

    ``bytes`` is the traffic of a ring all-reduce, ``2 (W - 1)`` times the
    payload size summed over all workers (zero for a single worker).
    """

    def __init__(self) -> None:
        self._counts: dict[tuple[str, str], list[int]] = defaultdict(lambda: [0, 0])

    def reset(self) -> None:
        self._counts.clear()

    def all_reduce(self, partials: list[np.ndarray], phase: str) -> np.ndarray:
        if not partials:
            raise ValueError("all_reduce needs at least one partial")
        total = partials[0].copy()
        for part in partials[1:]:
            total += part
        entry = self._counts[(phase, "all_reduce")]
        entry[0] += 1
        entry[1] += 2 * (len(partials) - 1) * partials[0].nbytes
        return total

    def count(self, phase: str | None = None, kind: str = "all_reduce") -> int:
        return sum(c for (p, k), (c, _) in self._counts.items()
                   if k == kind and (phase is None or p == phase))

    def bytes(self, phase: str | None = None) -> int:
        return sum(b for (p, _), (_, b) in self._counts.items() if phase is None or p == phase)

    @property
    def all_reduce_count(self) -> int:
        return self.count()

    def rows(self) -> list[tuple[str, str, int, int]]:
        return [(p, k, c, b) for (p, k), (c, b) in sorted(self._counts.items())]

    def to_csv(self, target: str | Path | None = None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["pass", "collective_type", "count", "bytes"])
        writer.writerows(self.rows())
        text = buf.getvalue()
        if target is not None:
            Path(target).write_text(text)
        return text


def _split(arr: np.ndarray, axis: str, world: int, name: str) -> list[np.ndarray]:
    # a shared (1-D) theta belongs to every head, so every worker keeps a copy
    if axis == "replicate" or (name == "theta" and arr.ndim == 1):
        return [arr] * world
    dim = 1 if axis == "column" else 0
    if arr.shape[dim] % world:
        raise ValueError(f"{name}: dimension {arr.shape[dim]} along {axis} axis is not "
                         f"divisible by world size {world}")
    return [np.ascontiguousarray(a) for a in np.split(arr, world, axis=dim)]


@dataclass
class GlaShard:
    """One worker's slice of a GLA layer, projections fused as ``[q | k | v | u]``."""

    qkvu: np.ndarray
    params: GlaParams
    heads: slice


def shard_weights(params, plan: ShardPlan):
    """Split SGLU or GLA parameters into ``plan.world_size`` worker shards."""
    world = plan.world_size
    if isinstance(params, SgluParams):
        parts = {k: _split(getattr(params, k), plan.axes.get(k, "replicate"), world, k)
                 for k in ("w_v", "w_u", "w_o")}
        return [SgluParams(parts["w_v"][w], parts["w_u"][w], parts["w_o"][w], params.activation)
                for w in range(world)]
    if isinstance(params, GlaParams):
        if params.num_heads % world:
            raise ValueError(f"{params.num_heads} heads cannot be divided among {world} workers")
        if world > 1 and params.norm_mode != "per_head":
            raise ValueError("merged-width normalisation is not computable per worker; "
                             "use norm_mode='per_head' when sharding GLA")
        names = ["w_q", "w_k", "w_v"] + (["w_u"] if params.use_gate else [])
        cols = {k: _split(getattr(params, k), plan.axes.get(k, "replicate"), world, k)
                for k in names}
        w_o = _split(params.w_o, plan.axes.get("w_o", "replicate"), world, "w_o")
        theta = _split(params.theta, plan.axes.get("theta", "replicate"), world, "theta")
        hpw = params.num_heads // world
        shards = []
        for w in range(world):
            fused = np.concatenate([cols[k][w] for k in names], axis=1)
            width = fused.shape[1] // len(names)
            views = {k: fused[:, i * width:(i + 1) * width] for i, k in enumerate(names)}
            heads = slice(w * hpw, (w + 1) * hpw)
            gp = GlaParams(w_q=views["w_q"], w_k=views["w_k"], w_v=views["w_v"],
                           w_u=views.get("w_u"), w_o=w_o[w], theta=theta[w],
                           decay=params.decay[heads], num_heads=hpw,
                           activation=params.activation, norm_mode=params.norm_mode,
                           eps=params.eps)
            shards.append(GlaShard(fused, gp, heads))
        return shards
    raise TypeError(f"cannot shard {type(params).__name__}")


def unshard(shards, plan: ShardPlan) -> dict[str, np.ndarray]:
    """Reassemble full matrices from worker shards (inverse of :func:`shard_weights`)."""
    if isinstance(shards[0], GlaShard):
        arrays = [s.params.arrays() for s in shards]
    else:
        arrays = [s.arrays() for s in shards]
    out = {}
    for name in arrays[0]:
        axis = plan.axes.get(name, "replicate")
        if axis == "replicate" or arrays[0][name].ndim == 1:
            out[name] = arrays[0][name]
        else:
            out[name] = np.concatenate([a[name] for a in arrays], axis=1 if axis == "column" else 0)
    return out


def gather_grads(grads: list[dict[str, np.ndarray]], plan: ShardPlan) -> dict[str, np.ndarray]:
    """Combine per-worker parameter gradients into full-size gradients.

    Split tensors are concatenated; replicated tensors get their per-worker
    contributions summed.
    """
    out = {}
    for name in grads[0]:
        axis = plan.axes.get(name, "replicate")
        parts = [g[name] for g in grads]
        if axis == "replicate" or parts[0].ndim == 1:
            out[name] = np.sum(parts, axis=0)
        else:
            out[name] = np.concatenate(parts, axis=1 if axis == "column" else 0)
    return out


def worker_param_bytes(shards) -> list[int]:
    """Bytes of split parameter matrices held by each worker."""
    sizes = []
    for s in shards:
        if isinstance(s, GlaShard):
            sizes.append(s.qkvu.nbytes + s.params.w_o.nbytes)
        else:
            sizes.append(s.w_v.nbytes + s.w_u.nbytes + s.w_o.nbytes)
    return sizes


def _run(fn, items, threads: bool):
    if threads and len(items) > 1:
        with ThreadPoolExecutor(max_workers=len(items)) as pool:
            return list(pool.map(fn, items))
    return [fn(it) for it in items]


@dataclass
class ParallelCache:
    caches: list = field(default_factory=list)
    kind: str = ""


def sglu_parallel_fwd(x: np.ndarray, shards: list[SgluParams], ledger: CollectiveLedger,
                      threads: bool = False):
    results = _run(lambda s: sglu_fwd(x, s), shards, threads)
    out = ledger.all_reduce([r[0] for r in results], "forward")
    return out, ParallelCache([r[1] for r in results], "sglu")


def sglu_parallel_forward(x, shards, ledger, threads: bool = False) -> np.ndarray:
    return sglu_parallel_fwd(x, shards, ledger, threads)[0]


def gla_parallel_fwd(x: np.ndarray, shards: list[GlaShard], ledger: CollectiveLedger,
                     mode: str = "lightning", block: BlockConfig | None = None,
                     threads: bool = False):
    results = _run(lambda s: gla_fwd(x, s.params, mode, block), shards, threads)
    out = ledger.all_reduce([r[0] for r in results], "forward")
    return out, ParallelCache([r[1] for r in results], "gla")


def gla_parallel_forward(x, shards, ledger, mode: str = "lightning",
                         block: BlockConfig | None = None, threads: bool = False) -> np.ndarray:
    return gla_parallel_fwd(x, shards, ledger, mode, block, threads)[0]


def parallel_backward(dout: np.ndarray, cache: ParallelCache, ledger: CollectiveLedger,
                      threads: bool = False) -> tuple[np.ndarray, list[dict[str, np.ndarray]]]:
    """Per-worker backward plus one all-reduce of the input gradient.

    Returns the summed input gradient and each worker's local parameter
    gradients.
    """
    bwd = sglu_bwd if cache.kind == "sglu" else gla_bwd
    results = _run(lambda c: bwd(dout, c), cache.caches, threads)
    dx = ledger.all_reduce([r[0] for r in results], "backward")
    return dx, [r[1] for r in results]
