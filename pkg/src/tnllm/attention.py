"""Causal linear attention with exponential decay.

Every function here computes ``O = (Q K^T * M) V`` where ``M`` is the
decay-causal mask ``M[s, t] = lam**(s - t)`` for ``s >= t`` (zero above the
diagonal).  Inputs have shape ``(..., n, d)``; ``decay`` is a scalar or an
array that broadcasts against the leading axes (one rate per head).

Three evaluation strategies are provided:

* :func:`reference_forward` materialises the full ``n x n`` mask and score
  matrix.  It is the oracle for everything else.
* :func:`lightning_forward` / :func:`lightning_backward` walk the problem in
  ``B_r x B_c`` tiles, staging operands into small reusable scratch buffers
  and generating mask tiles on the fly.  With ``schedule="tiled"`` every tile
  on or below the diagonal is visited.  With ``schedule="state"`` (default)
  only the diagonal tiles are visited; tiles strictly below the diagonal are
  folded into a running ``d x d`` state, using ``lam**(s-t) = lam**(s-r0) *
  lam**(r0-t)``.  All exponents stay non-negative so nothing overflows.
* :func:`right_product_forward` is the unmasked ``Q (K^T V)`` form.
"""

from __future__ import annotations

import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .numerics import NULL_TRACKER, MemoryTracker, ShapeError
from .positional import build_decay_mask, check_decay, decay_tile

SCHEDULES = ("state", "tiled")


@dataclass(frozen=True)
class BlockConfig:
    block_r: int = 64
    block_c: int = 64
    schedule: str = "state"
    skip_upper: bool = True

    def __post_init__(self) -> None:
        if self.block_r < 1 or self.block_c < 1:
            raise ValueError(f"tile sizes must be >= 1, got B_r={self.block_r}, B_c={self.block_c}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}; expected one of {SCHEDULES}")

    def sizes(self, n: int) -> tuple[int, int]:
        return min(self.block_r, n), min(self.block_c, n)


class AttentionGrads(NamedTuple):
    dq: np.ndarray
    dk: np.ndarray
    dv: np.ndarray


@dataclass
class KernelStats:
    """Per-call instrumentation for the blocked kernels."""

    tiles_computed: int = 0
    state_updates: int = 0
    bytes_staged: int = 0
    scratch_bytes: int = 0
    peak_scratch_bytes: int = 0

    def __post_init__(self) -> None:
        self._lock = threading.Lock()

    def add(self, **counts: int) -> None:
        with self._lock:
            for key, val in counts.items():
                setattr(self, key, getattr(self, key) + val)
            self.peak_scratch_bytes = max(self.peak_scratch_bytes, self.scratch_bytes)

    def as_dict(self) -> dict[str, int]:
        return {k: v for k, v in asdict(self).items() if not k.startswith("_")}


_last = KernelStats()


def last_stats() -> KernelStats:
    """Counters of the most recent blocked-kernel call made without an explicit ``stats``."""
    return _last


def _fresh_stats(stats: KernelStats | None) -> KernelStats:
    global _last
    if stats is None:
        _last = KernelStats()
        return _last
    return stats


def _check_inputs(q, k, v, decay):
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    if q.ndim < 2 or q.shape != k.shape or q.shape[:-1] != v.shape[:-1]:
        raise ShapeError(f"attention inputs disagree: Q{q.shape} K{k.shape} V{v.shape}")
    lam = check_decay(decay)
    try:
        np.broadcast_shapes(lam.shape, q.shape[:-2])
    except ValueError:
        raise ShapeError(f"decay shape {lam.shape} does not broadcast against {q.shape[:-2]}") from None
    return q, k, v, lam


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def _row_weights(start: int, stop: int, log_lam: np.ndarray, dtype, reverse_from: int | None = None):
    """``lam ** e`` for consecutive exponents, shaped ``lam.shape + (rows, 1)``."""
    e = np.arange(start, stop, dtype=np.float64)
    if reverse_from is not None:
        e = reverse_from - e
    return np.exp(e * log_lam[..., None])[..., None].astype(dtype)


# ---------------------------------------------------------------------------
# Reference paths
# ---------------------------------------------------------------------------

def reference_forward(q, k, v, decay, tracker: MemoryTracker = NULL_TRACKER) -> np.ndarray:
    """Left-product form with the full mask materialised."""
    q, k, v, lam = _check_inputs(q, k, v, decay)
    n = q.shape[-2]
    mask = tracker.track(build_decay_mask(n, lam, dtype=q.dtype))
    scores = tracker.track(q @ _swap(k))
    scores *= mask
    out = tracker.track(scores @ v)
    tracker.free(mask.nbytes + scores.nbytes)
    return out


def reference_backward(q, k, v, decay, do, tracker: MemoryTracker = NULL_TRACKER) -> AttentionGrads:
    """Unblocked analytic gradients of ``(Q K^T * M) V``."""
    q, k, v, lam = _check_inputs(q, k, v, decay)
    do = np.asarray(do)
    if do.shape != v.shape:
        raise ShapeError(f"dO shape {do.shape} does not match output shape {v.shape}")
    mask = tracker.track(build_decay_mask(q.shape[-2], lam, dtype=q.dtype))
    a = tracker.track(q @ _swap(k))
    a *= mask
    dv = tracker.track(_swap(a) @ do)
    tracker.free(a.nbytes)
    da = tracker.track(do @ _swap(v))
    da *= mask
    dq = tracker.track(da @ k)
    dk = tracker.track(_swap(da) @ q)
    tracker.free(da.nbytes + mask.nbytes)
    return AttentionGrads(dq, dk, dv)


def right_product_forward(q, k, v) -> np.ndarray:
    """Unmasked linear attention ``Q (K^T V)``; O(n d^2)."""
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    if q.shape != k.shape or q.shape[:-1] != v.shape[:-1]:
        raise ShapeError(f"attention inputs disagree: Q{q.shape} K{k.shape} V{v.shape}")
    return q @ (_swap(k) @ v)


def softmax_forward(q, k, v, tracker: MemoryTracker = NULL_TRACKER):
    """Causal softmax attention, used only as a benchmark competitor.

    Returns ``(out, probs)``; ``probs`` is needed by :func:`softmax_backward`.
    """
    n, d = q.shape[-2:]
    scores = tracker.track(q @ _swap(k))
    scores *= 1.0 / math.sqrt(d)
    idx = np.arange(n)
    np.copyto(scores, -np.inf, where=idx[None, :] > idx[:, None])
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    out = tracker.track(scores @ v)
    return out, scores


def softmax_backward(q, k, v, probs, do, tracker: MemoryTracker = NULL_TRACKER) -> AttentionGrads:
    d = q.shape[-1]
    dv = tracker.track(_swap(probs) @ do)
    dp = tracker.track(do @ _swap(v))
    ds = probs * (dp - (dp * probs).sum(axis=-1, keepdims=True))
    tracker.alloc(ds.nbytes)
    ds *= 1.0 / math.sqrt(d)
    dq = tracker.track(ds @ k)
    dk = tracker.track(_swap(ds) @ q)
    return AttentionGrads(dq, dk, dv)


# ---------------------------------------------------------------------------
# Blocked kernels
# ---------------------------------------------------------------------------

class _Scratch:
    """Reusable tile buffers standing in for fast on-chip memory."""

    def __init__(self, shapes: dict[str, tuple[int, ...]], dtype, stats: KernelStats,
                 tracker: MemoryTracker):
        self.bufs = {name: np.empty(shape, dtype=dtype) for name, shape in shapes.items()}
        self.nbytes = sum(b.nbytes for b in self.bufs.values())
        self.stats = stats
        self.tracker = tracker
        stats.add(scratch_bytes=self.nbytes)
        tracker.alloc(self.nbytes)

    def stage(self, name: str, src: np.ndarray) -> np.ndarray:
        rows = src.shape[-2]
        view = self.bufs[name][..., :rows, :]
        np.copyto(view, src)
        self.stats.add(bytes_staged=src.nbytes)
        return view

    def view(self, name: str, rows: int, cols: int | None = None) -> np.ndarray:
        buf = self.bufs[name]
        return buf[..., :rows, :] if cols is None else buf[..., :rows, :cols]

    def release(self) -> None:
        self.stats.add(scratch_bytes=-self.nbytes)
        self.tracker.free(self.nbytes)


def _mask_tile(scratch: _Scratch, r0: int, rows: int, c0: int, cols: int, log_lam) -> np.ndarray:
    return decay_tile(r0, rows, c0, cols, log_lam, out=scratch.view("m", rows, cols))


def lightning_forward(q, k, v, decay, cfg: BlockConfig | None = None, *,
                      stats: KernelStats | None = None,
                      tracker: MemoryTracker = NULL_TRACKER, threads: int = 1) -> np.ndarray:
    """Blocked evaluation of ``(Q K^T * M) V`` without forming the ``n x n`` matrices.

    ``threads > 1`` distributes row blocks over a thread pool (``tiled``
    schedule only; the ``state`` schedule is a sequential scan).  Results do
    not depend on the thread count.
    """
    cfg = cfg or BlockConfig()
    q, k, v, lam = _check_inputs(q, k, v, decay)
    stats = _fresh_stats(stats)
    log_lam = np.log(lam)
    n = q.shape[-2]
    br, bc = cfg.sizes(n)
    out = tracker.track(np.zeros(q.shape[:-1] + (v.shape[-1],), dtype=q.dtype))
    if cfg.schedule == "tiled":
        _tiled_forward(q, k, v, log_lam, br, bc, cfg.skip_upper, out, stats, tracker, threads)
    else:
        _state_forward(q, k, v, log_lam, br, bc, out, stats, tracker)
    return out


def _scratch_shapes(q, v, log_lam, br, bc, rows_kv):
    lead = q.shape[:-2]
    d, dv = q.shape[-1], v.shape[-1]
    return {
        "q": lead + (br, d),
        "k": lead + (rows_kv, d),
        "v": lead + (rows_kv, dv),
        "m": log_lam.shape + (br, bc),
        "a": lead + (br, bc),
        "o": lead + (br, dv),
    }


def _tiled_forward(q, k, v, log_lam, br, bc, skip_upper, out, stats, tracker, threads):
    n = q.shape[-2]
    row_blocks = list(range(0, n, br))

    def run(my_blocks):
        scratch = _Scratch(_scratch_shapes(q, v, log_lam, br, bc, bc), q.dtype, stats, tracker)
        for r0 in my_blocks:
            r1 = min(r0 + br, n)
            rows = r1 - r0
            qi = scratch.stage("q", q[..., r0:r1, :])
            oi = scratch.view("o", rows)
            oi.fill(0)
            for c0 in range(0, n, bc):
                if skip_upper and c0 > r1 - 1:
                    break
                c1 = min(c0 + bc, n)
                cols = c1 - c0
                kj = scratch.stage("k", k[..., c0:c1, :])
                vj = scratch.stage("v", v[..., c0:c1, :])
                mij = _mask_tile(scratch, r0, rows, c0, cols, log_lam)
                a = scratch.view("a", rows, cols)
                np.matmul(qi, _swap(kj), out=a)
                a *= mij
                oi += a @ vj
                stats.add(tiles_computed=1)
            out[..., r0:r1, :] = oi
        scratch.release()

    if threads <= 1 or len(row_blocks) == 1:
        run(row_blocks)
        return
    parts = [row_blocks[w::threads] for w in range(threads)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        list(pool.map(run, [p for p in parts if p]))


def _state_forward(q, k, v, log_lam, br, bc, out, stats, tracker):
    n, d = q.shape[-2:]
    dv = v.shape[-1]
    lead = np.broadcast_shapes(q.shape[:-2], log_lam.shape)
    scratch = _Scratch(_scratch_shapes(q, v, log_lam, br, bc, br), q.dtype, stats, tracker)
    state = tracker.track(np.zeros(lead + (d, dv), dtype=q.dtype))
    for r0 in range(0, n, br):
        r1 = min(r0 + br, n)
        rows = r1 - r0
        qi = scratch.stage("q", q[..., r0:r1, :])
        ki = scratch.stage("k", k[..., r0:r1, :])
        vi = scratch.stage("v", v[..., r0:r1, :])
        oi = scratch.view("o", rows)
        if r0 > 0:
            np.multiply(qi @ state, _row_weights(0, rows, log_lam, q.dtype), out=oi)
        else:
            oi.fill(0)
        for c0 in range(r0, r1, bc):
            c1 = min(c0 + bc, r1)
            cols = c1 - c0
            mij = _mask_tile(scratch, r0, rows, c0, cols, log_lam)
            a = scratch.view("a", rows, cols)
            np.matmul(qi, _swap(ki[..., c0 - r0:c1 - r0, :]), out=a)
            a *= mij
            oi += a @ vi[..., c0 - r0:c1 - r0, :]
            stats.add(tiles_computed=1)
        out[..., r0:r1, :] = oi
        if r1 < n:
            state *= np.exp(rows * log_lam)[..., None, None].astype(q.dtype)
            kw = ki * _row_weights(r0, r1, log_lam, q.dtype, reverse_from=r1)
            state += _swap(kw) @ vi
            stats.add(state_updates=1)
    tracker.free(state.nbytes)
    scratch.release()


def lightning_backward(q, k, v, decay, do, cfg: BlockConfig | None = None, *,
                       stats: KernelStats | None = None,
                       tracker: MemoryTracker = NULL_TRACKER) -> AttentionGrads:
    """Blocked gradients of ``O = (Q K^T * M) V`` with respect to Q, K and V.

    With ``A = (Q K^T) * M``: ``dV = A^T dO``, ``dA = (dO V^T) * M``,
    ``dQ = dA K`` and ``dK = dA^T Q``, each accumulated tile by tile.
    """
    cfg = cfg or BlockConfig()
    q, k, v, lam = _check_inputs(q, k, v, decay)
    do = np.asarray(do)
    if do.shape != v.shape:
        raise ShapeError(f"dO shape {do.shape} does not match output shape {v.shape}")
    stats = _fresh_stats(stats)
    log_lam = np.log(lam)
    n = q.shape[-2]
    br, bc = cfg.sizes(n)
    dq = tracker.track(np.zeros_like(q))
    dk = tracker.track(np.zeros_like(k))
    dv = tracker.track(np.zeros_like(v))
    if cfg.schedule == "tiled":
        _tiled_backward(q, k, v, do, log_lam, br, bc, cfg.skip_upper, dq, dk, dv, stats, tracker)
    else:
        _state_backward(q, k, v, do, log_lam, br, bc, dq, dk, dv, stats, tracker)
    return AttentionGrads(dq, dk, dv)


def _tiled_backward(q, k, v, do, log_lam, br, bc, skip_upper, dq, dk, dv, stats, tracker):
    n, d = q.shape[-2:]
    lead = q.shape[:-2]
    shapes = _scratch_shapes(q, v, log_lam, br, bc, bc)
    shapes.update({"do": lead + (br, v.shape[-1]), "da": lead + (br, bc),
                   "dk": lead + (bc, d), "dv": lead + (bc, v.shape[-1])})
    scratch = _Scratch(shapes, q.dtype, stats, tracker)
    for c0 in range(0, n, bc):
        c1 = min(c0 + bc, n)
        cols = c1 - c0
        kj = scratch.stage("k", k[..., c0:c1, :])
        vj = scratch.stage("v", v[..., c0:c1, :])
        dkj = scratch.view("dk", cols)
        dvj = scratch.view("dv", cols)
        dkj.fill(0)
        dvj.fill(0)
        first = (c0 // br) * br if skip_upper else 0
        for r0 in range(first, n, br):
            r1 = min(r0 + br, n)
            rows = r1 - r0
            qi = scratch.stage("q", q[..., r0:r1, :])
            doi = scratch.stage("do", do[..., r0:r1, :])
            mij = _mask_tile(scratch, r0, rows, c0, cols, log_lam)
            a = scratch.view("a", rows, cols)
            np.matmul(qi, _swap(kj), out=a)
            a *= mij
            dvj += _swap(a) @ doi
            da = scratch.view("da", rows, cols)
            np.matmul(doi, _swap(vj), out=da)
            da *= mij
            dkj += _swap(da) @ qi
            dq[..., r0:r1, :] += da @ kj
            stats.add(tiles_computed=1)
        dk[..., c0:c1, :] = dkj
        dv[..., c0:c1, :] = dvj
    scratch.release()


def _state_backward(q, k, v, do, log_lam, br, bc, dq, dk, dv, stats, tracker):
    n, d = q.shape[-2:]
    dvd = v.shape[-1]
    lead = np.broadcast_shapes(q.shape[:-2], log_lam.shape)
    shapes = _scratch_shapes(q, v, log_lam, br, bc, br)
    shapes.update({"do": q.shape[:-2] + (br, dvd), "da": q.shape[:-2] + (br, bc)})
    scratch = _Scratch(shapes, q.dtype, stats, tracker)
    state = tracker.track(np.zeros(lead + (d, dvd), dtype=q.dtype))
    starts = list(range(0, n, br))

    # forward sweep: diagonal tiles for all three gradients, running k v^T state for dQ
    for r0 in starts:
        r1 = min(r0 + br, n)
        rows = r1 - r0
        qi = scratch.stage("q", q[..., r0:r1, :])
        ki = scratch.stage("k", k[..., r0:r1, :])
        vi = scratch.stage("v", v[..., r0:r1, :])
        doi = scratch.stage("do", do[..., r0:r1, :])
        if r0 > 0:
            dq[..., r0:r1, :] += (doi @ _swap(state)) * _row_weights(0, rows, log_lam, q.dtype)
        for c0 in range(r0, r1, bc):
            c1 = min(c0 + bc, r1)
            cols = c1 - c0
            kc = ki[..., c0 - r0:c1 - r0, :]
            vc = vi[..., c0 - r0:c1 - r0, :]
            mij = _mask_tile(scratch, r0, rows, c0, cols, log_lam)
            a = scratch.view("a", rows, cols)
            np.matmul(qi, _swap(kc), out=a)
            a *= mij
            dv[..., c0:c1, :] += _swap(a) @ doi
            da = scratch.view("da", rows, cols)
            np.matmul(doi, _swap(vc), out=da)
            da *= mij
            dk[..., c0:c1, :] += _swap(da) @ qi
            dq[..., r0:r1, :] += da @ kc
            stats.add(tiles_computed=1)
        if r1 < n:
            state *= np.exp(rows * log_lam)[..., None, None].astype(q.dtype)
            state += _swap(ki * _row_weights(r0, r1, log_lam, q.dtype, reverse_from=r1)) @ vi
            stats.add(state_updates=1)

    # reverse sweep: q dO^T state carries contributions of later blocks into dK, dV
    state.fill(0)
    for r0 in reversed(starts):
        r1 = min(r0 + br, n)
        rows = r1 - r0
        ki = scratch.stage("k", k[..., r0:r1, :])
        vi = scratch.stage("v", v[..., r0:r1, :])
        if r1 < n:
            w = _row_weights(r0, r1, log_lam, q.dtype, reverse_from=r1 - 1)
            dv[..., r0:r1, :] += (ki * w) @ state
            dk[..., r0:r1, :] += (vi * w) @ _swap(state)
        if r0 > 0:
            qi = scratch.stage("q", q[..., r0:r1, :])
            doi = scratch.stage("do", do[..., r0:r1, :])
            state *= np.exp(rows * log_lam)[..., None, None].astype(q.dtype)
            qw = qi * _row_weights(1, rows + 1, log_lam, q.dtype)
            state += _swap(qw) @ doi
            stats.add(state_updates=1)
    tracker.free(state.nbytes)
    scratch.release()
