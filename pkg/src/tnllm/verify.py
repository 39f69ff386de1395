"""Self-check suites behind ``tnllm verify``.

Every check is a small, seeded comparison against an independent oracle
(the quadratic reference, central finite differences, the unsharded
layer, ...).  A suite returns a list of :class:`Check` records; the CLI
prints them and turns the outcome into an exit code.  Reports contain no
timings, so two runs with the same seed print identical text.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import attention
from .attention import BlockConfig
from .blocks import GlaParams, SgluParams, gla_bwd, gla_fwd, sglu_bwd, sglu_fwd
from .inference import RecurrentState, recurrent_attention, teacher_forced_logits
from .model import forward_lm, init_model, loss_and_grads, preset
from .numerics import make_rng
from .parallel_sim import (CollectiveLedger, ShardPlan, gather_grads, gla_parallel_fwd,
                           parallel_backward, shard_weights, sglu_parallel_fwd, unshard,
                           worker_param_bytes)

SUITES = ("attention", "gradcheck", "inference", "parallel")


@dataclass
class Check:
    suite: str
    name: str
    passed: bool
    error: float
    tol: float
    inputs: dict = field(default_factory=dict)

    def human(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        args = " ".join(f"{k}={v}" for k, v in self.inputs.items())
        return f"[{tag}] {self.suite}.{self.name}: err={self.error:.3e} tol={self.tol:.0e} {args}".rstrip()

    def machine(self) -> str:
        fields_ = {"suite": self.suite, "check": self.name,
                   "status": "pass" if self.passed else "fail",
                   "error": f"{self.error:.6e}", "tol": f"{self.tol:.1e}", **self.inputs}
        return " ".join(f"{k}={v}" for k, v in fields_.items())


def rel_err(actual, expected) -> float:
    """``max|actual - expected| / max|expected|`` (absolute when ``expected`` is all zero)."""
    actual, expected = np.asarray(actual, dtype=np.float64), np.asarray(expected, dtype=np.float64)
    if actual.shape != expected.shape:
        return float("inf")
    if not (np.all(np.isfinite(actual)) and np.all(np.isfinite(expected))):
        return float("inf")
    diff = float(np.max(np.abs(actual - expected), initial=0.0))
    scale = float(np.max(np.abs(expected), initial=0.0))
    return diff / scale if scale > 0 else diff


def numeric_grad(f, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f`` with respect to every entry of ``x`` (in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        hi = f()
        flat[i] = keep - step
        lo = f()
        flat[i] = keep
        gflat[i] = (hi - lo) / (2 * step)
    return g


def _qkv(rng, n, d, lead=()):
    return (rng.standard_normal(lead + (n, d)) for _ in range(3))


# ---------------------------------------------------------------------------
# Suites
# ---------------------------------------------------------------------------

def suite_attention(seed: int) -> list[Check]:
    checks = []
    rng = make_rng([seed, 1])
    for n in (1, 5, 16, 64, 257):
        for d in (1, 8):
            for lam in (1.0, 0.9, 0.5):
                q, k, v = _qkv(rng, n, d)
                ref = attention.reference_forward(q, k, v, lam)
                for schedule in attention.SCHEDULES:
                    for tile in (1, 16, n):
                        if schedule == "tiled" and tile == 1 and n > 64:
                            continue
                        cfg = BlockConfig(tile, tile, schedule)
                        out = attention.lightning_forward(q, k, v, lam, cfg)
                        err = rel_err(out, ref)
                        checks.append(Check("attention", f"forward_{schedule}", err <= 1e-10, err,
                                            1e-10, dict(n=n, d=d, lam=lam, tile=tile, seed=seed)))
    # multi-head decay broadcast
    q, k, v = _qkv(rng, 33, 4, (3,))
    lam = np.array([1.0, 0.8, 0.3])
    err = rel_err(attention.lightning_forward(q, k, v, lam, BlockConfig(8, 8)),
                  attention.reference_forward(q, k, v, lam))
    checks.append(Check("attention", "per_head_decay", err <= 1e-10, err, 1e-10,
                        dict(n=33, d=4, heads=3, seed=seed)))
    # no decay and no mask reduces to the right-product form on the last row
    q, k, v = _qkv(rng, 12, 4)
    last = attention.lightning_forward(q, k, v, 1.0)[-1]
    err = rel_err(last, attention.right_product_forward(q, k, v)[-1])
    checks.append(Check("attention", "last_row_unmasked", err <= 1e-12, err, 1e-12,
                        dict(n=12, d=4, seed=seed)))
    return checks


def suite_gradcheck(seed: int) -> list[Check]:
    checks = []
    rng = make_rng([seed, 2])
    for n, d, lam, tile in ((7, 3, 0.9, 3), (16, 8, 0.5, 4), (5, 2, 1.0, 2)):
        q, k, v = _qkv(rng, n, d)
        do = rng.standard_normal((n, d))
        cfg = BlockConfig(tile, tile)
        grads = attention.lightning_backward(q, k, v, lam, do, cfg)
        ref = attention.reference_backward(q, k, v, lam, do)
        inputs = {"dQ": q, "dK": k, "dV": v}
        for (label, x), got, want in zip(inputs.items(), grads, ref):
            fd = numeric_grad(lambda: float(np.sum(attention.reference_forward(q, k, v, lam) * do)), x)
            err = rel_err(got, fd)
            checks.append(Check("gradcheck", f"lightning_{label}_vs_fd", err <= 1e-4, err, 1e-4,
                                dict(n=n, d=d, lam=lam, tile=tile, seed=seed)))
            err = rel_err(got, want)
            checks.append(Check("gradcheck", f"lightning_{label}_vs_unblocked", err <= 1e-12, err,
                                1e-12, dict(n=n, d=d, lam=lam, tile=tile, seed=seed)))

    x = rng.standard_normal((6, 8))
    dout = rng.standard_normal((6, 8))
    gla = GlaParams.init(rng, 8, 2, np.array([0.9, 0.6]), std=0.4)
    _, cache = gla_fwd(x, gla, block=BlockConfig(2, 2))
    dx, grads = gla_bwd(dout, cache)
    loss = lambda: float(np.sum(gla_fwd(x, gla, block=BlockConfig(2, 2))[0] * dout))
    for name, got in [("x", dx)] + sorted(grads.items()):
        target = x if name == "x" else getattr(gla, name)
        err = rel_err(got, numeric_grad(loss, target))
        checks.append(Check("gradcheck", f"gla_{name}", err <= 1e-4, err, 1e-4,
                            dict(n=6, d=8, heads=2, seed=seed)))

    sg = SgluParams.init(rng, 8, 16, activation="swish", std=0.4)
    _, cache = sglu_fwd(x, sg)
    dx, grads = sglu_bwd(dout, cache)
    loss = lambda: float(np.sum(sglu_fwd(x, sg)[0] * dout))
    for name, got in [("x", dx)] + sorted(grads.items()):
        target = x if name == "x" else getattr(sg, name)
        err = rel_err(got, numeric_grad(loss, target))
        checks.append(Check("gradcheck", f"sglu_{name}", err <= 1e-4, err, 1e-4,
                            dict(n=6, d=8, seed=seed)))

    cfg = preset("gradcheck", seed=seed, init_std=0.2, block_r=4, block_c=4)
    params = init_model(cfg)
    tokens = make_rng([seed, 3]).integers(0, cfg.vocab_size, size=(2, 9))
    _, grads = loss_and_grads(params, cfg, tokens)
    worst, worst_name = 0.0, ""
    for name in sorted(params):
        fd = numeric_grad(lambda: forward_lm(params, cfg, tokens)[1], params[name])
        err = rel_err(grads[name], fd)
        if err >= worst:
            worst, worst_name = err, name
    checks.append(Check("gradcheck", "model_end_to_end", worst <= 1e-4, worst, 1e-4,
                        dict(worst=worst_name, layers=cfg.n_layers, d=cfg.d_model, seed=seed)))
    return checks


def suite_inference(seed: int) -> list[Check]:
    checks = []
    rng = make_rng([seed, 4])
    for n, lam in ((64, 0.9), (256, 0.97), (40, 1.0)):
        q, k, v = _qkv(rng, n, 4, (2,))
        lam2 = np.array([lam, 0.5])
        ref = attention.reference_forward(q, k, v, lam2)
        rob, _ = recurrent_attention(q, k, v, lam2, "robust")
        org, _ = recurrent_attention(q, k, v, lam2, "origin")
        err = rel_err(rob, ref)
        checks.append(Check("inference", "robust_vs_parallel", err <= 1e-6, err, 1e-6,
                            dict(n=n, lam=lam, seed=seed)))
        if np.all(np.isfinite(org)):
            err = rel_err(org, rob)
            checks.append(Check("inference", "origin_vs_robust", err <= 1e-6, err, 1e-6,
                                dict(n=n, lam=lam, seed=seed)))

    k = np.zeros((200, 4), dtype=np.float32)
    k[:, 0] = 1.0
    _, state = recurrent_attention(k, k, k, 0.5, "origin", dtype=np.float32)
    first = state.first_nonfinite
    checks.append(Check("inference", "origin_overflows", first is not None and first <= 200,
                        float(first or -1), 200, dict(lam=0.5, dtype="float32", seed=seed)))

    cfg = preset("gradcheck", seed=seed, init_std=0.2, gla_norm="per_head")
    params = init_model(cfg)
    tokens = make_rng([seed, 5]).integers(0, cfg.vocab_size, size=48)
    logits, _ = forward_lm(params, cfg, tokens)
    err = rel_err(teacher_forced_logits(params, cfg, tokens), logits)
    checks.append(Check("inference", "model_teacher_forced", err <= 1e-6, err, 1e-6,
                        dict(n=48, seed=seed)))

    st = RecurrentState.zeros(4, np.array([0.9, 0.7]))
    st.kv[...] = rng.standard_normal(st.kv.shape)
    st.t = 17
    back = RecurrentState.restore(st.snapshot())
    ok = back.t == st.t and np.array_equal(back.kv, st.kv) and np.array_equal(back.decay, st.decay)
    checks.append(Check("inference", "snapshot_round_trip", ok, 0.0 if ok else 1.0, 0.0,
                        dict(seed=seed)))
    return checks


def suite_parallel(seed: int) -> list[Check]:
    checks = []
    rng = make_rng([seed, 6])
    d, heads, n = 16, 4, 12
    x = rng.standard_normal((n, d))
    dout = rng.standard_normal((n, d))
    gla = GlaParams.init(rng, d, heads, np.array([1.0, 0.9, 0.7, 0.4]), norm_mode="per_head", std=0.3)
    sg = SgluParams.init(rng, d, 24, std=0.3)
    gla_ref, gla_cache = gla_fwd(x, gla)
    gla_dx, gla_grads = gla_bwd(dout, gla_cache)
    sg_ref, sg_cache = sglu_fwd(x, sg)
    sg_dx, sg_grads = sglu_bwd(dout, sg_cache)
    for world in (1, 2, 4):
        for label, params, plan, fwd, ref, dx_ref, g_ref in (
                ("sglu", sg, ShardPlan.sglu(world), sglu_parallel_fwd, sg_ref, sg_dx, sg_grads),
                ("gla", gla, ShardPlan.gla(world), gla_parallel_fwd, gla_ref, gla_dx, gla_grads)):
            shards = shard_weights(params, plan)
            ledger = CollectiveLedger()
            out, cache = fwd(x, shards, ledger)
            err = rel_err(out, ref)
            checks.append(Check("parallel", f"{label}_forward", err <= 1e-6, err, 1e-6,
                                dict(world=world, seed=seed)))
            dx, grads = parallel_backward(dout, cache, ledger)
            full = gather_grads(grads, plan)
            err = max([rel_err(dx, dx_ref)] + [rel_err(full[k], g_ref[k]) for k in g_ref])
            checks.append(Check("parallel", f"{label}_backward", err <= 1e-6, err, 1e-6,
                                dict(world=world, seed=seed)))
            counts = (ledger.count("forward"), ledger.count("backward"))
            checks.append(Check("parallel", f"{label}_all_reduce_count", counts == (1, 1),
                                float(abs(counts[0] - 1) + abs(counts[1] - 1)), 0.0,
                                dict(world=world, forward=counts[0], backward=counts[1])))
            rebuilt = unshard(shards, plan)
            ok = all(np.array_equal(rebuilt[k], v) for k, v in params.arrays().items())
            checks.append(Check("parallel", f"{label}_round_trip", ok, 0.0 if ok else 1.0, 0.0,
                                dict(world=world)))
            sizes = worker_param_bytes(shards)
            total = worker_param_bytes(shard_weights(params, type(plan)(1, plan.axes)))[0]
            ok = all(s * world == total for s in sizes)
            checks.append(Check("parallel", f"{label}_worker_bytes", ok,
                                float(max(abs(s * world - total) for s in sizes)), 0.0,
                                dict(world=world, per_worker=sizes[0], total=total)))
    return checks


_SUITES = {"attention": suite_attention, "gradcheck": suite_gradcheck,
           "inference": suite_inference, "parallel": suite_parallel}


def run_suites(names, seed: int) -> list[Check]:
    checks = []
    for name in names:
        checks.extend(_SUITES[name](seed))
    return checks


def report(checks: list[Check]) -> list[str]:
    """Human lines, then key=value lines, then a summary; the first failure is repeated last."""
    lines = [c.human() for c in checks]
    lines += [c.machine() for c in checks]
    failed = [c for c in checks if not c.passed]
    lines.append(f"summary checks={len(checks)} passed={len(checks) - len(failed)} "
                 f"failed={len(failed)}")
    if failed:
        lines.append(f"first_failure {failed[0].machine()}")
    return lines
