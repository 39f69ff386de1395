"""Constant-memory recurrent decoding.

Because ``lam**(s-t)`` factors as ``lam**s * lam**(-t)``, causal decayed
linear attention can be evaluated one token at a time with a ``d x d``
state per head.  Two update rules are provided:

``origin``
    ``kv += lam**(-t) k v^T`` and ``o = lam**t q kv``.  Mathematically fine,
    but ``lam**(-t)`` overflows for long sequences when ``lam < 1``.
``robust``
    ``kv = lam * kv + k v^T`` and ``o = q kv``.  The state stays bounded.

The two states are related by ``kv_origin(t) = lam**(-t) * kv_robust(t)``,
so both emit the same outputs for as long as the origin state is finite.
"""

from __future__ import annotations

import io
import time
from dataclasses import dataclass, field

import numpy as np

from .blocks import act_fwd, merge_heads, norm_fwd, split_heads, srmsnorm
from .model import ModelConfig, check_tokens, head_weight, layer_params
from .numerics import decode_tensor, encode_tensor, make_rng
from .positional import apply_lrpe, check_decay

ALGORITHMS = ("robust", "origin")


@dataclass
class RecurrentState:
    """Running key-value state for one or more heads.

    ``kv`` has shape ``decay.shape + (key_dim, value_dim)``; its size never
    depends on how many tokens have been consumed.  ``t`` counts consumed
    tokens.
    """

    kv: np.ndarray
    decay: np.ndarray
    algorithm: str = "robust"
    t: int = 0
    first_nonfinite: int | None = None

    def __post_init__(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        self.decay = check_decay(self.decay)
        if self.kv.shape[:-2] != self.decay.shape:
            raise ValueError(f"state shape {self.kv.shape} does not match decay {self.decay.shape}")

    @classmethod
    def zeros(cls, key_dim: int, decay, algorithm: str = "robust", value_dim: int | None = None,
              dtype=np.float64) -> "RecurrentState":
        decay = check_decay(decay)
        kv = np.zeros(decay.shape + (key_dim, value_dim or key_dim), dtype=dtype)
        return cls(kv, decay, algorithm)

    @property
    def nbytes(self) -> int:
        return self.kv.nbytes

    def snapshot(self) -> bytes:
        meta = np.array([self.t, -1 if self.first_nonfinite is None else self.first_nonfinite,
                         ALGORITHMS.index(self.algorithm)], dtype=np.int64)
        return encode_tensor(meta) + encode_tensor(self.decay) + encode_tensor(self.kv)

    @classmethod
    def restore(cls, blob: bytes) -> "RecurrentState":
        meta, off = decode_tensor(blob)
        decay, off = decode_tensor(blob, off)
        kv, _ = decode_tensor(blob, off)
        first = None if meta[1] < 0 else int(meta[1])
        return cls(kv, decay, ALGORITHMS[int(meta[2])], int(meta[0]), first)


def _outer(k: np.ndarray, v: np.ndarray) -> np.ndarray:
    return k[..., :, None] * v[..., None, :]


def _readout(q: np.ndarray, kv: np.ndarray) -> np.ndarray:
    return np.einsum("...d,...de->...e", q, kv)


def origin_step(state: RecurrentState, q, k, v) -> np.ndarray:
    """One token of the origin recurrence; non-finite values are recorded, not masked."""
    if state.algorithm != "origin":
        raise ValueError("origin_step needs a state created with algorithm='origin'")
    t = state.t + 1
    lam = state.decay.astype(state.kv.dtype)
    with np.errstate(over="ignore", under="ignore", invalid="ignore"):
        up = lam ** np.asarray(-t, dtype=state.kv.dtype)
        down = lam ** np.asarray(t, dtype=state.kv.dtype)
        state.kv += up[..., None, None] * _outer(k, v)
        out = down[..., None] * _readout(q, state.kv)
    state.t = t
    if state.first_nonfinite is None and not (np.all(np.isfinite(state.kv))
                                              and np.all(np.isfinite(out))):
        state.first_nonfinite = t
    return out


def robust_step(state: RecurrentState, q, k, v) -> np.ndarray:
    """One token of the rescaled recurrence ``kv = lam * kv + k v^T``."""
    if state.algorithm != "robust":
        raise ValueError("robust_step needs a state created with algorithm='robust'")
    lam = state.decay.astype(state.kv.dtype)
    state.kv *= lam[..., None, None]
    state.kv += _outer(k, v)
    state.t += 1
    return _readout(q, state.kv)


def step(state: RecurrentState, q, k, v) -> np.ndarray:
    return (origin_step if state.algorithm == "origin" else robust_step)(state, q, k, v)


def recurrent_attention(q, k, v, decay, algorithm: str = "robust", dtype=None):
    """Run a whole ``(..., n, d)`` sequence through the recurrence.

    Returns ``(outputs, state)``; outputs match the parallel masked form.
    """
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    dtype = dtype or q.dtype
    decay = np.broadcast_to(check_decay(decay), q.shape[:-2])
    state = RecurrentState.zeros(q.shape[-1], decay, algorithm, v.shape[-1], dtype)
    out = np.empty(q.shape[:-1] + (v.shape[-1],), dtype=dtype)
    for t in range(q.shape[-2]):
        out[..., t, :] = step(state, q[..., t, :].astype(dtype), k[..., t, :].astype(dtype),
                              v[..., t, :].astype(dtype))
    return out, state


# ---------------------------------------------------------------------------
# Whole-model decoding
# ---------------------------------------------------------------------------

@dataclass
class Decoder:
    """Feeds tokens one at a time through every layer using recurrent states.

    ``lambda_floor`` raises every decay rate to at least that value (used to
    demonstrate origin-algorithm overflow at a controlled rate).
    """

    params: dict[str, np.ndarray]
    cfg: ModelConfig
    algorithm: str = "robust"
    dtype: str | np.dtype | None = None
    lambda_floor: float | None = None
    states: list[RecurrentState] = field(init=False)

    def __post_init__(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        self.dtype = np.dtype(self.dtype or self.cfg.dtype)
        self.layers = [layer_params(self.params, self.cfg, l) for l in range(self.cfg.n_layers)]
        self.reset()

    def reset(self) -> None:
        self.states = []
        for bp in self.layers:
            decay = bp.gla.decay
            if self.lambda_floor is not None:
                decay = np.maximum(decay, self.lambda_floor)
            self.states.append(RecurrentState.zeros(bp.gla.head_dim, decay, self.algorithm,
                                                    dtype=self.dtype))

    @property
    def position(self) -> int:
        return self.states[0].t

    @property
    def state_bytes(self) -> int:
        return sum(s.nbytes for s in self.states)

    @property
    def first_nonfinite(self) -> int | None:
        hits = [s.first_nonfinite for s in self.states if s.first_nonfinite is not None]
        return min(hits) if hits else None

    def step(self, token: int) -> np.ndarray:
        """Consume one token and return the next-token logits."""
        if self.algorithm == "origin":
            # an overflowing origin state is reported via first_nonfinite, not warnings
            with np.errstate(over="ignore", invalid="ignore", under="ignore"):
                return self._step(token)
        return self._step(token)

    def _step(self, token: int) -> np.ndarray:
        cfg = self.cfg
        token = int(check_tokens([token], cfg.vocab_size)[0])
        pos = self.position
        x = self.params["embed"][token][None, :].astype(self.dtype)
        for bp, state in zip(self.layers, self.states):
            gla = bp.gla
            h, _ = norm_fwd(bp.norm, x, bp.norm1)
            q = split_heads(act_fwd(gla.activation, h @ gla.w_q), gla.num_heads)
            k = split_heads(act_fwd(gla.activation, h @ gla.w_k), gla.num_heads)
            v = split_heads(h @ gla.w_v, gla.num_heads)
            q = apply_lrpe(q, gla.theta, pos)[..., 0, :]
            k = apply_lrpe(k, gla.theta, pos)[..., 0, :]
            o = step(state, q, k, v[..., 0, :])[:, None, :]
            if gla.norm_mode == "per_head":
                o = merge_heads(srmsnorm(o, gla.eps))
            else:
                o = srmsnorm(merge_heads(o), gla.eps)
            if gla.use_gate:
                o = o * (h @ gla.w_u)
            x = x + o @ gla.w_o
            h2, _ = norm_fwd(bp.norm, x, bp.norm2)
            s = bp.sglu
            x = x + ((h2 @ s.w_v) * act_fwd(s.activation, h2 @ s.w_u)) @ s.w_o
        y, _ = norm_fwd(cfg.norm_kind, x, {k[11:]: v for k, v in self.params.items()
                                           if k.startswith("final_norm.")})
        return (y @ head_weight(self.params, cfg).T)[0]

    def snapshot(self) -> bytes:
        buf = io.BytesIO()
        for s in self.states:
            blob = s.snapshot()
            buf.write(len(blob).to_bytes(8, "little"))
            buf.write(blob)
        return buf.getvalue()

    def restore(self, blob: bytes) -> None:
        states, off = [], 0
        while off < len(blob):
            size = int.from_bytes(blob[off:off + 8], "little")
            states.append(RecurrentState.restore(blob[off + 8:off + 8 + size]))
            off += 8 + size
        if len(states) != len(self.layers):
            raise ValueError(f"snapshot holds {len(states)} layer states, model has {len(self.layers)}")
        self.states = states


def teacher_forced_logits(params, cfg: ModelConfig, tokens, algorithm: str = "robust") -> np.ndarray:
    """Per-position logits from the recurrent path, ``(n, vocab)``."""
    ids = check_tokens(tokens, cfg.vocab_size)
    dec = Decoder(params, cfg, algorithm)
    return np.stack([dec.step(t) for t in ids])


def sample(logits: np.ndarray, sampler: str, temperature: float, rng: np.random.Generator) -> int:
    if sampler == "greedy":
        return int(np.argmax(logits))
    if sampler != "temperature":
        raise ValueError(f"unknown sampler {sampler!r}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = logits / temperature
    p = np.exp(z - z.max())
    p /= p.sum()
    return int(rng.choice(len(p), p=p))


@dataclass
class DecodeResult:
    tokens: list[int]
    step_seconds: list[float]
    state_bytes: list[int]
    first_nonfinite: int | None


def decode(params, cfg: ModelConfig, prompt, steps: int, sampler: str = "greedy",
           temperature: float = 1.0, seed: int = 0, algorithm: str = "robust",
           lambda_floor: float | None = None, dtype=None, return_details: bool = False):
    """Ingest ``prompt`` token by token, then sample ``steps`` more tokens.

    Returns the full id list (prompt included), or a :class:`DecodeResult`
    with per-token timings when ``return_details`` is set.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    ids = [int(t) for t in check_tokens(prompt, cfg.vocab_size)]
    if steps > 0 and not ids:
        raise ValueError("need a non-empty prompt to decode from")
    rng = make_rng(seed)
    dec = Decoder(params, cfg, algorithm, dtype, lambda_floor)
    out = list(ids)
    timings, sizes = [], []
    logits = None
    for i, tok in enumerate(ids):
        if steps == 0 and not return_details:
            break
        t0 = time.perf_counter()
        logits = dec.step(tok)
        timings.append(time.perf_counter() - t0)
        sizes.append(dec.state_bytes)
    for i in range(steps):
        nxt = sample(logits, sampler, temperature, rng)
        out.append(nxt)
        if i == steps - 1:
            break
        t0 = time.perf_counter()
        logits = dec.step(nxt)
        timings.append(time.perf_counter() - t0)
        sizes.append(dec.state_bytes)
    if return_details:
        return DecodeResult(out, timings, sizes, dec.first_nonfinite)
    return out
