"""The full language model: byte embedding, a stack of residual blocks with
per-layer decay rates, a final norm and a (tied) output head.

Parameters live in a flat ``dict[str, ndarray]`` so that the optimiser,
gradient checks and checkpoints can treat them uniformly.  Gradients are
derived by hand, layer by layer, and checked against finite differences in
the test-suite.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .attention import SCHEDULES, BlockConfig
from .blocks import (ACTIVATIONS, GLU_ACTIVATIONS, NORM_VARIANTS, BlockParams, GlaParams,
                     NormKind, SgluParams, block_bwd, block_fwd, glu_hidden, norm_bwd, norm_fwd)
from .numerics import DTYPES, decode_tensor, encode_tensor, make_rng, normal
from .positional import DecaySchedule, init_theta

PAD_ID = 256
BOS_ID = 257
BYTE_VOCAB = 258


class ByteTokenizer:
    """UTF-8 bytes as token ids 0..255, plus ``PAD_ID`` and ``BOS_ID``."""

    vocab_size = BYTE_VOCAB

    def encode(self, text: str, bos: bool = False) -> list[int]:
        ids = list(text.encode("utf-8"))
        return [BOS_ID] + ids if bos else ids

    def decode(self, ids) -> str:
        return bytes(int(i) for i in ids if 0 <= int(i) < 256).decode("utf-8", errors="replace")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class ModelConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    vocab_size: int = BYTE_VOCAB
    glu_ratio: float = 8 / 3
    glu_hidden: int | None = None
    norm: str = "srms"
    gla_activation: str = "one_plus_elu"
    glu_activation: str = "none"
    use_gate: bool = True
    use_temperature: bool = True
    shared_theta: bool = False
    gla_norm: str = "merged"
    tie_embeddings: bool = True
    theta_base: float = 10000.0
    init_std: float = 0.02
    eps: float = 1e-6
    block_r: int = 64
    block_c: int = 64
    schedule: str = "state"
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} must be a positive multiple of "
                             f"n_heads {self.n_heads}")
        if (self.d_model // self.n_heads) % 2:
            raise ValueError("head_dim must be even for the relative rotations")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        checks = [("norm", NORM_VARIANTS), ("gla_activation", ACTIVATIONS),
                  ("glu_activation", GLU_ACTIVATIONS), ("gla_norm", ("merged", "per_head")),
                  ("schedule", SCHEDULES), ("dtype", tuple(DTYPES))]
        for name, allowed in checks:
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name}={getattr(self, name)!r}; expected one of {allowed}")
        if self.glu_hidden is not None and self.glu_hidden < 1:
            raise ValueError("glu_hidden must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def hidden(self) -> int:
        return self.glu_hidden or glu_hidden(self.d_model, self.glu_ratio)

    @property
    def decay_schedule(self) -> DecaySchedule:
        return DecaySchedule(self.n_heads, self.n_layers, self.use_temperature)

    @property
    def norm_kind(self) -> NormKind:
        return NormKind(self.norm, self.eps)

    def block_config(self) -> BlockConfig:
        return BlockConfig(self.block_r, self.block_c, self.schedule)

    def layer_decay(self, layer: int) -> np.ndarray:
        """Decay rates of every head in ``layer`` (0-based)."""
        return self.decay_schedule.layer_rates(layer + 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


PRESETS: dict[str, dict] = {
    "toy": dict(n_layers=2, d_model=64, n_heads=4),
    "gradcheck": dict(n_layers=2, d_model=16, n_heads=2, vocab_size=32),
    # 24 layers / 1024 wide / 8 heads, every dimension divided by 4
    "tiny-385M-shape": dict(n_layers=6, d_model=256, n_heads=2),
    "385M-shape": dict(n_layers=24, d_model=1024, n_heads=8),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(**{**PRESETS[name], **overrides})


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, e, v = cfg.d_model, cfg.hidden, cfg.vocab_size
    norm = {k: p.shape for k, p in cfg.norm_kind.init(d).items()}
    theta = (cfg.head_dim // 2,) if cfg.shared_theta else (cfg.n_heads, cfg.head_dim // 2)
    shapes: dict[str, tuple[int, ...]] = {"embed": (v, d)}
    for l in range(cfg.n_layers):
        pre = f"layers.{l}."
        shapes.update({pre + "norm1." + k: s for k, s in norm.items()})
        for w in ("w_q", "w_k", "w_v") + (("w_u",) if cfg.use_gate else ()) + ("w_o",):
            shapes[pre + "gla." + w] = (d, d)
        shapes[pre + "gla.theta"] = theta
        shapes.update({pre + "norm2." + k: s for k, s in norm.items()})
        shapes[pre + "sglu.w_v"] = (d, e)
        shapes[pre + "sglu.w_u"] = (d, e)
        shapes[pre + "sglu.w_o"] = (e, d)
    shapes.update({"final_norm." + k: s for k, s in norm.items()})
    if not cfg.tie_embeddings:
        shapes["head"] = (v, d)
    return shapes


def count_params(cfg: ModelConfig, embedding: bool = True) -> int:
    """Closed-form parameter count; ``embedding=False`` leaves out the token table/head."""
    d, e, h = cfg.d_model, cfg.hidden, cfg.n_heads
    norm = {"srms": 0, "rms": d, "layer": 2 * d}[cfg.norm]
    n_proj = 5 if cfg.use_gate else 4
    theta = cfg.head_dim // 2 * (1 if cfg.shared_theta else h)
    per_layer = n_proj * d * d + theta + 3 * d * e + 2 * norm
    total = cfg.n_layers * per_layer + norm
    if embedding:
        total += cfg.vocab_size * d * (1 if cfg.tie_embeddings else 2)
    return total


def init_model(cfg: ModelConfig) -> dict[str, np.ndarray]:
    """Seeded initialisation: N(0, init_std), residual output projections scaled by 1/sqrt(2L)."""
    rng = make_rng(cfg.seed)
    out_std = cfg.init_std / math.sqrt(2 * cfg.n_layers)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.endswith("gla.theta"):
            params[name] = init_theta(cfg.head_dim, None if cfg.shared_theta else cfg.n_heads,
                                      cfg.theta_base, dtype=DTYPES[cfg.dtype])
        elif leaf == "weight":
            params[name] = np.ones(shape, dtype=cfg.dtype)
        elif leaf == "bias":
            params[name] = np.zeros(shape, dtype=cfg.dtype)
        elif name.endswith(".w_o"):
            params[name] = normal(rng, shape, out_std, cfg.dtype)
        else:
            params[name] = normal(rng, shape, cfg.init_std, cfg.dtype)
    return params


def _sub(params: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def layer_params(params: dict[str, np.ndarray], cfg: ModelConfig, layer: int) -> BlockParams:
    pre = f"layers.{layer}."
    g = _sub(params, pre + "gla.")
    gla = GlaParams(w_q=g["w_q"], w_k=g["w_k"], w_v=g["w_v"], w_u=g.get("w_u"), w_o=g["w_o"],
                    theta=g["theta"], decay=cfg.layer_decay(layer), num_heads=cfg.n_heads,
                    activation=cfg.gla_activation, norm_mode=cfg.gla_norm, eps=cfg.eps)
    s = _sub(params, pre + "sglu.")
    sglu = SgluParams(s["w_v"], s["w_u"], s["w_o"], cfg.glu_activation)
    return BlockParams(gla, sglu, cfg.norm_kind, _sub(params, pre + "norm1."),
                       _sub(params, pre + "norm2."))


def head_weight(params: dict[str, np.ndarray], cfg: ModelConfig) -> np.ndarray:
    return params["embed"] if cfg.tie_embeddings else params["head"]


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def check_tokens(tokens, vocab_size: int) -> np.ndarray:
    ids = np.asarray(tokens)
    if ids.size and (not np.issubdtype(ids.dtype, np.integer)):
        raise TypeError(f"token ids must be integers, got {ids.dtype}")
    ids = ids.astype(np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        bad = ids[(ids < 0) | (ids >= vocab_size)][0]
        raise ValueError(f"token id {bad} outside vocabulary of size {vocab_size}")
    return ids


def position_losses(logits: np.ndarray, tokens: np.ndarray) -> np.ndarray:
    """Cross-entropy of predicting ``tokens[..., 1:]`` from ``logits[..., :-1, :]``."""
    z = logits[..., :-1, :]
    zmax = z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=-1)) + zmax[..., 0]
    target = np.take_along_axis(z, tokens[..., 1:, None], axis=-1)[..., 0]
    return lse - target


def _forward(params, cfg, ids, mode):
    block = cfg.block_config()
    x = params["embed"][ids]
    caches = []
    for l in range(cfg.n_layers):
        x, c = block_fwd(x, layer_params(params, cfg, l), mode, block)
        caches.append(c)
    y, c_final = norm_fwd(cfg.norm_kind, x, _sub(params, "final_norm."))
    logits = y @ head_weight(params, cfg).T
    return logits, (ids, caches, y, c_final)


def forward_lm(params: dict[str, np.ndarray], cfg: ModelConfig, tokens, mode: str = "lightning"):
    """Logits for every position and the mean next-token loss.

    ``tokens`` is ``(n,)`` or ``(B, n)``.  The loss is ``None`` when ``n < 2``.
    """
    ids = check_tokens(tokens, cfg.vocab_size)
    logits, _ = _forward(params, cfg, ids, mode)
    loss = float(position_losses(logits, ids).mean()) if ids.shape[-1] >= 2 else None
    return logits, loss


def loss_and_grads(params: dict[str, np.ndarray], cfg: ModelConfig, tokens,
                   mode: str = "lightning") -> tuple[float, dict[str, np.ndarray]]:
    ids = check_tokens(tokens, cfg.vocab_size)
    if ids.shape[-1] < 2:
        raise ValueError("need at least two tokens per sequence to form a loss")
    logits, (ids, caches, y, c_final) = _forward(params, cfg, ids, mode)
    losses = position_losses(logits, ids)
    count = losses.size

    z = logits[..., :-1, :]
    probs = np.exp(z - z.max(axis=-1, keepdims=True))
    probs /= probs.sum(axis=-1, keepdims=True)
    np.put_along_axis(probs, ids[..., 1:, None],
                      np.take_along_axis(probs, ids[..., 1:, None], axis=-1) - 1.0, axis=-1)
    dlogits = np.zeros_like(logits)
    dlogits[..., :-1, :] = probs / count

    grads: dict[str, np.ndarray] = {}
    w_head = head_weight(params, cfg)
    g_head = dlogits.reshape(-1, dlogits.shape[-1]).T @ y.reshape(-1, y.shape[-1])
    dy = dlogits @ w_head
    dx, g = norm_bwd(dy, c_final)
    grads.update({f"final_norm.{k}": v for k, v in g.items()})
    for l in reversed(range(cfg.n_layers)):
        dx, g = block_bwd(dx, caches[l])
        grads.update({f"layers.{l}.{k}": v for k, v in g.items()})
    g_embed = np.zeros_like(params["embed"])
    np.add.at(g_embed, ids.reshape(-1), dx.reshape(-1, dx.shape[-1]))
    if cfg.tie_embeddings:
        g_embed += g_head
    else:
        grads["head"] = g_head
    grads["embed"] = g_embed
    return float(losses.mean()), grads


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------

class TrainingDivergence(RuntimeError):
    """Raised when the loss or a parameter group stops being finite."""


@dataclass
class OptimConfig:
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    warmup: int = 20
    total_steps: int = 500
    min_lr_ratio: float = 0.1
    grad_clip: float | None = 1.0

    def lr_at(self, step: int) -> float:
        """Linear warmup followed by cosine decay to ``min_lr_ratio * lr``."""
        if self.warmup > 0 and step < self.warmup:
            return self.lr * (step + 1) / self.warmup
        span = max(1, self.total_steps - self.warmup)
        frac = min(1.0, (step - self.warmup) / span)
        floor = self.min_lr_ratio * self.lr
        return floor + 0.5 * (self.lr - floor) * (1.0 + math.cos(math.pi * frac))

    @classmethod
    def from_dict(cls, data: dict) -> "OptimConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown optimiser keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class TrainState:
    params: dict[str, np.ndarray]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    losses: list[float] = field(default_factory=list)

    @classmethod
    def create(cls, params: dict[str, np.ndarray]) -> "TrainState":
        return cls(params, {k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def _group(name: str) -> str:
    parts = name.split(".")
    return ".".join(parts[:3]) if parts[0] == "layers" else parts[0]


def _nonfinite_groups(tensors: dict[str, np.ndarray]) -> list[str]:
    return sorted({_group(k) for k, t in tensors.items() if not np.all(np.isfinite(t))})


def train_step(state: TrainState, cfg: ModelConfig, batch, opt: OptimConfig,
               mode: str = "lightning") -> float:
    """One Adam step on ``batch`` (``(B, n+1)`` token ids); returns the pre-update loss."""
    loss, grads = loss_and_grads(state.params, cfg, batch, mode)
    bad = _nonfinite_groups(grads)
    if not math.isfinite(loss) or bad:
        bad = bad or _nonfinite_groups(state.params) or ["<loss>"]
        raise TrainingDivergence(f"step {state.step}: non-finite loss/gradients in "
                                 f"parameter group(s) {', '.join(bad)}")
    scale = 1.0
    if opt.grad_clip:
        gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if gnorm > opt.grad_clip:
            scale = opt.grad_clip / gnorm
    lr = opt.lr_at(state.step)
    t = state.step + 1
    bc1 = 1.0 - opt.beta1 ** t
    bc2 = 1.0 - opt.beta2 ** t
    for name in sorted(state.params):
        g = grads[name] * scale
        m, v = state.m[name], state.v[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        state.params[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + opt.eps)
    bad = _nonfinite_groups(state.params)
    if bad:
        raise TrainingDivergence(f"step {state.step}: parameters became non-finite in "
                                 f"{', '.join(bad)}")
    state.step = t
    state.losses.append(loss)
    return loss


def sample_batch(data: np.ndarray, batch_size: int, seq_len: int, seed: int, step: int) -> np.ndarray:
    """Random ``(batch_size, seq_len + 1)`` windows; a pure function of ``(seed, step)``."""
    data = np.asarray(data, dtype=np.int64)
    if data.size == 0:
        raise ValueError("empty corpus")
    need = seq_len + 1
    if data.size < need:
        data = np.tile(data, -(-need // data.size))
    rng = make_rng([seed, step])
    starts = rng.integers(0, data.size - need + 1, size=batch_size)
    return np.stack([data[s:s + need] for s in starts])


def train(state: TrainState, cfg: ModelConfig, opt: OptimConfig, data: np.ndarray, steps: int,
          batch_size: int = 8, seq_len: int = 64, data_seed: int | None = None,
          callback=None) -> TrainState:
    seed = cfg.seed if data_seed is None else data_seed
    for _ in range(steps):
        batch = sample_batch(data, batch_size, seq_len, seed, state.step)
        loss = train_step(state, cfg, batch, opt)
        if callback is not None:
            callback(state.step, loss)
    return state


# ---------------------------------------------------------------------------
# Checkpoints
#
#   magic    4 bytes  b"TNCK"
#   version  u32
#   length   u64      byte length of the manifest
#   manifest UTF-8 JSON: {"config", "meta", "tensors": [{"name", "offset", "nbytes"}]}
#   records  concatenated tensor records (see numerics), offsets relative to here
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"TNCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    state: TrainState | None = None
    meta: dict = field(default_factory=dict)


def save_checkpoint(path: str | Path, cfg: ModelConfig, params: dict[str, np.ndarray],
                    state: TrainState | None = None, meta: dict | None = None) -> None:
    tensors: dict[str, np.ndarray] = {f"params/{k}": v for k, v in params.items()}
    for l in range(cfg.n_layers):
        tensors[f"decay/layers.{l}"] = cfg.layer_decay(l)
    meta = dict(meta or {})
    if state is not None:
        tensors.update({f"adam_m/{k}": v for k, v in state.m.items()})
        tensors.update({f"adam_v/{k}": v for k, v in state.v.items()})
        tensors["losses"] = np.asarray(state.losses, dtype=np.float64)
        meta["step"] = state.step
    toc, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        rec = encode_tensor(arr)
        toc.append({"name": name, "offset": offset, "nbytes": len(rec)})
        chunks.append(rec)
        offset += len(rec)
    manifest = json.dumps({"config": cfg.to_dict(), "meta": meta, "tensors": toc},
                          sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIQ", CKPT_MAGIC, CKPT_VERSION, len(manifest)))
        fh.write(manifest)
        for rec in chunks:
            fh.write(rec)


def load_checkpoint(path: str | Path, expect: ModelConfig | None = None) -> Checkpoint:
    buf = Path(path).read_bytes()
    if len(buf) < 16:
        raise CheckpointError(f"{path}: file too short to be a checkpoint")
    magic, version, mlen = struct.unpack_from("<4sIQ", buf, 0)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    manifest = json.loads(buf[16:16 + mlen].decode("utf-8"))
    cfg = ModelConfig.from_dict(manifest["config"])
    if expect is not None and expect.to_dict() != cfg.to_dict():
        diff = {k: (v, cfg.to_dict()[k]) for k, v in expect.to_dict().items()
                if cfg.to_dict()[k] != v}
        raise CheckpointError(f"{path}: config mismatch (expected, found): {diff}")
    base = 16 + mlen
    tensors = {}
    for entry in manifest["tensors"]:
        arr, end = decode_tensor(buf, base + entry["offset"])
        if end - base - entry["offset"] != entry["nbytes"]:
            raise CheckpointError(f"{path}: record {entry['name']} has inconsistent length")
        tensors[entry["name"]] = arr
    params = {k[len("params/"):]: v for k, v in tensors.items() if k.startswith("params/")}
    shapes = param_shapes(cfg)
    if set(params) != set(shapes):
        missing, extra = set(shapes) - set(params), set(params) - set(shapes)
        raise CheckpointError(f"{path}: parameters do not match config "
                              f"(missing {sorted(missing)}, unexpected {sorted(extra)})")
    for name, shape in shapes.items():
        if params[name].shape != shape:
            raise CheckpointError(f"{path}: {name} has shape {params[name].shape}, config "
                                  f"implies {shape}")
    for l in range(cfg.n_layers):
        stored = tensors.get(f"decay/layers.{l}")
        if stored is not None and not np.array_equal(stored, cfg.layer_decay(l)):
            raise CheckpointError(f"{path}: stored decay rates of layer {l} disagree with config")
    state = None
    if any(k.startswith("adam_m/") for k in tensors):
        state = TrainState(params,
                           {k[7:]: v for k, v in tensors.items() if k.startswith("adam_m/")},
                           {k[7:]: v for k, v in tensors.items() if k.startswith("adam_v/")},
                           int(manifest["meta"].get("step", 0)),
                           [float(x) for x in tensors.get("losses", [])])
    return Checkpoint(cfg, params, state, manifest["meta"])
