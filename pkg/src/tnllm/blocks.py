"""Normalisations, the gated linear-attention token mixer, the simple GLU
channel mixer, and the pre-norm residual block that stacks them.

Every layer comes as a ``*_fwd`` / ``*_bwd`` pair.  ``*_fwd`` returns the
output and a cache; ``*_bwd`` takes the upstream gradient and that cache and
returns the input gradient plus a dict of parameter gradients keyed like the
parameter dict.  Inputs are ``(..., n, d)`` arrays; leading axes are batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import attention
from .attention import BlockConfig
from .numerics import ShapeError, normal, one_plus_elu, sigmoid, swish
from .positional import apply_lrpe, init_theta, lrpe_backward

NORM_VARIANTS = ("srms", "rms", "layer")
ACTIVATIONS = ("one_plus_elu", "swish", "none")
GLU_ACTIVATIONS = ("none", "swish")
GLA_MODES = ("lightning", "reference")
_MODE_ALIASES = {"parallel_lightning": "lightning", "parallel_reference": "reference"}


def _flat(x: np.ndarray) -> np.ndarray:
    return x.reshape(-1, x.shape[-1])


def _weight_grad(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return _flat(x).T @ _flat(dy)


# ---------------------------------------------------------------------------
# Normalisation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NormKind:
    variant: str = "srms"
    eps: float = 1e-6

    def __post_init__(self) -> None:
        if self.variant not in NORM_VARIANTS:
            raise ValueError(f"unknown norm {self.variant!r}; expected one of {NORM_VARIANTS}")
        if not self.eps > 0:
            raise ValueError("norm eps must be positive")

    def init(self, d: int, dtype=np.float64) -> dict[str, np.ndarray]:
        if self.variant == "srms":
            return {}
        params = {"weight": np.ones(d, dtype=dtype)}
        if self.variant == "layer":
            params["bias"] = np.zeros(d, dtype=dtype)
        return params


def srmsnorm(x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Parameter-free ``x * sqrt(d) / max(||x||, eps)`` over the last axis."""
    x = np.asarray(x)
    d = x.shape[-1]
    if d < 1:
        raise ShapeError("srmsnorm needs a non-empty last axis")
    r = np.maximum(np.sqrt(np.sum(x * x, axis=-1, keepdims=True)), eps)
    return x * (math.sqrt(d) / r)


def srmsnorm_backward(dy: np.ndarray, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    d = x.shape[-1]
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    r = np.maximum(norm, eps)
    proj = np.sum(x * dy, axis=-1, keepdims=True) / (r * r)
    # the clamp makes the denominator constant, which drops the projection term
    proj = np.where(norm > eps, proj, 0.0)
    return (math.sqrt(d) / r) * (dy - x * proj)


def norm_fwd(kind: NormKind, x: np.ndarray, params: dict[str, np.ndarray]):
    if kind.variant == "srms":
        return srmsnorm(x, kind.eps), (kind, x)
    if kind.variant == "rms":
        inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + kind.eps)
        xhat = x * inv
        return xhat * params["weight"], (kind, xhat, inv, params)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt(np.mean(xc * xc, axis=-1, keepdims=True) + kind.eps)
    xhat = xc * inv
    return xhat * params["weight"] + params["bias"], (kind, xhat, inv, params)


def norm_bwd(dy: np.ndarray, cache) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    kind = cache[0]
    if kind.variant == "srms":
        return srmsnorm_backward(dy, cache[1], kind.eps), {}
    _, xhat, inv, params = cache
    grads = {"weight": _flat(dy * xhat).sum(axis=0)}
    dxhat = dy * params["weight"]
    if kind.variant == "rms":
        dx = inv * (dxhat - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
    else:
        grads["bias"] = _flat(dy).sum(axis=0)
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
    return dx, grads


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

def act_fwd(name: str, x: np.ndarray) -> np.ndarray:
    if name == "one_plus_elu":
        return one_plus_elu(x)
    if name == "swish":
        return swish(x)
    if name == "none":
        return x
    raise ValueError(f"unknown activation {name!r}")


def act_bwd(name: str, dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    if name == "one_plus_elu":
        return dy * np.where(x >= 0, 1.0, np.exp(np.minimum(x, 0)))
    if name == "swish":
        s = sigmoid(x)
        return dy * (s * (1.0 + x * (1.0 - s)))
    if name == "none":
        return dy
    raise ValueError(f"unknown activation {name!r}")


# ---------------------------------------------------------------------------
# Gated linear attention
# ---------------------------------------------------------------------------

def split_heads(x: np.ndarray, h: int) -> np.ndarray:
    """``(..., n, h*dh) -> (..., h, n, dh)``."""
    *lead, n, d = x.shape
    return np.swapaxes(x.reshape(*lead, n, h, d // h), -2, -3)


def merge_heads(x: np.ndarray) -> np.ndarray:
    """``(..., h, n, dh) -> (..., n, h*dh)``."""
    *lead, h, n, dh = x.shape
    return np.ascontiguousarray(np.swapaxes(x, -2, -3)).reshape(*lead, n, h * dh)


@dataclass
class GlaParams:
    """Weights and settings of one gated linear-attention mixer.

    Projections map ``d_model -> d_inner`` (``w_o`` maps back); ``d_inner``
    equals ``d_model`` for a full layer and ``d_model / W`` for one simulated
    tensor-parallel shard.  ``decay`` holds one fixed rate per head;
    ``theta`` is ``(H, head_dim/2)`` per head or ``(head_dim/2,)`` shared.
    """

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_u: np.ndarray | None
    w_o: np.ndarray
    theta: np.ndarray
    decay: np.ndarray
    num_heads: int
    activation: str = "one_plus_elu"
    norm_mode: str = "merged"
    eps: float = 1e-6

    def __post_init__(self) -> None:
        d_model, d_inner = self.w_q.shape
        if d_inner % self.num_heads:
            raise ValueError(f"inner width {d_inner} not divisible by {self.num_heads} heads")
        for name in ("w_k", "w_v") + (("w_u",) if self.w_u is not None else ()):
            if getattr(self, name).shape != (d_model, d_inner):
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, "
                                 f"expected {(d_model, d_inner)}")
        if self.w_o.shape != (d_inner, d_model):
            raise ShapeError(f"w_o has shape {self.w_o.shape}, expected {(d_inner, d_model)}")
        if self.theta.shape[-1] * 2 != self.head_dim:
            raise ShapeError(f"theta last axis {self.theta.shape[-1]} does not match head_dim "
                             f"{self.head_dim}")
        self.decay = np.asarray(self.decay, dtype=np.float64).reshape(-1)
        if self.decay.shape != (self.num_heads,):
            raise ShapeError(f"need one decay per head, got {self.decay.shape}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.norm_mode not in ("merged", "per_head"):
            raise ValueError(f"unknown norm_mode {self.norm_mode!r}")

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_inner(self) -> int:
        return self.w_q.shape[1]

    @property
    def head_dim(self) -> int:
        return self.d_inner // self.num_heads

    @property
    def use_gate(self) -> bool:
        return self.w_u is not None

    def arrays(self) -> dict[str, np.ndarray]:
        names = ["w_q", "w_k", "w_v", "w_u", "w_o", "theta"]
        return {k: getattr(self, k) for k in names if getattr(self, k) is not None}

    @classmethod
    def init(cls, rng: np.random.Generator, d_model: int, num_heads: int, decay, *,
             use_gate: bool = True, activation: str = "one_plus_elu", norm_mode: str = "merged",
             shared_theta: bool = False, theta_base: float = 10000.0, std: float = 0.02,
             out_std: float | None = None, eps: float = 1e-6, dtype="float64") -> "GlaParams":
        if d_model % num_heads:
            raise ValueError(f"d_model {d_model} not divisible by {num_heads} heads")
        out_std = std if out_std is None else out_std
        w = {name: normal(rng, (d_model, d_model), std, dtype) for name in ("w_q", "w_k", "w_v")}
        w_u = normal(rng, (d_model, d_model), std, dtype) if use_gate else None
        w_o = normal(rng, (d_model, d_model), out_std, dtype)
        theta = init_theta(d_model // num_heads, None if shared_theta else num_heads, theta_base,
                           dtype=np.dtype(w_o.dtype))
        return cls(w_u=w_u, w_o=w_o, theta=theta, decay=decay, num_heads=num_heads,
                   activation=activation, norm_mode=norm_mode, eps=eps, **w)


def _attend(q, k, v, decay, mode, block):
    if mode == "reference":
        return attention.reference_forward(q, k, v, decay)
    return attention.lightning_forward(q, k, v, decay, block)


def _attend_bwd(q, k, v, decay, da, mode, block):
    if mode == "reference":
        return attention.reference_backward(q, k, v, decay, da)
    return attention.lightning_backward(q, k, v, decay, da, block)


def _resolve_mode(mode: str) -> str:
    mode = _MODE_ALIASES.get(mode, mode)
    if mode not in GLA_MODES:
        raise ValueError(f"unknown attention mode {mode!r}; expected one of {GLA_MODES}")
    return mode


def gla_fwd(x: np.ndarray, p: GlaParams, mode: str = "lightning",
            block: BlockConfig | None = None):
    mode = _resolve_mode(mode)
    if x.shape[-1] != p.d_model:
        raise ShapeError(f"input width {x.shape[-1]} does not match d_model {p.d_model}")
    h = p.num_heads
    xq = x @ p.w_q
    xk = x @ p.w_k
    qh = split_heads(act_fwd(p.activation, xq), h)
    kh = split_heads(act_fwd(p.activation, xk), h)
    vh = split_heads(x @ p.w_v, h)
    qr = apply_lrpe(qh, p.theta)
    kr = apply_lrpe(kh, p.theta)
    ah = _attend(qr, kr, vh, p.decay, mode, block)
    if p.norm_mode == "per_head":
        nrm = merge_heads(srmsnorm(ah, p.eps))
    else:
        nrm = srmsnorm(merge_heads(ah), p.eps)
    u = x @ p.w_u if p.use_gate else None
    g = nrm * u if u is not None else nrm
    out = g @ p.w_o
    cache = dict(x=x, p=p, mode=mode, block=block, xq=xq, xk=xk, qr=qr, kr=kr, vh=vh,
                 ah=ah, nrm=nrm, u=u, g=g)
    return out, cache


def gla_forward(x: np.ndarray, p: GlaParams, mode: str = "lightning",
                block: BlockConfig | None = None) -> np.ndarray:
    return gla_fwd(x, p, mode, block)[0]


def gla_bwd(dout: np.ndarray, c) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    p: GlaParams = c["p"]
    x = c["x"]
    h = p.num_heads
    grads = {"w_o": _weight_grad(c["g"], dout)}
    dg = dout @ p.w_o.T
    if p.use_gate:
        du = dg * c["nrm"]
        dnrm = dg * c["u"]
        grads["w_u"] = _weight_grad(x, du)
        dx = du @ p.w_u.T
    else:
        dnrm = dg
        dx = np.zeros_like(x)
    if p.norm_mode == "per_head":
        dah = srmsnorm_backward(split_heads(dnrm, h), c["ah"], p.eps)
    else:
        dah = split_heads(srmsnorm_backward(dnrm, merge_heads(c["ah"]), p.eps), h)
    dqr, dkr, dvh = _attend_bwd(c["qr"], c["kr"], c["vh"], p.decay, dah, c["mode"], c["block"])
    dqh, dth_q = lrpe_backward(dqr, c["qr"], p.theta)
    dkh, dth_k = lrpe_backward(dkr, c["kr"], p.theta)
    grads["theta"] = dth_q + dth_k
    dxq = act_bwd(p.activation, merge_heads(dqh), c["xq"])
    dxk = act_bwd(p.activation, merge_heads(dkh), c["xk"])
    dxv = merge_heads(dvh)
    grads["w_q"] = _weight_grad(x, dxq)
    grads["w_k"] = _weight_grad(x, dxk)
    grads["w_v"] = _weight_grad(x, dxv)
    dx += dxq @ p.w_q.T + dxk @ p.w_k.T + dxv @ p.w_v.T
    return dx, grads


# ---------------------------------------------------------------------------
# Simple GLU
# ---------------------------------------------------------------------------

@dataclass
class SgluParams:
    w_v: np.ndarray
    w_u: np.ndarray
    w_o: np.ndarray
    activation: str = "none"

    def __post_init__(self) -> None:
        d, e = self.w_v.shape
        if e < 1:
            raise ValueError("SGLU hidden width must be >= 1")
        if self.w_u.shape != (d, e) or self.w_o.shape != (e, d):
            raise ShapeError(f"inconsistent SGLU shapes {self.w_v.shape}, {self.w_u.shape}, "
                             f"{self.w_o.shape}")
        if self.activation not in GLU_ACTIVATIONS:
            raise ValueError(f"unknown GLU activation {self.activation!r}")

    def arrays(self) -> dict[str, np.ndarray]:
        return {"w_v": self.w_v, "w_u": self.w_u, "w_o": self.w_o}

    @classmethod
    def init(cls, rng: np.random.Generator, d_model: int, hidden: int, *, activation="none",
             std: float = 0.02, out_std: float | None = None, dtype="float64") -> "SgluParams":
        out_std = std if out_std is None else out_std
        return cls(normal(rng, (d_model, hidden), std, dtype),
                   normal(rng, (d_model, hidden), std, dtype),
                   normal(rng, (hidden, d_model), out_std, dtype), activation)


def glu_hidden(d_model: int, ratio: float = 8 / 3, multiple: int = 8) -> int:
    return max(multiple, multiple * int(round(ratio * d_model / multiple)))


def sglu_fwd(x: np.ndarray, p: SgluParams):
    v = x @ p.w_v
    pre_u = x @ p.w_u
    u = act_fwd(p.activation, pre_u)
    hid = v * u
    return hid @ p.w_o, (x, p, v, pre_u, u, hid)


def sglu_forward(x: np.ndarray, p: SgluParams) -> np.ndarray:
    return sglu_fwd(x, p)[0]


def sglu_bwd(dout: np.ndarray, cache) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    x, p, v, pre_u, u, hid = cache
    dhid = dout @ p.w_o.T
    dv = dhid * u
    dpre_u = act_bwd(p.activation, dhid * v, pre_u)
    grads = {"w_o": _weight_grad(hid, dout), "w_v": _weight_grad(x, dv),
             "w_u": _weight_grad(x, dpre_u)}
    return dv @ p.w_v.T + dpre_u @ p.w_u.T, grads


# ---------------------------------------------------------------------------
# Pre-norm residual block
# ---------------------------------------------------------------------------

@dataclass
class BlockParams:
    gla: GlaParams
    sglu: SgluParams
    norm: NormKind = field(default_factory=NormKind)
    norm1: dict[str, np.ndarray] = field(default_factory=dict)
    norm2: dict[str, np.ndarray] = field(default_factory=dict)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"norm1.{k}": v for k, v in self.norm1.items()}
        out.update({f"gla.{k}": v for k, v in self.gla.arrays().items()})
        out.update({f"norm2.{k}": v for k, v in self.norm2.items()})
        out.update({f"sglu.{k}": v for k, v in self.sglu.arrays().items()})
        return out


def block_fwd(x: np.ndarray, bp: BlockParams, mode: str = "lightning",
              block: BlockConfig | None = None):
    h1, c_n1 = norm_fwd(bp.norm, x, bp.norm1)
    a, c_gla = gla_fwd(h1, bp.gla, mode, block)
    x1 = x + a
    h2, c_n2 = norm_fwd(bp.norm, x1, bp.norm2)
    m, c_glu = sglu_fwd(h2, bp.sglu)
    return x1 + m, (c_n1, c_gla, c_n2, c_glu)


def block_bwd(dout: np.ndarray, cache) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    c_n1, c_gla, c_n2, c_glu = cache
    grads: dict[str, np.ndarray] = {}
    dh2, g = sglu_bwd(dout, c_glu)
    grads.update({f"sglu.{k}": v for k, v in g.items()})
    dx1, g = norm_bwd(dh2, c_n2)
    grads.update({f"norm2.{k}": v for k, v in g.items()})
    dx1 = dx1 + dout
    dh1, g = gla_bwd(dx1, c_gla)
    grads.update({f"gla.{k}": v for k, v in g.items()})
    dx, g = norm_bwd(dh1, c_n1)
    grads.update({f"norm1.{k}": v for k, v in g.items()})
    return dx + dx1, grads


def block_forward(x: np.ndarray, gla: GlaParams, sglu: SgluParams, norm: NormKind | None = None,
                  norm1: dict | None = None, norm2: dict | None = None, mode: str = "lightning",
                  block: BlockConfig | None = None) -> np.ndarray:
    bp = BlockParams(gla, sglu, norm or NormKind(), norm1 or {}, norm2 or {})
    return block_fwd(x, bp, mode, block)[0]
