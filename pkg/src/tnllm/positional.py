"""Exponential decay rates, decay-causal masks and relative rotations.

A head's attention score between query position ``s`` and key position
``t`` is ``q_s . k_t * lam**(s - t)`` (for ``s >= t``) with an extra
rotation of dimension pairs by ``theta * (s - t)``.  Both factors split into
a per-query and a per-key part, which is what makes the recurrent decoder in
:mod:`tnllm.inference` possible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import ShapeError, sum_to_shape


@dataclass(frozen=True)
class DecaySchedule:
    """Fixed (non-learnable) per-head, per-layer decay rates.

    Heads and layers are numbered from 1 so that the last layer gets a rate
    of exactly 1.  ``use_temperature`` toggles the ``(1 - l/L)`` layer
    factor.
    """

    num_heads: int
    num_layers: int
    use_temperature: bool = True

    def __post_init__(self) -> None:
        if self.num_heads < 1 or self.num_layers < 1:
            raise ValueError(f"num_heads and num_layers must be positive, got "
                             f"{self.num_heads}, {self.num_layers}")

    def rate(self, h: int, l: int) -> float:
        return decay_rate(self, h, l)

    def layer_rates(self, l: int) -> np.ndarray:
        """Rates for every head of layer ``l`` (1-based), as a float64 vector."""
        return np.array([decay_rate(self, h, l) for h in range(1, self.num_heads + 1)])


def decay_rate(schedule: DecaySchedule, h: int, l: int) -> float:
    if not 1 <= h <= schedule.num_heads:
        raise IndexError(f"head index {h} outside 1..{schedule.num_heads}")
    if not 1 <= l <= schedule.num_layers:
        raise IndexError(f"layer index {l} outside 1..{schedule.num_layers}")
    head_rate = 8.0 * h / schedule.num_heads
    if schedule.use_temperature:
        return math.exp(-head_rate * (1.0 - l / schedule.num_layers))
    return math.exp(-head_rate)


def check_decay(lam) -> np.ndarray:
    lam = np.asarray(lam, dtype=np.float64)
    if np.any(~np.isfinite(lam)) or np.any(lam <= 0) or np.any(lam > 1):
        raise ValueError(f"decay rate must lie in (0, 1], got {lam}")
    return lam


def decay_tile(row0: int, nrows: int, col0: int, ncols: int, log_lam, dtype=np.float64,
               out: np.ndarray | None = None) -> np.ndarray:
    """Block ``[row0:row0+nrows, col0:col0+ncols]`` of the decay mask.

    ``log_lam`` may be a scalar or an array of leading (batch/head) shape;
    the tile then has shape ``log_lam.shape + (nrows, ncols)``.
    """
    log_lam = np.asarray(log_lam, dtype=np.float64)
    diff = (np.arange(row0, row0 + nrows)[:, None] - np.arange(col0, col0 + ncols)[None, :])
    causal = diff >= 0
    expo = np.maximum(diff, 0).astype(np.float64)
    tile = np.exp(expo * log_lam[..., None, None]) * causal
    if out is not None:
        out[...] = tile
        return out
    return tile.astype(dtype, copy=False)


def build_decay_mask(n: int, lam, dtype=np.float64) -> np.ndarray:
    """Full ``n x n`` decay-causal mask, ``M[s, t] = lam**(s - t)`` for ``s >= t``.

    ``lam`` may be an array of per-head rates, giving a stacked mask of shape
    ``lam.shape + (n, n)``.  Powers are taken in log space.
    """
    if n < 1:
        raise ValueError(f"sequence length must be >= 1, got {n}")
    lam = check_decay(lam)
    idx = np.arange(n, dtype=dtype)
    diff = idx[:, None] - idx[None, :]
    causal = diff >= 0
    np.maximum(diff, 0, out=diff)
    log_lam = np.log(lam).astype(dtype)
    if log_lam.ndim == 0:
        diff *= log_lam
        np.exp(diff, out=diff)
        diff *= causal
        return diff
    mask = np.exp(diff * log_lam[..., None, None])
    mask *= causal
    return mask


# ---------------------------------------------------------------------------
# Rotations
# ---------------------------------------------------------------------------

@dataclass
class LrpeParams:
    """Learnable rotation angles for one head (or shared across heads).

    ``theta`` has ``head_dim // 2`` entries, or shape ``(H, head_dim // 2)``
    when each head keeps its own angles.
    """

    theta: np.ndarray

    @property
    def head_dim(self) -> int:
        return 2 * self.theta.shape[-1]

    @classmethod
    def init(cls, head_dim: int, num_heads: int | None = None, base: float = 10000.0,
             dtype=np.float64) -> "LrpeParams":
        return cls(init_theta(head_dim, num_heads, base, dtype))


def init_theta(head_dim: int, num_heads: int | None = None, base: float = 10000.0,
               dtype=np.float64) -> np.ndarray:
    """Geometric frequency ladder ``base ** (-2j / head_dim)``."""
    if head_dim < 2 or head_dim % 2:
        raise ValueError(f"head_dim must be a positive even number, got {head_dim}")
    theta = base ** (-2.0 * np.arange(head_dim // 2) / head_dim)
    if num_heads is not None:
        theta = np.tile(theta, (num_heads, 1))
    return theta.astype(dtype)


def _angles(n: int, theta: np.ndarray, position_offset: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    pos = np.arange(position_offset, position_offset + n, dtype=np.float64)
    ang = pos[:, None] * np.asarray(theta, dtype=np.float64)[..., None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def apply_lrpe(x: np.ndarray, theta, position_offset: int = 0) -> np.ndarray:
    """Rotate each dimension pair ``(x[2j], x[2j+1])`` of row ``r`` by ``theta[j] * (offset + r)``.

    ``x`` has shape ``(..., n, head_dim)``; ``theta`` has shape
    ``(..., head_dim // 2)`` and broadcasts against ``x``'s leading axes
    (e.g. ``(H, head_dim // 2)`` against ``(B, H, n, head_dim)``).
    """
    if isinstance(theta, LrpeParams):
        theta = theta.theta
    x = np.asarray(x)
    if x.shape[-1] % 2:
        raise ShapeError(f"head_dim must be even for rotation, got {x.shape[-1]}")
    theta = np.asarray(theta)
    if theta.shape[-1] != x.shape[-1] // 2:
        raise ShapeError(f"theta has {theta.shape[-1]} angles, head_dim {x.shape[-1]} needs "
                         f"{x.shape[-1] // 2}")
    if position_offset < 0:
        raise ValueError("position_offset must be >= 0")
    cos, sin = _angles(x.shape[-2], theta, position_offset, x.dtype)
    xe, xo = x[..., 0::2], x[..., 1::2]
    out = np.empty(np.broadcast_shapes(x.shape, cos.shape[:-1] + (x.shape[-1],)), dtype=x.dtype)
    out[..., 0::2] = cos * xe - sin * xo
    out[..., 1::2] = sin * xe + cos * xo
    return out


def lrpe_backward(dy: np.ndarray, y: np.ndarray, theta: np.ndarray,
                  position_offset: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of :func:`apply_lrpe` given its output ``y``.

    Returns ``(dx, dtheta)`` with ``dtheta`` reduced to ``theta``'s shape.
    """
    theta = np.asarray(theta)
    n = y.shape[-2]
    cos, sin = _angles(n, theta, position_offset, y.dtype)
    de, do = dy[..., 0::2], dy[..., 1::2]
    dx = np.empty_like(dy)
    # inverse rotation
    dx[..., 0::2] = cos * de + sin * do
    dx[..., 1::2] = -sin * de + cos * do
    ye, yo = y[..., 0::2], y[..., 1::2]
    pos = np.arange(position_offset, position_offset + n, dtype=y.dtype)[:, None]
    per_row = (do * ye - de * yo) * pos
    dtheta = sum_to_shape(per_row.sum(axis=-2), theta.shape)
    return dx, dtheta
