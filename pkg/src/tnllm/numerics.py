"""Dense-array substrate shared by every other module.

Arrays are plain ``numpy.ndarray`` objects (row-major, C-contiguous).  This
module adds the few things numpy does not give us directly: loud shape
checks, the activation functions used by the mixers, a seeded generator, an
allocation tracker used for the memory benchmarks, and a tiny binary tensor
format used by fixtures and checkpoints.
"""

from __future__ import annotations

import io
import struct
import threading
from pathlib import Path
from typing import BinaryIO

import numpy as np

DTYPES = {"float32": np.float32, "float64": np.float64}

TENSOR_MAGIC = b"TNSR"
_DTYPE_TAGS = {
    np.dtype("<f4"): 1,
    np.dtype("<f8"): 2,
    np.dtype("<i8"): 3,
    np.dtype("<i4"): 4,
}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class ShapeError(ValueError):
    """Raised when operands have incompatible shapes."""


def resolve_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str):
        try:
            return np.dtype(DTYPES[dtype])
        except KeyError:
            raise ValueError(f"unknown dtype {dtype!r}; expected one of {sorted(DTYPES)}") from None
    return np.dtype(dtype)


# ---------------------------------------------------------------------------
# Core operations
# ---------------------------------------------------------------------------

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product over the last two axes with an explicit shape check."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return a @ b


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def elu(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    return np.where(x >= 0, x, np.expm1(np.minimum(x, 0)))


def one_plus_elu(x: np.ndarray) -> np.ndarray:
    return 1.0 + elu(x)


def swish(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


def _check_same(name: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def elementwise(op: str, a, b=None) -> np.ndarray:
    """Apply ``op`` pointwise.

    Binary ops (``add``, ``mul``) require equal shapes; ``scale`` takes a
    scalar ``b``.  Unary ops: ``elu``, ``one_plus_elu``, ``swish``,
    ``sigmoid``.
    """
    a = np.asarray(a)
    if op in ("add", "mul"):
        if b is None:
            raise ValueError(f"{op} needs a second operand")
        b = np.asarray(b)
        _check_same(op, a, b)
        return a + b if op == "add" else a * b
    if op == "scale":
        if b is None or np.ndim(b) != 0:
            raise ValueError("scale needs a scalar operand")
        return a * b
    unary = {"elu": elu, "one_plus_elu": one_plus_elu, "swish": swish, "sigmoid": sigmoid}
    if op not in unary:
        raise ValueError(f"unknown elementwise op {op!r}")
    return unary[op](a)


def l2_norm_lastdim(x: np.ndarray) -> np.ndarray:
    """Euclidean norm over the final axis, keeping it as a size-1 axis."""
    x = np.asarray(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError(f"l2_norm_lastdim needs a non-empty last axis, got {x.shape}")
    return np.sqrt(np.sum(x * x, axis=-1, keepdims=True))


def sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Seeded initialisation
# ---------------------------------------------------------------------------

def make_rng(seed: int | list[int] | None) -> np.random.Generator:
    return np.random.default_rng(seed)


def normal(rng: np.random.Generator, shape, std: float = 1.0, dtype="float64") -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(resolve_dtype(dtype))


def uniform(rng: np.random.Generator, shape, low: float = -1.0, high: float = 1.0,
            dtype="float64") -> np.ndarray:
    return rng.uniform(low, high, shape).astype(resolve_dtype(dtype))


# ---------------------------------------------------------------------------
# Allocation tracking
# ---------------------------------------------------------------------------

class MemoryTracker:
    """Counts bytes of instrumented intermediates and records the high-water mark.

    Kernels call :meth:`alloc` when they materialise a buffer and
    :meth:`free` when it goes out of use.  Only the algorithmic
    intermediates are counted, not interpreter overhead.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.current = 0
        self.peak = 0

    def alloc(self, nbytes: int) -> None:
        with self._lock:
            self.current += int(nbytes)
            self.peak = max(self.peak, self.current)

    def free(self, nbytes: int) -> None:
        with self._lock:
            self.current -= int(nbytes)

    def track(self, arr: np.ndarray) -> np.ndarray:
        self.alloc(arr.nbytes)
        return arr

    def reset(self) -> None:
        with self._lock:
            self.current = 0
            self.peak = 0


class _NullTracker(MemoryTracker):
    def alloc(self, nbytes: int) -> None:
        pass

    def free(self, nbytes: int) -> None:
        pass


NULL_TRACKER = _NullTracker()


# ---------------------------------------------------------------------------
# Binary tensor format
#
#   magic  4 bytes  b"TNSR"
#   dtype  u8       1=f32 2=f64 3=i64 4=i32
#   rank   u8
#   shape  rank x u64
#   data   little-endian, row-major
# ---------------------------------------------------------------------------

def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    le = arr.dtype.newbyteorder("<")
    if le not in _DTYPE_TAGS:
        raise TypeError(f"unsupported dtype for serialisation: {arr.dtype}")
    if arr.ndim > 255:
        raise ValueError("rank too large")
    head = struct.pack("<4sBB", TENSOR_MAGIC, _DTYPE_TAGS[le], arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=le).tobytes()


def decode_tensor(buf: bytes | memoryview, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one tensor record starting at ``offset``; returns it and the end offset."""
    magic, tag, rank = struct.unpack_from("<4sBB", buf, offset)
    if magic != TENSOR_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r} at offset {offset}")
    if tag not in _TAG_DTYPES:
        raise ValueError(f"unknown dtype tag {tag}")
    offset += 6
    shape = struct.unpack_from(f"<{rank}Q", buf, offset)
    offset += 8 * rank
    dtype = _TAG_DTYPES[tag]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    nbytes = count * dtype.itemsize
    if offset + nbytes > len(buf):
        raise ValueError("truncated tensor record")
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=offset).reshape(shape)
    return data.astype(dtype.newbyteorder("="), copy=True), offset + nbytes


def save_tensor(target: str | Path | BinaryIO, arr: np.ndarray) -> None:
    payload = encode_tensor(arr)
    if isinstance(target, (str, Path)):
        Path(target).write_bytes(payload)
    else:
        target.write(payload)


def load_tensor(source: str | Path | BinaryIO) -> np.ndarray:
    if isinstance(source, (str, Path)):
        buf = Path(source).read_bytes()
    elif isinstance(source, io.BytesIO):
        buf = source.getvalue()
    else:
        buf = source.read()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise ValueError(f"trailing bytes after tensor record ({len(buf) - end})")
    return arr
