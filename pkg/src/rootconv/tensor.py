"""Dense tensor helpers and the GEMM kernels every operator is built on.

Tensors are plain ``numpy.ndarray`` values in NCHW order (float32 in
production paths, float64 for verification).  Two-dimensional array views
play the role of matrix views: any strided 2-D slice of a larger buffer can
be handed to :func:`gemm`.

The kernels fix the summation order (``k`` ascending for every output
element), so :func:`gemm_batched` is bitwise identical to calling
:func:`gemm` once per batch entry.
"""
from __future__ import annotations

import contextlib
import os
import struct
from typing import Iterator, Sequence

import numba
import numpy as np

__all__ = [
    "ShapeError",
    "MacCounter",
    "count_macs",
    "gemm",
    "gemm_batched",
    "elementwise",
    "set_threads",
    "save_tensor",
    "load_tensor",
    "tensor_to_bytes",
    "tensor_from_bytes",
]

RTN_MAGIC = b"RTN1"
_COL_BLOCK = 256
_ROW_BLOCK = 4


class ShapeError(ValueError):
    """Operand extents are incompatible."""


# --------------------------------------------------------------------------
# multiply-add accounting

class MacCounter:
    """Accumulates the scalar multiply-adds executed by the GEMM kernels."""

    def __init__(self) -> None:
        self.total = 0

    def add(self, n: int) -> None:
        self.total += int(n)


_active_counters: list[MacCounter] = []


@contextlib.contextmanager
def count_macs() -> Iterator[MacCounter]:
    """Count multiply-adds performed inside the ``with`` block.

    Counters nest; an inner block's work is also credited to outer ones.
    """
    counter = MacCounter()
    _active_counters.append(counter)
    try:
        yield counter
    finally:
        _active_counters.remove(counter)


def _credit(n: int) -> None:
    for c in _active_counters:
        c.add(n)


# --------------------------------------------------------------------------
# kernels

@numba.njit(cache=True, nogil=True)
def _gemm_kernel(a, b, out, accumulate):
    # Register-blocked over 4 output rows x 256 columns.  Each output element
    # is summed from k = 0 upward into a zeroed accumulator, then stored (or
    # added to the prior value when accumulating).
    m, kdim = a.shape
    n = b.shape[1]
    acc = np.zeros((_ROW_BLOCK, _COL_BLOCK), dtype=out.dtype)
    for j0 in range(0, n, _COL_BLOCK):
        j1 = min(j0 + _COL_BLOCK, n)
        w = j1 - j0
        for i0 in range(0, m, _ROW_BLOCK):
            rows = min(i0 + _ROW_BLOCK, m) - i0
            for ii in range(rows):
                for j in range(w):
                    acc[ii, j] = 0
            for k in range(kdim):
                brow = b[k, j0:j1]
                for ii in range(rows):
                    aik = a[i0 + ii, k]
                    r = acc[ii]
                    for j in range(w):
                        r[j] += aik * brow[j]
            for ii in range(rows):
                if accumulate:
                    for j in range(w):
                        out[i0 + ii, j0 + j] += acc[ii, j]
                else:
                    for j in range(w):
                        out[i0 + ii, j0 + j] = acc[ii, j]


@numba.njit(cache=True, nogil=True)
def _gemm_batched_kernel(a, b, out, accumulate):
    for t in range(a.shape[0]):
        _gemm_kernel(a[t], b[t], out[t], accumulate)


@numba.njit(cache=True, nogil=True, parallel=True)
def _gemm_batched_kernel_par(a, b, out, accumulate):
    for t in numba.prange(a.shape[0]):
        _gemm_kernel(a[t], b[t], out[t], accumulate)


_threads = 1


def set_threads(n: int | None = None) -> int:
    """Bound kernel parallelism; falls back to ``ROOTCONV_THREADS``."""
    global _threads
    if n is None:
        env = os.environ.get("ROOTCONV_THREADS")
        if not env:
            return _threads
        n = int(env)
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    if n > 1:
        numba.set_num_threads(n)
    _threads = n
    return n


def _result_dtype(a: np.ndarray, b: np.ndarray) -> np.dtype:
    if a.dtype == np.float64 or b.dtype == np.float64:
        return np.dtype(np.float64)
    return np.dtype(np.float32)


def gemm(a: np.ndarray, b: np.ndarray, out: np.ndarray | None = None,
         accumulate: bool = False) -> np.ndarray:
    """Matrix product ``a @ b`` with a fixed (k ascending) summation order.

    With ``accumulate`` the product is added to the existing contents of
    ``out``.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"gemm expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    dt = _result_dtype(a, b)
    a = np.asarray(a, dtype=dt)
    b = np.asarray(b, dtype=dt)
    m, n = a.shape[0], b.shape[1]
    if out is None:
        if accumulate:
            raise ValueError("accumulate requires an output buffer")
        out = np.empty((m, n), dtype=dt)
    elif out.shape != (m, n) or out.dtype != dt:
        raise ShapeError(f"output buffer {out.shape}/{out.dtype} does not fit {(m, n)}/{dt}")
    _gemm_kernel(a, b, out, accumulate)
    _credit(m * n * a.shape[1])
    return out


def _stack(mats: Sequence[np.ndarray], dt: np.dtype) -> np.ndarray:
    if isinstance(mats, np.ndarray) and mats.ndim == 3:
        return np.asarray(mats, dtype=dt)
    return np.stack([np.asarray(m, dtype=dt) for m in mats])


def gemm_batched(a: Sequence[np.ndarray] | np.ndarray,
                 b: Sequence[np.ndarray] | np.ndarray,
                 out: Sequence[np.ndarray] | np.ndarray | None = None,
                 accumulate: bool = False):
    """Many independent products ``a[t] @ b[t]`` under a single dispatch.

    ``a`` and ``b`` are either 3-D stacks or equal-length sequences of 2-D
    matrices.  Entries of differing shapes are bucketed by shape and each
    bucket runs as one kernel call.  Returns a 3-D array when every entry
    has the same shape, otherwise a list.  If ``out`` is given the results
    are written there as well.
    """
    na, nb = len(a), len(b)
    if na != nb:
        raise ShapeError(f"batch sizes differ: {na} vs {nb}")
    if out is not None and len(out) != na:
        raise ShapeError(f"output batch has {len(out)} entries, expected {na}")
    if na == 0:
        return [] if out is None else out
    stacked = (isinstance(a, np.ndarray) and a.ndim == 3
               and isinstance(b, np.ndarray) and b.ndim == 3)
    if stacked:
        if a.shape[2] != b.shape[1]:
            raise ShapeError(f"batch entry 0: cannot multiply {a.shape[1:]} by {b.shape[1:]}")
        if out is not None and tuple(out[0].shape) != (a.shape[1], b.shape[2]):
            raise ShapeError(f"batch entry 0: output shape {out[0].shape} is wrong")
    else:
        for t in range(na):
            if a[t].ndim != 2 or b[t].ndim != 2 or a[t].shape[1] != b[t].shape[0]:
                raise ShapeError(f"batch entry {t}: cannot multiply {a[t].shape} by {b[t].shape}")
            if out is not None and out[t].shape != (a[t].shape[0], b[t].shape[1]):
                raise ShapeError(f"batch entry {t}: output shape {out[t].shape} is wrong")

    if stacked:
        dt = _result_dtype(a, b)
    else:
        dt = np.dtype(np.float64) if any(
            _result_dtype(a[t], b[t]) == np.float64 for t in range(na)) else np.dtype(np.float32)

    uniform = stacked or (
        len({x.shape for x in a}) == 1 and len({x.shape for x in b}) == 1)
    if uniform:
        A, B = _stack(a, dt), _stack(b, dt)
        if accumulate:
            if out is None:
                raise ValueError("accumulate requires output buffers")
            C = _stack(out, dt)
        else:
            C = np.empty((na, A.shape[1], B.shape[2]), dtype=dt)
        kernel = _gemm_batched_kernel_par if _threads > 1 and na > 1 else _gemm_batched_kernel
        kernel(A, B, C, accumulate)
        _credit(na * A.shape[1] * A.shape[2] * B.shape[2])
        if out is not None:
            if isinstance(out, np.ndarray) and out.ndim == 3:
                out[...] = C
            else:
                for t in range(na):
                    out[t][...] = C[t]
            return out
        return C

    buckets: dict[tuple, list[int]] = {}
    for t in range(na):
        buckets.setdefault((a[t].shape, b[t].shape), []).append(t)
    results: list[np.ndarray | None] = [None] * na
    for idx in buckets.values():
        sub_out = None if out is None else [out[t] for t in idx]
        res = gemm_batched([a[t] for t in idx], [b[t] for t in idx], sub_out, accumulate)
        for pos, t in enumerate(idx):
            results[t] = res[pos]
    return out if out is not None else results


# --------------------------------------------------------------------------
# pointwise math

def elementwise(op: str, x: np.ndarray, y: np.ndarray | float | None = None) -> np.ndarray:
    """Pointwise ``add``, ``sub``, ``mul``, ``scale``, ``relu`` or ``relu_grad``.

    ``relu_grad(x, g)`` passes ``g`` where ``x > 0``.  Operand shapes must
    match exactly; nothing is broadcast.
    """
    if op == "relu":
        return np.maximum(x, 0).astype(x.dtype, copy=False)
    if op == "scale":
        if not np.isscalar(y):
            raise ShapeError("scale takes a scalar factor")
        return (x * x.dtype.type(y)).astype(x.dtype, copy=False)
    if y is None or np.isscalar(y):
        raise ShapeError(f"{op} needs a tensor operand")
    if x.shape != y.shape:
        raise ShapeError(f"{op}: shape mismatch {x.shape} vs {y.shape}")
    if op == "add":
        return x + y
    if op == "sub":
        return x - y
    if op == "mul":
        return x * y
    if op == "relu_grad":
        return np.where(x > 0, y, 0).astype(y.dtype, copy=False)
    raise ValueError(f"unknown elementwise op {op!r}")


# --------------------------------------------------------------------------
# RTN1 serialization: magic, 4 x u32 extents (LE), raw f32 payload (LE)

def tensor_to_bytes(x: np.ndarray) -> bytes:
    if x.ndim > 4:
        raise ShapeError(f"RTN1 holds at most 4 extents, got {x.shape}")
    if x.size == 0:
        raise ShapeError("RTN1 extents must be >= 1")
    dims = (1,) * (4 - x.ndim) + tuple(x.shape)
    payload = np.ascontiguousarray(x, dtype="<f4").tobytes()
    return RTN_MAGIC + struct.pack("<4I", *dims) + payload


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 20 or buf[:4] != RTN_MAGIC:
        raise ValueError("not an RTN1 tensor")
    dims = struct.unpack("<4I", buf[4:20])
    count = int(np.prod(dims))
    if len(buf) - 20 != 4 * count:
        raise ValueError(f"RTN1 payload holds {len(buf) - 20} bytes, expected {4 * count}")
    return np.frombuffer(buf, dtype="<f4", offset=20).astype(np.float32).reshape(dims)


def save_tensor(path: str | os.PathLike, x: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(tensor_to_bytes(x))


def load_tensor(path: str | os.PathLike, shape: Sequence[int] | None = None) -> np.ndarray:
    """Read an RTN1 file; ``shape`` restores tensors stored with fewer than 4 dims."""
    with open(path, "rb") as f:
        x = tensor_from_bytes(f.read())
    return x.reshape(tuple(shape)) if shape is not None else x
