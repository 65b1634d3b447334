"""Dense tensor primitives shared by the attention kernels.

All operations preserve the dtype of their inputs and accept float32 or
float64 only.  Reductions use numpy's fixed pairwise summation tree, which
is a deterministic function of the operand shape, so repeated runs on the
same machine at the same thread count produce bitwise identical results.
Multi-operand contractions go through ``einsum(..., optimize=False)`` for
the same reason.
"""

from __future__ import annotations

import os
import struct
from typing import Sequence

import numpy as np

from .errors import DimensionError, MemoryCapError, PrecisionError

SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_MEMORY_CAP_ENV = "HLA_MEMORY_CAP_BYTES"
_MEMORY_CAP_DEFAULT = 1 << 30


def check_dtype(*arrays: np.ndarray) -> np.dtype:
    """Validate that all arrays share one supported float dtype.

    Returns the common dtype.  Raises PrecisionError on unsupported or
    mixed dtypes.
    """
    if not arrays:
        raise ValueError("expected at least one array")
    dt = arrays[0].dtype
    if dt not in SUPPORTED_DTYPES:
        raise PrecisionError(f"unsupported dtype {dt}; use float32 or float64")
    for a in arrays[1:]:
        if a.dtype != dt:
            raise PrecisionError(f"mixed dtypes {dt} and {a.dtype}")
    return dt


def memory_cap_bytes() -> int:
    """Active allocation cap in bytes.

    Read from the environment variable ``HLA_MEMORY_CAP_BYTES`` on each
    call; defaults to 1 GiB when unset or unparsable.
    """
    raw = os.environ.get(_MEMORY_CAP_ENV)
    if raw is None:
        return _MEMORY_CAP_DEFAULT
    try:
        val = int(raw)
    except ValueError:
        return _MEMORY_CAP_DEFAULT
    return val if val > 0 else _MEMORY_CAP_DEFAULT


def check_memory_cap(nbytes: int, what: str = "tensor") -> None:
    """Raise MemoryCapError if a planned allocation exceeds the cap."""
    cap = memory_cap_bytes()
    if nbytes > cap:
        raise MemoryCapError(
            f"{what} needs {nbytes} bytes, cap is {cap} "
            f"(override via {_MEMORY_CAP_ENV})"
        )


def outer_product(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Outer product of F vectors: result[i1,...,iF] = prod_f v_f[i_f].

    Accepts one or more 1-d arrays of a common dtype.  The result has one
    axis per input vector, in order.
    """
    if len(vectors) == 0:
        raise DimensionError("outer_product needs at least one vector")
    arrays = [np.asarray(v) for v in vectors]
    check_dtype(*arrays)
    for a in arrays:
        if a.ndim != 1:
            raise DimensionError(f"expected 1-d vectors, got shape {a.shape}")
    out = arrays[0]
    for a in arrays[1:]:
        out = out[..., None] * a
    return out


def contract_first_axis(t: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Contract the leading axis of ``t`` with the leading axis of ``m``.

    For t of shape [n, ...] and m of shape [n, d] the result has shape
    [..., d]:  out[..., j] = sum_i t[i, ...] * m[i, j].
    """
    t = np.asarray(t)
    m = np.asarray(m)
    check_dtype(t, m)
    if m.ndim != 2:
        raise DimensionError(f"matrix operand must be 2-d, got shape {m.shape}")
    if t.ndim < 1 or t.shape[0] != m.shape[0]:
        raise DimensionError(
            f"leading axes differ: {t.shape[:1]} vs {m.shape[:1]}"
        )
    return np.einsum("i...,ij->...j", t, m, optimize=False)


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise product of two tensors of identical shape."""
    a = np.asarray(a)
    b = np.asarray(b)
    check_dtype(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    return a * b


def reduce_all(t: np.ndarray) -> np.floating:
    """Sum of every element, returned as a scalar of the input dtype."""
    t = np.asarray(t)
    check_dtype(t)
    return np.sum(t, dtype=t.dtype)


def reduce_trailing(t: np.ndarray, k_axes: int) -> np.ndarray:
    """Sum over the last ``k_axes`` axes of ``t``."""
    t = np.asarray(t)
    check_dtype(t)
    if not 1 <= k_axes <= t.ndim:
        raise DimensionError(f"cannot reduce {k_axes} axes of rank-{t.ndim} tensor")
    return np.sum(t, axis=tuple(range(t.ndim - k_axes, t.ndim)), dtype=t.dtype)


_PRECISION_TO_DTYPE = {4: np.dtype(np.float32), 8: np.dtype(np.float64)}


def save_tensor(path: str | os.PathLike, t: np.ndarray) -> None:
    """Write a tensor in the flat binary layout.

    Little-endian header: rank as u32, then each axis length as u64, then
    one precision byte equal to the element size (4 for float32, 8 for
    float64).  The row-major element buffer follows immediately.
    """
    t = np.ascontiguousarray(t)
    check_dtype(t)
    with open(path, "wb") as f:
        f.write(struct.pack("<I", t.ndim))
        for dim in t.shape:
            f.write(struct.pack("<Q", dim))
        f.write(struct.pack("<B", t.dtype.itemsize))
        f.write(t.astype(t.dtype.newbyteorder("<"), copy=False).tobytes())


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    """Read a tensor written by :func:`save_tensor`."""
    with open(path, "rb") as f:
        raw = f.read(4)
        if len(raw) < 4:
            raise ValueError("truncated tensor file: missing rank")
        (rank,) = struct.unpack("<I", raw)
        shape = []
        for _ in range(rank):
            raw = f.read(8)
            if len(raw) < 8:
                raise ValueError("truncated tensor file: missing shape")
            shape.append(struct.unpack("<Q", raw)[0])
        raw = f.read(1)
        if len(raw) < 1:
            raise ValueError("truncated tensor file: missing precision byte")
        precision = raw[0]
        if precision not in _PRECISION_TO_DTYPE:
            raise PrecisionError(f"unknown precision byte {precision}")
        dtype = _PRECISION_TO_DTYPE[precision]
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        check_memory_cap(count * dtype.itemsize, "tensor file payload")
        data = f.read(count * dtype.itemsize)
        if len(data) != count * dtype.itemsize:
            raise ValueError("truncated tensor file: short payload")
    arr = np.frombuffer(data, dtype=dtype.newbyteorder("<")).astype(dtype)
    return arr.reshape(shape)
