"""Dense float32 substrate: GEMV, SiLU, softmax, top-k and cosine similarity.

Matrices are plain ``numpy.ndarray`` objects of dtype float32. Storage order is
carried by the array itself (C-contiguous is row-major, F-contiguous is
column-major). Vectors multiply matrices from the left, ``x @ W``.

Every reduction runs in a fixed left-to-right order inside hand-written numba
loops, so results are bitwise reproducible and independent of storage order.
"""

from __future__ import annotations

import numba
import numpy as np

DTYPE = np.float32

ROW_MAJOR = "row-major"
COL_MAJOR = "col-major"


def as_vector(v, name: str = "vector") -> np.ndarray:
    arr = np.ascontiguousarray(v, dtype=DTYPE)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def as_matrix(m, order: str = ROW_MAJOR, name: str = "matrix") -> np.ndarray:
    """Return ``m`` as a finite float32 matrix in the requested storage order."""
    if order not in (ROW_MAJOR, COL_MAJOR):
        raise ValueError(f"unknown storage order {order!r}")
    np_order = "C" if order == ROW_MAJOR else "F"
    arr = np.asarray(m, dtype=DTYPE, order=np_order)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def storage_order(m: np.ndarray) -> str:
    if m.flags.c_contiguous:
        return ROW_MAJOR
    if m.flags.f_contiguous:
        return COL_MAJOR
    raise ValueError("matrix is neither row- nor column-major contiguous")


@numba.njit(cache=True)
def _gemv_rows(m, x, out):
    # row-major: stream rows, accumulate each output in row order
    rows, cols = m.shape
    for j in range(cols):
        out[j] = np.float32(0.0)
    for i in range(rows):
        xi = x[i]
        for j in range(cols):
            out[j] += xi * m[i, j]


@numba.njit(cache=True)
def _gemv_cols(m, x, out):
    rows, cols = m.shape
    for j in range(cols):
        acc = np.float32(0.0)
        for i in range(rows):
            acc += x[i] * m[i, j]
        out[j] = acc


def gemv(m: np.ndarray, x) -> np.ndarray:
    """Compute ``x @ m`` for a row vector ``x`` of length ``m.shape[0]``.

    Both storage orders sum over the rows of ``m`` from first to last, so the
    result is bitwise identical whichever layout ``m`` uses.
    """
    x = np.ascontiguousarray(x, dtype=DTYPE)
    if x.ndim != 1 or m.ndim != 2 or x.shape[0] != m.shape[0]:
        raise ValueError(f"dimension mismatch: x{x.shape} @ m{m.shape}")
    if m.dtype != DTYPE:
        raise TypeError(f"matrix dtype must be float32, got {m.dtype}")
    out = np.empty(m.shape[1], dtype=DTYPE)
    if m.flags.c_contiguous:
        _gemv_rows(m, x, out)
    elif m.flags.f_contiguous:
        _gemv_cols(m, x, out)
    else:
        _gemv_rows(np.ascontiguousarray(m), x, out)
    return out


def silu(v) -> np.ndarray:
    """Elementwise ``v * sigmoid(v)``; saturates to -0 for very negative inputs."""
    v = np.asarray(v, dtype=DTYPE)
    with np.errstate(over="ignore"):
        return v / (DTYPE(1.0) + np.exp(-v))


def top_k(v, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries, ties to the lower index, sorted ascending."""
    v = np.asarray(v)
    if v.ndim != 1:
        raise ValueError("top_k expects a vector")
    if not 1 <= k <= v.shape[0]:
        raise ValueError(f"k={k} out of range for length {v.shape[0]}")
    order = np.argsort(-v.astype(np.float64), kind="stable")
    return np.sort(order[:k])


def softmax(v) -> np.ndarray:
    v = as_vector(v)
    e = np.exp(v - v.max())
    return e / e.sum(dtype=DTYPE)


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch {a.shape} vs {b.shape}")
    na = np.sqrt(a @ a)
    nb = np.sqrt(b @ b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity undefined for a zero vector")
    return float(np.clip((a @ b) / (na * nb), -1.0, 1.0))
