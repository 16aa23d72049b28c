"""Group-wise affine low-bit quantization with bit-packed codes.

Elements are grouped ``group_size`` at a time in column-major order, so a full
column of a ``d_hidden x d_intermediate`` projection dequantizes from
contiguous groups. Each group stores a float16 ``scale`` and ``zero``:

    code = clamp(round((x - zero) / scale), 0, 2**bits - 1)
    x_hat = code * scale + zero

Codes are packed into a little-endian bit stream: code ``k`` occupies bits
``[k*bits, (k+1)*bits)`` and the first code sits in the least significant bits
of the first byte.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .linalg import DTYPE

SUPPORTED_BITS = (1, 2, 3, 4, 8)
DEFAULT_GROUP_SIZE = 64
META_DTYPE = np.float16


def pack_codes(codes: np.ndarray, bits: int) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.uint8).ravel()
    if codes.size and int(codes.max()) >= (1 << bits):
        raise ValueError(f"code out of range for {bits} bits")
    shifts = np.arange(bits, dtype=np.uint8)
    bitplanes = (codes[:, None] >> shifts) & 1
    return np.packbits(bitplanes.ravel(), bitorder="little")


def unpack_codes(packed: np.ndarray, count: int, bits: int) -> np.ndarray:
    packed = np.asarray(packed, dtype=np.uint8)
    expected = packed_nbytes(count, bits)
    if packed.size != expected:
        raise ValueError(f"packed buffer has {packed.size} bytes, expected {expected}")
    stream = np.unpackbits(packed, bitorder="little")
    if stream[count * bits:].any():
        raise ValueError("corrupt packing: trailing bits are nonzero")
    planes = stream[: count * bits].reshape(count, bits).astype(np.uint8)
    weights = (1 << np.arange(bits, dtype=np.uint8)).astype(np.uint8)
    return (planes * weights).sum(axis=1, dtype=np.uint8)


def packed_nbytes(count: int, bits: int) -> int:
    return (count * bits + 7) // 8


@dataclass(eq=False)
class QuantizedMatrix:
    rows: int
    cols: int
    bits: int
    group_size: int
    packed: np.ndarray  # uint8 bit stream
    scales: np.ndarray  # float16 per group
    zeros: np.ndarray  # float16 per group
    _codes: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.bits not in SUPPORTED_BITS:
            raise ValueError(f"bits must be one of {SUPPORTED_BITS}, got {self.bits}")
        if self.group_size < 1:
            raise ValueError("group_size must be >= 1")
        n_groups = self.n_groups
        self.scales = np.asarray(self.scales, dtype=META_DTYPE)
        self.zeros = np.asarray(self.zeros, dtype=META_DTYPE)
        if self.scales.shape != (n_groups,) or self.zeros.shape != (n_groups,):
            raise ValueError(f"expected {n_groups} scales and zeros")
        if not np.all(self.scales > 0):
            raise ValueError("every group scale must be positive")
        if not (np.all(np.isfinite(self.scales)) and np.all(np.isfinite(self.zeros))):
            raise ValueError("non-finite quantization metadata")

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows, self.cols

    @property
    def size(self) -> int:
        return self.rows * self.cols

    @property
    def n_groups(self) -> int:
        return -(-self.size // self.group_size)

    def codes(self) -> np.ndarray:
        """Unpacked codes in column-major element order (cached)."""
        if self._codes is None:
            self._codes = unpack_codes(self.packed, self.size, self.bits)
        return self._codes

    def same_as(self, other: "QuantizedMatrix") -> bool:
        return (
            self.shape == other.shape
            and self.bits == other.bits
            and self.group_size == other.group_size
            and np.array_equal(self.packed, other.packed)
            and np.array_equal(self.scales.view(np.uint16), other.scales.view(np.uint16))
            and np.array_equal(self.zeros.view(np.uint16), other.zeros.view(np.uint16))
        )


def _fp16_down(x: np.ndarray) -> np.ndarray:
    h = x.astype(META_DTYPE)
    over = h.astype(np.float64) > x
    h[over] = np.nextafter(h[over], META_DTYPE(-np.inf))
    return h


def _fp16_up(x: np.ndarray) -> np.ndarray:
    h = x.astype(META_DTYPE)
    under = h.astype(np.float64) < x
    h[under] = np.nextafter(h[under], META_DTYPE(np.inf))
    return h


def _grouped(flat: np.ndarray, group_size: int, fill: float) -> np.ndarray:
    n_groups = -(-flat.size // group_size)
    padded = np.full(n_groups * group_size, fill, dtype=np.float64)
    padded[: flat.size] = flat
    return padded.reshape(n_groups, group_size)


def _refine(flat, group_size, levels, scales, zeros, iters=10):
    """Alternate code assignment and least-squares (scale, zero) per group."""
    x = _grouped(flat, group_size, np.nan)
    valid = ~np.isnan(x)
    xs = np.where(valid, x, 0.0)
    s = scales.astype(np.float64)[:, None]
    z = zeros.astype(np.float64)[:, None]
    for _ in range(iters):
        c = np.clip(np.rint((xs - z) / s), 0, levels)
        c = np.where(valid, c, 0.0)
        n = valid.sum(axis=1, keepdims=True)
        mc = c.sum(axis=1, keepdims=True) / n
        mx = xs.sum(axis=1, keepdims=True) / n
        var_c = (np.where(valid, (c - mc) ** 2, 0.0)).sum(axis=1, keepdims=True)
        cov = (np.where(valid, (c - mc) * (xs - mx), 0.0)).sum(axis=1, keepdims=True)
        ok = (var_c > 0) & (cov > 0)
        s = np.where(ok, cov / np.where(var_c > 0, var_c, 1.0), s)
        z = np.where(ok, mx - s * mc, z)
    return s.ravel().astype(META_DTYPE), z.ravel().astype(META_DTYPE)


def quantize(
    m, bits: int = 2, group_size: int = DEFAULT_GROUP_SIZE, refine: bool = False
) -> QuantizedMatrix:
    """Min-max affine quantization of ``m`` into ``bits``-bit codes.

    The float16 zero is rounded down and the float16 scale rounded up, so the
    stored grid ``zero + [0, 2**bits - 1] * scale`` always covers the group's
    range and the round-trip error stays within ``scale / 2``. A group whose min
    and max round to the same float16 is stored as constant: ``scale = 1`` and
    zero is that float16 value.

    ``refine`` runs 10 rounds of per-group least-squares refinement of
    (scale, zero); the ``scale / 2`` bound no longer applies then.
    """
    if bits not in SUPPORTED_BITS:
        raise ValueError(f"bits must be one of {SUPPORTED_BITS}, got {bits}")
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    m = np.asarray(m, dtype=DTYPE)
    if m.ndim != 2:
        raise ValueError("quantize expects a matrix")
    if not np.all(np.isfinite(m)):
        raise ValueError("cannot quantize non-finite values")
    fp16_max = float(np.finfo(META_DTYPE).max)
    if m.size and float(np.abs(m).max()) > fp16_max / 2:
        raise ValueError("values exceed the float16 metadata range")

    rows, cols = m.shape
    flat = m.ravel(order="F").astype(np.float64)
    levels = (1 << bits) - 1
    g_min = _grouped(flat, group_size, np.inf).min(axis=1)
    g_max = _grouped(flat, group_size, -np.inf).max(axis=1)

    zeros = _fp16_down(g_min)
    span = g_max - zeros.astype(np.float64)
    scales = _fp16_up(span / levels)
    # a group whose range float16 cannot resolve is stored as constant: code 0
    # reproduces it, so its zero may round to nearest
    constant = g_min.astype(META_DTYPE) == g_max.astype(META_DTYPE)
    scales[constant] = META_DTYPE(1.0)
    zeros[constant] = g_min[constant].astype(META_DTYPE)
    # a span far below float16 resolution may round to zero
    scales[scales <= 0] = np.nextafter(META_DTYPE(0), META_DTYPE(1))
    if refine:
        scales, zeros = _refine(flat, group_size, levels, scales, zeros)
        scales[~(scales > 0)] = META_DTYPE(1.0)

    s32 = scales.astype(DTYPE)
    z32 = zeros.astype(DTYPE)
    group_of = np.arange(flat.size) // group_size
    x32 = flat.astype(DTYPE)
    q = np.rint((x32 - z32[group_of]) / s32[group_of])
    codes = np.clip(q, 0, levels).astype(np.uint8)
    return QuantizedMatrix(
        rows=rows,
        cols=cols,
        bits=bits,
        group_size=group_size,
        packed=pack_codes(codes, bits),
        scales=scales,
        zeros=zeros,
        _codes=codes,
    )


def dequantize(q: QuantizedMatrix) -> np.ndarray:
    """Reconstruct the float32 matrix (column-major storage)."""
    codes = q.codes()
    group_of = np.arange(q.size) // q.group_size
    s32 = q.scales.astype(DTYPE)[group_of]
    z32 = q.zeros.astype(DTYPE)[group_of]
    flat = codes.astype(DTYPE) * s32 + z32
    return flat.reshape((q.rows, q.cols), order="F")


@numba.njit(cache=True)
def _qgemv(codes, scales, zeros, group_size, rows, cols, x, out):
    for j in range(cols):
        acc = np.float32(0.0)
        base = j * rows
        for i in range(rows):
            g = (base + i) // group_size
            w = np.float32(codes[base + i]) * scales[g] + zeros[g]
            acc += x[i] * w
        out[j] = acc


def qgemv(q: QuantizedMatrix, x) -> np.ndarray:
    """``x @ dequantize(q)`` with per-group dequantization on the fly."""
    x = np.ascontiguousarray(x, dtype=DTYPE)
    if x.ndim != 1 or x.shape[0] != q.rows:
        raise ValueError(f"dimension mismatch: x{x.shape} @ q{q.shape}")
    out = np.empty(q.cols, dtype=DTYPE)
    _qgemv(
        q.codes(),
        q.scales.astype(DTYPE),
        q.zeros.astype(DTYPE),
        q.group_size,
        q.rows,
        q.cols,
        x,
        out,
    )
    return out


def stored_bytes(q: QuantizedMatrix, include_metadata: bool = True) -> int:
    return nominal_bytes(q.rows, q.cols, q.bits, q.group_size, include_metadata)


def nominal_bytes(rows: int, cols: int, bits: int, group_size: int, include_metadata: bool = True) -> int:
    """Storage of a ``rows x cols`` matrix at ``bits`` bits plus 16-bit scale/zero per group."""
    size = rows * cols
    total = packed_nbytes(size, bits)
    if include_metadata:
        total += -(-size // group_size) * 4
    return total
