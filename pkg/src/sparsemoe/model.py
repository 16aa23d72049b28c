"""SwiGLU experts, top-k routing, MoE layers and the on-disk model formats.

Weight layouts (all float32):

* ``gate`` and ``up``: ``d_hidden x d_intermediate``, column-major, so the
  weights feeding intermediate channel ``c`` are contiguous.
* ``down_t``: ``d_intermediate x d_hidden``, row-major. Row ``c`` holds the
  down-projection weights of channel ``c`` contiguously; physically this is the
  transposed down projection kept in column-major order.
* routers ``d_hidden x n_experts`` and mixers ``d_hidden x d_hidden``: row-major.

A layer computes ``h = x + x @ M`` (a linear stand-in for attention) followed by
``y = h + sum_j w_j * expert_j(h)`` over the routed experts.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numba
import numpy as np

from .linalg import COL_MAJOR, DTYPE, ROW_MAJOR, as_matrix, gemv, silu, softmax, top_k
from .quant import (
    DEFAULT_GROUP_SIZE,
    QuantizedMatrix,
    packed_nbytes,
    qgemv,
    quantize,
    stored_bytes,
)

DENSE = "dense"
SPARSE = "sparse"

MODEL_MAGIC = b"FLOE"
COMPRESSED_MAGIC = b"FLOQ"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sI5IQ")
_QHEADER_EXTRA = struct.Struct("<BI")


@dataclass(frozen=True)
class MoEConfig:
    layers: int
    experts: int
    top_k: int
    d_hidden: int
    d_intermediate: int
    seed: int = 0

    def __post_init__(self):
        for name in ("layers", "experts", "top_k", "d_hidden", "d_intermediate"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.top_k > self.experts:
            raise ValueError("top_k cannot exceed the number of experts")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")


@dataclass(eq=False)
class ExpertWeights:
    gate: np.ndarray
    up: np.ndarray
    down_t: np.ndarray

    def __post_init__(self):
        self.gate = as_matrix(self.gate, COL_MAJOR, "gate")
        self.up = as_matrix(self.up, COL_MAJOR, "up")
        self.down_t = as_matrix(self.down_t, ROW_MAJOR, "down_t")
        d_h, d_i = self.gate.shape
        if self.up.shape != (d_h, d_i) or self.down_t.shape != (d_i, d_h):
            raise ValueError("inconsistent expert dimensions")

    @property
    def d_hidden(self) -> int:
        return self.gate.shape[0]

    @property
    def d_intermediate(self) -> int:
        return self.gate.shape[1]


@dataclass(eq=False)
class CompressedExpert:
    """Quantized up projection plus dense gate/down masked at use time."""

    up_q: QuantizedMatrix
    gate: np.ndarray
    down_t: np.ndarray
    threshold: float

    def __post_init__(self):
        self.gate = as_matrix(self.gate, COL_MAJOR, "gate")
        self.down_t = as_matrix(self.down_t, ROW_MAJOR, "down_t")
        if self.up_q.shape != self.gate.shape:
            raise ValueError("quantized up projection must match gate dimensions")
        if self.down_t.shape != self.gate.shape[::-1]:
            raise ValueError("inconsistent expert dimensions")
        if not self.threshold >= 0:
            raise ValueError("threshold must be >= 0")
        self.threshold = float(np.float32(self.threshold))

    @property
    def d_hidden(self) -> int:
        return self.gate.shape[0]

    @property
    def d_intermediate(self) -> int:
        return self.gate.shape[1]

    def up_bytes(self, include_metadata: bool = True) -> int:
        return stored_bytes(self.up_q, include_metadata)


@dataclass(eq=False)
class MoEModel:
    config: MoEConfig
    routers: list[np.ndarray]
    mixers: list[np.ndarray]
    experts: list[list[ExpertWeights]]

    def __post_init__(self):
        c = self.config
        if not (len(self.routers) == len(self.mixers) == len(self.experts) == c.layers):
            raise ValueError("layer count does not match config")
        self.routers = [as_matrix(r, ROW_MAJOR, "router") for r in self.routers]
        self.mixers = [as_matrix(m, ROW_MAJOR, "mixer") for m in self.mixers]
        for r, m, row in zip(self.routers, self.mixers, self.experts):
            if r.shape != (c.d_hidden, c.experts) or m.shape != (c.d_hidden, c.d_hidden):
                raise ValueError("router/mixer dimensions do not match config")
            if len(row) != c.experts:
                raise ValueError("expert count does not match config")
            for e in row:
                if e.gate.shape != (c.d_hidden, c.d_intermediate):
                    raise ValueError("expert dimensions do not match config")


@dataclass(eq=False)
class CompressedModel:
    config: MoEConfig
    bits: int
    group_size: int
    routers: list[np.ndarray]
    mixers: list[np.ndarray]
    experts: list[list[CompressedExpert]]

    def thresholds(self) -> np.ndarray:
        return np.array([[e.threshold for e in row] for row in self.experts])


# ---------------------------------------------------------------------------
# forward passes


def _check_input(x, d_hidden: int) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=DTYPE)
    if x.shape != (d_hidden,):
        raise ValueError(f"expected input of length {d_hidden}, got shape {x.shape}")
    return x


def expert_forward(e: ExpertWeights, x) -> np.ndarray:
    """Dense SwiGLU expert: ``(silu(x @ gate) * (x @ up)) @ down``."""
    x = _check_input(x, e.d_hidden)
    a_down = silu(gemv(e.gate, x)) * gemv(e.up, x)
    return gemv(e.down_t, a_down)


@numba.njit(cache=True)
def _masked_expert(x, gate, v, t, down_t, out):
    # only gate columns and down_t rows of channels with |v| >= t are touched
    d_h, d_i = gate.shape
    for j in range(d_h):
        out[j] = np.float32(0.0)
    for c in range(d_i):
        vc = v[c]
        if abs(vc) >= t:
            acc = np.float32(0.0)
            for i in range(d_h):
                acc += x[i] * gate[i, c]
            xp = acc / (np.float32(1.0) + np.exp(-acc)) * vc
            for j in range(d_h):
                out[j] += xp * down_t[c, j]


def masked_expert(x: np.ndarray, gate: np.ndarray, v: np.ndarray, t: float, down_t: np.ndarray) -> np.ndarray:
    """Masked GEMV pair: channels with ``|v| >= t`` only."""
    out = np.empty(gate.shape[0], dtype=DTYPE)
    _masked_expert(x, gate, np.ascontiguousarray(v, dtype=DTYPE), DTYPE(t), down_t, out)
    return out


def expert_forward_sparse(e: CompressedExpert, x, threshold: float | None = None) -> np.ndarray:
    """Sparse expert: quantized up projection selects the channels to compute.

    ``v = x @ up_q``; channels with ``|v| >= t`` contribute
    ``silu(x @ gate[:, c]) * v[c] * down_t[c, :]``. Gate columns and down rows of
    pruned channels are never read.
    """
    x = _check_input(x, e.d_hidden)
    t = e.threshold if threshold is None else threshold
    if t < 0:
        raise ValueError("threshold must be >= 0")
    v = qgemv(e.up_q, x)
    return masked_expert(x, e.gate, v, t, e.down_t)


def up_activation(e: ExpertWeights | CompressedExpert, x) -> np.ndarray:
    x = _check_input(x, e.d_hidden)
    if isinstance(e, CompressedExpert):
        return qgemv(e.up_q, x)
    return gemv(e.up, x)


def route(router: np.ndarray, x, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-k experts of ``x @ router`` with softmax renormalized over the selection."""
    router = as_matrix(router, ROW_MAJOR, "router")
    x = _check_input(x, router.shape[0])
    logits = gemv(router, x)
    idx = top_k(logits, k)
    return idx, softmax(logits[idx])


def mix(mixer: np.ndarray, x) -> np.ndarray:
    x = _check_input(x, mixer.shape[0])
    return x + gemv(mixer, x)


@dataclass
class LayerTrace:
    """What one MoE layer saw and did for one token."""

    x: np.ndarray  # layer input
    h: np.ndarray  # MoE block input (router and up projection input)
    experts: np.ndarray
    weights: np.ndarray
    up_out: dict[int, np.ndarray] = field(default_factory=dict)
    masks: dict[int, np.ndarray] = field(default_factory=dict)
    y: np.ndarray | None = None


def layer_forward(model, i: int, x, mode: str = DENSE, trace: LayerTrace | None = None) -> np.ndarray:
    """Residual mixing then the routed expert mixture for layer ``i``.

    ``mode="sparse"`` requires a :class:`CompressedModel` and uses each expert's
    calibrated threshold.
    """
    if not 0 <= i < model.config.layers:
        raise IndexError(f"layer {i} out of range")
    if mode not in (DENSE, SPARSE):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == SPARSE and not isinstance(model, CompressedModel):
        raise TypeError("sparse mode needs a compressed model")
    x = _check_input(x, model.config.d_hidden)
    h = mix(model.mixers[i], x)
    idx, w = route(model.routers[i], h, model.config.top_k)
    y = h.copy()
    if trace is not None:
        trace.x, trace.h, trace.experts, trace.weights = x, h, idx, w
    for j, wj in zip(idx.tolist(), w):
        e = model.experts[i][j]
        if mode == DENSE:
            if isinstance(e, CompressedExpert):
                raise TypeError("dense mode needs uncompressed experts")
            out = expert_forward(e, h)
            if trace is not None:
                trace.up_out[j] = gemv(e.up, h)
        else:
            v = qgemv(e.up_q, h)
            out = masked_expert(h, e.gate, v, e.threshold, e.down_t)
            if trace is not None:
                trace.up_out[j] = v
                trace.masks[j] = np.abs(v) >= e.threshold
        y = y + wj * out
    if trace is not None:
        trace.y = y
    return y


def forward_trace(model, x, mode: str = DENSE) -> list[LayerTrace]:
    """Run one token through every layer, recording each layer's trace."""
    traces = []
    for i in range(model.config.layers):
        tr = LayerTrace(x=None, h=None, experts=None, weights=None)
        x = layer_forward(model, i, x, mode, tr)
        traces.append(tr)
    return traces


def forward(model, x, mode: str = DENSE) -> np.ndarray:
    for i in range(model.config.layers):
        x = layer_forward(model, i, x, mode)
    return x


def token_stream(d_hidden: int, count: int, seed: int) -> Iterator[np.ndarray]:
    """Seeded stand-in for embedded tokens: i.i.d. N(0, 1) hidden states."""
    rng = np.random.default_rng(seed)
    for _ in range(count):
        yield rng.standard_normal(d_hidden).astype(DTYPE)


# ---------------------------------------------------------------------------
# construction and compression


def gen_model(config: MoEConfig) -> MoEModel:
    """Synthetic model with every weight drawn from N(0, 1/d_hidden)."""
    rng = np.random.default_rng(config.seed)
    std = 1.0 / np.sqrt(config.d_hidden)
    d_h, d_i, n = config.d_hidden, config.d_intermediate, config.experts

    def draw(shape):
        return (rng.standard_normal(shape) * std).astype(DTYPE)

    routers, mixers, experts = [], [], []
    for _ in range(config.layers):
        routers.append(draw((d_h, n)))
        mixers.append(draw((d_h, d_h)))
        experts.append([ExpertWeights(draw((d_h, d_i)), draw((d_h, d_i)), draw((d_i, d_h))) for _ in range(n)])
    return MoEModel(config, routers, mixers, experts)


def with_residual_scale(model: MoEModel, eps: float) -> MoEModel:
    """Scale both residual branches (mixing and expert output) by ``eps``.

    Hidden states then drift by O(eps) between consecutive layers; ``eps=0``
    makes every layer the identity.
    """
    e32 = DTYPE(eps)
    experts = [
        [ExpertWeights(e.gate, e.up, e.down_t * e32) for e in row] for row in model.experts
    ]
    return MoEModel(model.config, list(model.routers), [m * e32 for m in model.mixers], experts)


def compress_expert(
    e: ExpertWeights, bits: int, t: float, group_size: int = DEFAULT_GROUP_SIZE, refine: bool = False
) -> CompressedExpert:
    return CompressedExpert(quantize(e.up, bits, group_size, refine), e.gate, e.down_t, t)


def compress_model(
    model: MoEModel, thresholds, bits: int = 2, group_size: int = DEFAULT_GROUP_SIZE, refine: bool = False
) -> CompressedModel:
    """Quantize every up projection and attach ``thresholds[i][j]``."""
    t = np.asarray(thresholds, dtype=np.float64)
    c = model.config
    if t.shape != (c.layers, c.experts):
        raise ValueError(f"threshold table shape {t.shape} does not match model")
    experts = [
        [compress_expert(e, bits, t[i, j], group_size, refine) for j, e in enumerate(row)]
        for i, row in enumerate(model.experts)
    ]
    return CompressedModel(c, bits, group_size, list(model.routers), list(model.mixers), experts)


def dense_expert_bytes(d_hidden: int, d_intermediate: int, element_bytes: int = 2) -> int:
    return 3 * d_hidden * d_intermediate * element_bytes


def nominal_compressed_expert_bytes(
    d_hidden: int,
    d_intermediate: int,
    bits: int,
    density: float,
    element_bytes: int = 2,
    group_size: int | None = None,
) -> float:
    """Bytes moved per token-expert: packed up codes plus the kept gate/down channels.

    ``group_size=None`` excludes quantization metadata (nominal figure).
    """
    size = d_hidden * d_intermediate
    total = packed_nbytes(size, bits)
    if group_size is not None:
        total += -(-size // group_size) * 4
    return total + 2 * density * size * element_bytes


# ---------------------------------------------------------------------------
# serialization


def _header(magic: bytes, c: MoEConfig) -> bytes:
    return _HEADER.pack(magic, FORMAT_VERSION, c.layers, c.experts, c.top_k, c.d_hidden, c.d_intermediate, c.seed)


def _f32(a: np.ndarray, order: str) -> bytes:
    return np.asarray(a, dtype="<f4").tobytes(order=order)


def model_bytes(model: MoEModel) -> bytes:
    buf = io.BytesIO()
    buf.write(_header(MODEL_MAGIC, model.config))
    for r, m, row in zip(model.routers, model.mixers, model.experts):
        buf.write(_f32(r, "C"))
        buf.write(_f32(m, "C"))
        for e in row:
            buf.write(_f32(e.gate, "F"))
            buf.write(_f32(e.up, "F"))
            buf.write(_f32(e.down_t, "C"))
    return buf.getvalue()


def compressed_model_bytes(model: CompressedModel) -> bytes:
    buf = io.BytesIO()
    buf.write(_header(COMPRESSED_MAGIC, model.config))
    buf.write(_QHEADER_EXTRA.pack(model.bits, model.group_size))
    for r, m, row in zip(model.routers, model.mixers, model.experts):
        buf.write(_f32(r, "C"))
        buf.write(_f32(m, "C"))
        for e in row:
            buf.write(e.up_q.packed.tobytes())
            buf.write(e.up_q.scales.astype("<f2").tobytes())
            buf.write(e.up_q.zeros.astype("<f2").tobytes())
            buf.write(_f32(e.gate, "F"))
            buf.write(_f32(e.down_t, "C"))
            buf.write(struct.pack("<f", e.threshold))
    return buf.getvalue()


def model_file_size(c: MoEConfig) -> int:
    per_layer = c.d_hidden * c.experts + c.d_hidden**2 + 3 * c.experts * c.d_hidden * c.d_intermediate
    return _HEADER.size + 4 * c.layers * per_layer


def compressed_file_size(c: MoEConfig, bits: int, group_size: int) -> int:
    size = c.d_hidden * c.d_intermediate
    groups = -(-size // group_size)
    per_expert = packed_nbytes(size, bits) + 4 * groups + 4 * 2 * size + 4
    per_layer = 4 * (c.d_hidden * c.experts + c.d_hidden**2) + c.experts * per_expert
    return _HEADER.size + _QHEADER_EXTRA.size + c.layers * per_layer


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.data):
            raise ValueError("truncated model file")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def array(self, dtype: str, count: int) -> np.ndarray:
        nbytes = np.dtype(dtype).itemsize * count
        return np.frombuffer(self.take(nbytes), dtype=dtype).copy()

    def matrix(self, rows: int, cols: int, order: str) -> np.ndarray:
        flat = self.array("<f4", rows * cols).astype(DTYPE)
        return flat.reshape((rows, cols), order=order)


def _read_header(r: _Reader, magic: bytes) -> MoEConfig:
    got, version, layers, experts, k, d_h, d_i, seed = _HEADER.unpack(r.take(_HEADER.size))
    if got != magic:
        raise ValueError(f"bad magic {got!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported format version {version}")
    return MoEConfig(layers, experts, k, d_h, d_i, seed)


def model_from_bytes(data: bytes) -> MoEModel:
    r = _Reader(data)
    c = _read_header(r, MODEL_MAGIC)
    d_h, d_i = c.d_hidden, c.d_intermediate
    routers, mixers, experts = [], [], []
    for _ in range(c.layers):
        routers.append(r.matrix(d_h, c.experts, "C"))
        mixers.append(r.matrix(d_h, d_h, "C"))
        experts.append(
            [
                ExpertWeights(r.matrix(d_h, d_i, "F"), r.matrix(d_h, d_i, "F"), r.matrix(d_i, d_h, "C"))
                for _ in range(c.experts)
            ]
        )
    if r.pos != len(r.data):
        raise ValueError("trailing bytes after model data")
    return MoEModel(c, routers, mixers, experts)


def compressed_model_from_bytes(data: bytes) -> CompressedModel:
    r = _Reader(data)
    c = _read_header(r, COMPRESSED_MAGIC)
    bits, group_size = _QHEADER_EXTRA.unpack(r.take(_QHEADER_EXTRA.size))
    d_h, d_i = c.d_hidden, c.d_intermediate
    size = d_h * d_i
    groups = -(-size // group_size)
    routers, mixers, experts = [], [], []
    for _ in range(c.layers):
        routers.append(r.matrix(d_h, c.experts, "C"))
        mixers.append(r.matrix(d_h, d_h, "C"))
        row = []
        for _ in range(c.experts):
            packed = r.array("u1", packed_nbytes(size, bits))
            scales = r.array("<f2", groups).astype(np.float16)
            zeros = r.array("<f2", groups).astype(np.float16)
            up_q = QuantizedMatrix(d_h, d_i, bits, group_size, packed, scales, zeros)
            gate = r.matrix(d_h, d_i, "F")
            down_t = r.matrix(d_i, d_h, "C")
            (t,) = struct.unpack("<f", r.take(4))
            row.append(CompressedExpert(up_q, gate, down_t, t))
        experts.append(row)
    if r.pos != len(r.data):
        raise ValueError("trailing bytes after model data")
    return CompressedModel(c, bits, group_size, routers, mixers, experts)


def load_any(path: str | Path) -> MoEModel | CompressedModel:
    data = Path(path).read_bytes()
    if data[:4] == MODEL_MAGIC:
        return model_from_bytes(data)
    if data[:4] == COMPRESSED_MAGIC:
        return compressed_model_from_bytes(data)
    raise ValueError(f"{path}: not a model file (magic {bytes(data[:4])!r})")


def decompress_for_dense(model: CompressedModel) -> MoEModel:
    """Dense model whose up projections are the dequantized codes."""
    from .quant import dequantize

    experts = [[ExpertWeights(e.gate, dequantize(e.up_q), e.down_t) for e in row] for row in model.experts]
    return MoEModel(model.config, list(model.routers), list(model.mixers), experts)
