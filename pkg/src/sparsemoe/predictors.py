"""Expert-level and channel-level lookahead predictors.

The inter-expert predictor is a learned linear scorer per layer that maps the
hidden state entering layer ``i-1``'s MoE block to scores over layer ``i``'s
experts. The intra-expert predictor has no parameters: it multiplies the same
earlier hidden state with layer ``i``'s quantized up projection and thresholds
the result.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import special

from .linalg import DTYPE, top_k
from .model import DENSE, SPARSE, CompressedModel, forward_trace
from .quant import QuantizedMatrix, qgemv

PREDICTOR_MAGIC = b"FLOP"
FORMAT_VERSION = 1
METRICS_HEADER = ("layer", "precision", "recall", "samples")

PAIRWISE = "pairwise"
ONE_VS_ALL = "one-vs-all"


@dataclass
class InterExpertPredictor:
    """``weights[i]`` (d_hidden x n) and ``biases[i]`` score layer ``i``'s experts.

    Layer 0 has no predictor (``None``): it is fetched without lookahead.
    """

    weights: list[np.ndarray | None]
    biases: list[np.ndarray | None]
    lr: float = 4.0
    epochs: int = 3000
    seed: int = 0
    loss: str = PAIRWISE
    history: list[list[float]] = field(default_factory=list)

    @property
    def layers(self) -> int:
        return len(self.weights)

    def scores(self, x, layer: int) -> np.ndarray:
        if not 0 < layer < self.layers or self.weights[layer] is None:
            raise ValueError(f"no predictor for layer {layer}; layer 0 is fetched without lookahead")
        x = np.asarray(x, dtype=DTYPE)
        return x @ self.weights[layer] + self.biases[layer]


@dataclass
class ExpertTrace:
    """Per layer ``i >= 1``: inputs ``h_{i-1}`` and multi-hot targets for layer ``i``."""

    inputs: list[np.ndarray]  # layers entries, N x d_hidden (index 0 unused)
    targets: list[np.ndarray]  # layers entries, N x n multi-hot


@dataclass
class PredictionMetrics:
    precision: float
    recall: float
    samples: int


# ---------------------------------------------------------------------------
# traces and training


def expert_trace(model, tokens: Iterable[np.ndarray], mode: str = DENSE) -> ExpertTrace:
    """Record (hidden state before layer i-1's MoE block, experts of layer i) pairs."""
    c = model.config
    hs = [[] for _ in range(c.layers)]
    ys = [[] for _ in range(c.layers)]
    for x in tokens:
        for i, tr in enumerate(forward_trace(model, x, mode)):
            hs[i].append(tr.h)
            y = np.zeros(c.experts)
            y[tr.experts] = 1.0
            ys[i].append(y)
    if not hs[0]:
        raise ValueError("empty trace")
    inputs = [np.zeros((0, c.d_hidden))] + [np.asarray(hs[i - 1], dtype=np.float64) for i in range(1, c.layers)]
    targets = [np.zeros((0, c.experts))] + [np.asarray(ys[i]) for i in range(1, c.layers)]
    return ExpertTrace(inputs, targets)


class _PairwiseLoss:
    """Logistic loss on every (selected, unselected) score gap, averaged per sample.

    The pair index lists are built once, so each evaluation only touches the
    ``k * (n - k)`` informative gaps of every sample.
    """

    def __init__(self, Y: np.ndarray):
        N, n = Y.shape
        pos = Y > 0.5
        M = pos[:, :, None] & ~pos[:, None, :]
        s, a, b = np.nonzero(M)
        counts = np.maximum(np.bincount(s, minlength=N), 1).astype(np.float64)
        self.shape = (N, n)
        self.flat_a = s * n + a
        self.flat_b = s * n + b
        self.weight = 1.0 / (counts[s] * N)

    def __call__(self, S: np.ndarray) -> tuple[float, np.ndarray]:
        flat = S.ravel()
        D = flat[self.flat_a] - flat[self.flat_b]
        loss = float((self.weight * np.logaddexp(0.0, -D)).sum())
        w = self.weight * special.expit(-D)
        size = self.shape[0] * self.shape[1]
        G = np.bincount(self.flat_b, w, size) - np.bincount(self.flat_a, w, size)
        return loss, G.reshape(self.shape)


def _ova_loss_grad(S: np.ndarray, Y: np.ndarray) -> tuple[float, np.ndarray]:
    loss = np.logaddexp(0.0, S) - Y * S
    P = 1.0 / (1.0 + np.exp(-S))
    return float(loss.sum(axis=1).mean()), (P - Y) / S.shape[0]


def fit_linear_scorer(
    X: np.ndarray,
    Y: np.ndarray,
    lr: float = 4.0,
    epochs: int = 3000,
    seed: int = 0,
    loss: str = PAIRWISE,
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Full-batch gradient descent; returns weights, bias and the per-epoch loss."""
    if X.shape[0] == 0:
        raise ValueError("empty trace")
    if loss == PAIRWISE:
        loss_grad = _PairwiseLoss(Y)
    elif loss == ONE_VS_ALL:
        loss_grad = lambda S: _ova_loss_grad(S, Y)
    else:
        raise ValueError(f"unknown loss {loss!r}")
    rng = np.random.default_rng(seed)
    d, n = X.shape[1], Y.shape[1]
    W = rng.standard_normal((d, n)) * 1e-3
    b = np.zeros(n)
    history = []
    for _ in range(epochs):
        value, G = loss_grad(X @ W + b)
        history.append(value)
        W -= lr * (X.T @ G)
        b -= lr * G.sum(axis=0)
    history.append(loss_grad(X @ W + b)[0])
    return W, b, history


def train_inter(
    trace: ExpertTrace,
    lr: float = 4.0,
    epochs: int = 3000,
    seed: int = 0,
    loss: str = PAIRWISE,
    min_pairs: int = 100,
) -> InterExpertPredictor:
    layers = len(trace.inputs)
    weights: list[np.ndarray | None] = [None]
    biases: list[np.ndarray | None] = [None]
    history = [[]]
    for i in range(1, layers):
        X, Y = trace.inputs[i], trace.targets[i]
        if X.shape[0] == 0:
            raise ValueError("empty trace")
        if X.shape[0] < min_pairs:
            raise ValueError(f"layer {i} has {X.shape[0]} trace pairs, need {min_pairs}")
        W, b, h = fit_linear_scorer(X, Y, lr, epochs, seed + i, loss)
        weights.append(W.astype(DTYPE))
        biases.append(b.astype(DTYPE))
        history.append(h)
    return InterExpertPredictor(weights, biases, lr, epochs, seed, loss, history)


def predict_experts(p: InterExpertPredictor, x, layer: int, prefetch_count: int) -> np.ndarray:
    """Indices of the ``prefetch_count`` highest-scoring experts (ties to the lower index)."""
    s = p.scores(x, layer)
    return top_k(s, prefetch_count)


def predict_mask(x_prev, up_next: QuantizedMatrix, t: float) -> np.ndarray:
    """Channels of the next layer's expert whose reused up output clears ``t``."""
    return np.abs(qgemv(up_next, x_prev)) >= t


# ---------------------------------------------------------------------------
# evaluation


def _as_set(item) -> set[int]:
    a = np.asarray(item)
    if a.dtype == bool:
        return set(np.flatnonzero(a).tolist())
    return set(a.astype(np.int64).ravel().tolist())


def eval_predictions(predicted: Sequence, true: Sequence) -> PredictionMetrics:
    """Mean per-sample precision and recall; items are index lists or boolean masks."""
    if len(predicted) != len(true):
        raise ValueError("predicted and true counts differ")
    if not predicted:
        return PredictionMetrics(1.0, 1.0, 0)
    precisions, recalls = [], []
    for p, t in zip(predicted, true):
        ps, ts = _as_set(p), _as_set(t)
        hit = len(ps & ts)
        if ps:
            precisions.append(hit / len(ps))
        else:
            precisions.append(1.0 if not ts else 0.0)
        recalls.append(hit / len(ts) if ts else 1.0)
    return PredictionMetrics(float(np.mean(precisions)), float(np.mean(recalls)), len(predicted))


def inter_metrics(p: InterExpertPredictor, trace: ExpertTrace, prefetch_count: int) -> list[PredictionMetrics]:
    """Per-layer metrics (index 0 is the unpredicted first layer)."""
    out = [PredictionMetrics(float("nan"), float("nan"), 0)]
    for i in range(1, len(trace.inputs)):
        pred = [predict_experts(p, x, i, prefetch_count) for x in trace.inputs[i]]
        true = [np.flatnonzero(y) for y in trace.targets[i]]
        out.append(eval_predictions(pred, true))
    return out


def intra_metrics(model: CompressedModel, tokens: Iterable[np.ndarray]) -> list[PredictionMetrics]:
    """Reuse-predictor metrics per layer, against the true masks of the routed experts."""
    c = model.config
    pred = [[] for _ in range(c.layers)]
    true = [[] for _ in range(c.layers)]
    for x in tokens:
        traces = forward_trace(model, x, SPARSE)
        for i in range(1, c.layers):
            for j in traces[i].experts.tolist():
                e = model.experts[i][j]
                pred[i].append(predict_mask(traces[i - 1].h, e.up_q, e.threshold))
                true[i].append(traces[i].masks[j])
    out = [PredictionMetrics(float("nan"), float("nan"), 0)]
    out += [eval_predictions(pred[i], true[i]) for i in range(1, c.layers)]
    return out


def metrics_csv(metrics: Sequence[PredictionMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for i, m in enumerate(metrics):
        if m.samples:
            w.writerow([i, f"{m.precision:.6f}", f"{m.recall:.6f}", m.samples])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# memory footprints of learned channel predictors


def learned_predictor_footprint(d_hidden: int, d_intermediate: int, rank: int, blocks: int) -> int:
    """Low-rank FP16 predictor per block: ``(d_h*rank + rank*d_i) * 2 * blocks`` bytes."""
    return (d_hidden * rank + rank * d_intermediate) * 2 * blocks


def sign_bit_footprint(d_intermediate: int, states: int, blocks: int) -> int:
    """Sign bits packed in 32-bit words: ``d_i * states * 4 * blocks`` bytes."""
    return d_intermediate * states * 4 * blocks


# ---------------------------------------------------------------------------
# file format: magic, version, layers, d_hidden, experts (u32), then per layer
# i >= 1 the row-major float32 weights followed by the float32 bias.

_HEADER = struct.Struct("<4sIIII")


def predictor_bytes(p: InterExpertPredictor) -> bytes:
    d_h, n = p.weights[1].shape if p.layers > 1 else (0, 0)
    parts = [_HEADER.pack(PREDICTOR_MAGIC, FORMAT_VERSION, p.layers, d_h, n)]
    for W, b in zip(p.weights[1:], p.biases[1:]):
        parts.append(np.asarray(W, dtype="<f4").tobytes(order="C"))
        parts.append(np.asarray(b, dtype="<f4").tobytes())
    return b"".join(parts)


def predictor_from_bytes(data: bytes) -> InterExpertPredictor:
    magic, version, layers, d_h, n = _HEADER.unpack_from(data, 0)
    if magic != PREDICTOR_MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported predictor version {version}")
    expected = _HEADER.size + max(layers - 1, 0) * 4 * (d_h * n + n)
    if len(data) != expected:
        raise ValueError(f"predictor file has {len(data)} bytes, expected {expected}")
    pos = _HEADER.size
    weights: list[np.ndarray | None] = [None]
    biases: list[np.ndarray | None] = [None]
    for _ in range(1, layers):
        W = np.frombuffer(data, "<f4", d_h * n, pos).reshape(d_h, n).astype(DTYPE)
        pos += 4 * d_h * n
        b = np.frombuffer(data, "<f4", n, pos).astype(DTYPE)
        pos += 4 * n
        weights.append(W)
        biases.append(b)
    return InterExpertPredictor(weights, biases)
