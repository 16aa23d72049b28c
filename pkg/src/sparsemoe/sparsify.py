"""Magnitude sparsity, per-expert threshold calibration and activation statistics."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .linalg import DTYPE, cosine
from .model import DENSE, forward_trace

DEFAULT_RESERVOIR = 2**16
MIN_CALIBRATION_SAMPLES = 1000
THRESHOLD_HEADER = ("layer", "expert", "threshold", "target_sparsity")


def apply_sparsity(a, t: float) -> np.ndarray:
    """Zero every entry with ``|a| < t``; entries with ``|a| >= t`` are kept."""
    if t < 0:
        raise ValueError("threshold must be >= 0")
    a = np.asarray(a)
    return np.where(np.abs(a) >= t, a, np.zeros_like(a))


def realized_density(a, t: float) -> float:
    """Fraction of entries that survive :func:`apply_sparsity`."""
    if t < 0:
        raise ValueError("threshold must be >= 0")
    a = np.asarray(a)
    if a.size == 0:
        return 0.0
    return float(np.count_nonzero(np.abs(a) >= t)) / a.size


def quantile_threshold(abs_values, k: float) -> float:
    """Smallest sample ``v`` whose empirical CDF ``#(|a| <= v) / N`` reaches ``k``."""
    if not 0 <= k < 1:
        raise ValueError("target sparsity must lie in [0, 1)")
    s = np.sort(np.asarray(abs_values, dtype=np.float64).ravel())
    if s.size == 0:
        raise ValueError("cannot calibrate on an empty sample")
    if k == 0:
        return 0.0
    # guard k*N against representation error (0.7 * 100 must give 70)
    rank = math.ceil(k * s.size - 1e-9 * s.size)
    return float(s[max(rank, 1) - 1])


class Reservoir:
    """Uniform reservoir of at most ``cap`` values (Algorithm R)."""

    def __init__(self, cap: int, rng: np.random.Generator):
        if cap < 1:
            raise ValueError("reservoir cap must be >= 1")
        self.cap = cap
        self.rng = rng
        self.seen = 0
        self._buf = np.empty(cap, dtype=DTYPE)

    def extend(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=DTYPE).ravel()
        fill = min(max(self.cap - self.seen, 0), values.size)
        self._buf[self.seen : self.seen + fill] = values[:fill]
        rest = values[fill:]
        if rest.size:
            positions = self.seen + fill + np.arange(rest.size)
            slots = self.rng.integers(0, positions + 1)
            for slot, v in zip(slots.tolist(), rest.tolist()):
                if slot < self.cap:
                    self._buf[slot] = v
        self.seen += values.size

    @property
    def values(self) -> np.ndarray:
        return self._buf[: min(self.seen, self.cap)]


@dataclass
class ActivationSampleSet:
    """Retained ``|a_up|`` samples per (layer, expert)."""

    layers: int
    experts: int
    cap: int = DEFAULT_RESERVOIR
    seed: int = 0
    reservoirs: list[list[Reservoir]] = field(default_factory=list)

    def __post_init__(self):
        if not self.reservoirs:
            root = np.random.SeedSequence(self.seed)
            streams = root.spawn(self.layers * self.experts)
            self.reservoirs = [
                [Reservoir(self.cap, np.random.default_rng(streams[i * self.experts + j])) for j in range(self.experts)]
                for i in range(self.layers)
            ]

    def add(self, layer: int, expert: int, values) -> None:
        v = np.abs(np.asarray(values, dtype=DTYPE))
        if not np.all(np.isfinite(v)):
            raise ValueError("activation samples must be finite")
        self.reservoirs[layer][expert].extend(v)

    def samples(self, layer: int, expert: int) -> np.ndarray:
        return self.reservoirs[layer][expert].values

    def counts(self) -> np.ndarray:
        """Number of activations observed per expert (before reservoir capping)."""
        return np.array([[r.seen for r in row] for row in self.reservoirs], dtype=np.int64)


@dataclass
class SimilarityReport:
    """Cosine similarity between MoE-block inputs of consecutive layers."""

    per_token: np.ndarray  # tokens x (layers - 1)

    @property
    def samples(self) -> int:
        return self.per_token.shape[0]

    @property
    def mean(self) -> np.ndarray:
        if self.samples == 0:
            return np.full(self.per_token.shape[1], np.nan)
        return self.per_token.mean(axis=0)


@dataclass
class ThresholdTable:
    thresholds: np.ndarray  # layers x experts
    target_sparsity: float

    def __post_init__(self):
        self.thresholds = np.asarray(self.thresholds, dtype=np.float64)
        if self.thresholds.ndim != 2:
            raise ValueError("threshold table must be layers x experts")
        if np.any(self.thresholds < 0) or not np.all(np.isfinite(self.thresholds)):
            raise ValueError("thresholds must be finite and >= 0")
        if not 0 <= self.target_sparsity < 1:
            raise ValueError("target sparsity must lie in [0, 1)")

    @property
    def layers(self) -> int:
        return self.thresholds.shape[0]

    @property
    def experts(self) -> int:
        return self.thresholds.shape[1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(THRESHOLD_HEADER)
        for i in range(self.layers):
            for j in range(self.experts):
                w.writerow([i, j, repr(float(self.thresholds[i, j])), repr(float(self.target_sparsity))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ThresholdTable":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(rows[0]) != THRESHOLD_HEADER:
            raise ValueError(f"threshold CSV must start with header {','.join(THRESHOLD_HEADER)}")
        body = [(int(r[0]), int(r[1]), float(r[2]), float(r[3])) for r in rows[1:] if r]
        if not body:
            raise ValueError("threshold CSV has no rows")
        layers = max(r[0] for r in body) + 1
        experts = max(r[1] for r in body) + 1
        if len(body) != layers * experts:
            raise ValueError("threshold CSV does not cover every (layer, expert)")
        t = np.full((layers, experts), np.nan)
        ks = {r[3] for r in body}
        if len(ks) != 1:
            raise ValueError("threshold CSV mixes target sparsities")
        for i, j, v, _ in body:
            t[i, j] = v
        return cls(t, ks.pop())


def calibrate(
    samples: ActivationSampleSet, k: float, min_samples: int = MIN_CALIBRATION_SAMPLES
) -> ThresholdTable:
    """Per-expert threshold at the ``k``-quantile of retained ``|a_up|`` samples."""
    t = np.zeros((samples.layers, samples.experts))
    for i in range(samples.layers):
        for j in range(samples.experts):
            s = samples.samples(i, j)
            if s.size == 0:
                raise ValueError(f"expert ({i}, {j}) has no calibration samples")
            if s.size < min_samples:
                raise ValueError(f"expert ({i}, {j}) has {s.size} samples, need {min_samples}")
            t[i, j] = quantile_threshold(s, k)
    return ThresholdTable(t, k)


def _trace_token(model, x):
    traces = forward_trace(model, x, DENSE)
    ups = [[(j, tr.up_out[j]) for j in tr.experts.tolist()] for tr in traces]
    hs = [tr.h for tr in traces]
    return ups, hs


def collect_stats(
    model,
    tokens: Iterable[np.ndarray],
    cap: int = DEFAULT_RESERVOIR,
    seed: int = 0,
    workers: int = 1,
) -> tuple[ActivationSampleSet, SimilarityReport]:
    """Dense forward passes recording ``|a_up|`` per visited expert and hidden-state similarity.

    Tokens may be traced by several worker threads; samples are merged in token
    order so the result does not depend on ``workers``.
    """
    c = model.config
    stats = ActivationSampleSet(c.layers, c.experts, cap, seed)
    tokens = list(tokens)
    if not tokens:
        raise ValueError("token stream is empty")
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(lambda x: _trace_token(model, x), tokens))
    else:
        results = [_trace_token(model, x) for x in tokens]
    sims = np.empty((len(tokens), c.layers - 1))
    for n, (ups, hs) in enumerate(results):
        for i, layer_ups in enumerate(ups):
            for j, v in layer_ups:
                stats.add(i, j, v)
        for i in range(c.layers - 1):
            sims[n, i] = cosine(hs[i], hs[i + 1])
    return stats, SimilarityReport(sims)
