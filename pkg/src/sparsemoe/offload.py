"""Compact channel layout, transfer cost model, expert cache and decode simulator.

The simulator replays the true per-token behaviour of a compressed model (its
routed experts and calibrated channel masks) against a parametric PCIe model.
Each expert is fetched as its whole quantized up projection plus the
gate-column/down-row records of the channels a token activates. For every layer
``i`` the prefetch planned for ``i`` is issued while layer ``i-1`` computes.
Any prefetch time left over when ``i`` starts is stall, and whatever the true
activation still misses is fetched synchronously:

    latency(token) = sum_i compute_i + max(0, prefetch_i - window_i) + sync_i
"""

from __future__ import annotations

import csv
import io
import math
import time
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .linalg import DTYPE
from .model import SPARSE, CompressedExpert, CompressedModel, forward_trace, masked_expert
from .predictors import InterExpertPredictor, predict_experts, predict_mask

COMPACT = "compact"
SPLIT = "split"

ORACLE = "oracle"
NONE = "none"
PREDICTED = "predicted"

TIMELINE_HEADER = ("token", "layer", "compute_s", "transfer_s", "stall_s", "sync_fetch_s")
SUMMARY_HEADER = ("tokens", "total_s", "tps", "bytes_transferred", "cache_hit_rate")


# ---------------------------------------------------------------------------
# compact layout


@dataclass
class CompactLayout:
    """Selected channel records; record ``r`` is ``[gate[:, c], down_t[c, :]]``."""

    channels: np.ndarray
    records: np.ndarray  # len(channels) x 2*d_hidden
    chunk_size: int

    @property
    def d_hidden(self) -> int:
        return self.records.shape[1] // 2

    @property
    def element_bytes(self) -> int:
        return self.records.dtype.itemsize

    @property
    def record_bytes(self) -> int:
        return 2 * self.d_hidden * self.element_bytes

    @property
    def nbytes(self) -> int:
        return len(self.channels) * self.record_bytes

    @property
    def n_requests(self) -> int:
        return channel_requests(len(self.channels), self.chunk_size, COMPACT)

    def requests(self) -> list[np.ndarray]:
        """Contiguous chunks of at most ``chunk_size`` records, one per transfer request."""
        return [self.records[s : s + self.chunk_size] for s in range(0, len(self.channels), self.chunk_size)]

    def unpack(self) -> tuple[np.ndarray, np.ndarray]:
        """Gate columns (``d_hidden x k``) and down rows (``k x d_hidden``) of the selection."""
        d = self.d_hidden
        return self.records[:, :d].T.copy(), self.records[:, d:].copy()


def compact_records(e: CompressedExpert, dtype=DTYPE) -> np.ndarray:
    """Whole-expert host layout: one contiguous record per intermediate channel."""
    return np.ascontiguousarray(np.concatenate([e.gate.T, e.down_t], axis=1), dtype=dtype)


def pack_compact(e: CompressedExpert, mask, chunk_size: int = 16, dtype=DTYPE) -> CompactLayout:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (e.d_intermediate,):
        raise ValueError(f"mask length {mask.shape} does not match d_intermediate={e.d_intermediate}")
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    channels = np.flatnonzero(mask)
    return CompactLayout(channels, compact_records(e, dtype)[channels], chunk_size)


def channel_requests(count: int, chunk_size: int, layout: str = COMPACT) -> int:
    """Transfer requests for ``count`` channels; the split layout moves gate and down separately."""
    per = -(-count // chunk_size)
    if layout == COMPACT:
        return per
    if layout == SPLIT:
        return 2 * per
    raise ValueError(f"unknown layout {layout!r}")


# ---------------------------------------------------------------------------
# cost models


@dataclass(frozen=True)
class TransferModel:
    bandwidth: float = 25e9  # bytes / s over the link
    request_overhead: float = 5e-6  # s per request, divided across streams
    pack_rate: float = 100e9  # bytes / s of host-side packing
    streams: int = 1

    def __post_init__(self):
        if not (self.bandwidth > 0 and self.request_overhead > 0 and self.pack_rate > 0 and self.streams > 0):
            raise ValueError("transfer model parameters must be positive")

    def transfer_time(self, nbytes: float, n_requests: int) -> float:
        if nbytes < 0 or n_requests < 0:
            raise ValueError("bytes and requests must be nonnegative")
        return n_requests * self.request_overhead / self.streams + nbytes / self.pack_rate + nbytes / self.bandwidth


def transfer_time(nbytes: float, n_requests: int, tm: TransferModel) -> float:
    return tm.transfer_time(nbytes, n_requests)


@dataclass(frozen=True)
class ComputeModel:
    """Expert time ``c0 + c1 * (up flops + density * (gate + down flops))``."""

    c0: float
    c1: float

    def __post_init__(self):
        if self.c0 < 0 or self.c1 < 0:
            raise ValueError("compute constants must be nonnegative")

    def expert_time(self, d_hidden: int, d_intermediate: int, density: float) -> float:
        dense = 2.0 * d_hidden * d_intermediate
        return self.c0 + self.c1 * (dense + density * 2.0 * dense)

    @classmethod
    def benchmark(cls, d_hidden: int, d_intermediate: int, repeats: int = 50, seed: int = 0) -> "ComputeModel":
        """Fit ``c0, c1`` from host timings of the masked kernel at two densities."""
        rng = np.random.default_rng(seed)
        gate = np.asfortranarray(rng.standard_normal((d_hidden, d_intermediate)).astype(DTYPE))
        down_t = rng.standard_normal((d_intermediate, d_hidden)).astype(DTYPE)
        x = rng.standard_normal(d_hidden).astype(DTYPE)
        v = rng.standard_normal(d_intermediate).astype(DTYPE)
        points = []
        for density in (0.1, 1.0):
            t = float(np.quantile(np.abs(v), 1.0 - density)) if density < 1 else 0.0
            masked_expert(x, gate, v, t, down_t)
            start = time.perf_counter()
            for _ in range(repeats):
                masked_expert(x, gate, v, t, down_t)
            elapsed = (time.perf_counter() - start) / repeats
            points.append((2.0 * d_hidden * d_intermediate * (1 + 2 * density), elapsed))
        (f0, t0), (f1, t1) = points
        c1 = max((t1 - t0) / (f1 - f0), 0.0)
        return cls(max(t0 - c1 * f0, 0.0), c1)


# ---------------------------------------------------------------------------
# expert cache


@dataclass
class _Entry:
    up: bool = False
    channels: set = field(default_factory=set)


class CacheState:
    """Byte-budgeted LRU cache of partially resident compressed experts."""

    def __init__(self, capacity: float, up_bytes: int, record_bytes: int, d_intermediate: int):
        self.capacity = capacity
        self.up_bytes = up_bytes
        self.record_bytes = record_bytes
        self.max_entry = up_bytes + d_intermediate * record_bytes
        if capacity < self.max_entry:
            raise ValueError(
                f"cache capacity {capacity} bytes is smaller than one compressed expert ({self.max_entry} bytes)"
            )
        self.entries: OrderedDict[tuple[int, int], _Entry] = OrderedDict()
        self.used = 0
        self.evictions = 0

    def entry_bytes(self, e: _Entry) -> int:
        return (self.up_bytes if e.up else 0) + len(e.channels) * self.record_bytes

    def missing(self, key, channels) -> tuple[bool, set]:
        e = self.entries.get(key)
        if e is None:
            return True, set(channels)
        return (not e.up), set(channels) - e.channels

    def resident_units(self, key, channels) -> set:
        e = self.entries.get(key)
        if e is None:
            return set()
        units = {("up",)} if e.up else set()
        return units | {("ch", c) for c in channels if c in e.channels}

    def touch(self, key) -> None:
        if key in self.entries:
            self.entries.move_to_end(key)

    def _evict_for(self, need: int, key, protect: set) -> None:
        while self.used + need > self.capacity:
            victim = next((k for k in self.entries if k != key and k not in protect), None)
            if victim is None:
                victim = next(k for k in self.entries if k != key)
            self.used -= self.entry_bytes(self.entries.pop(victim))
            self.evictions += 1

    def insert(self, key, up: bool, channels, protect: set = frozenset()) -> int:
        """Make ``up`` (if set) and ``channels`` resident; returns the bytes added."""
        e = self.entries.get(key)
        add_up = up and not (e is not None and e.up)
        new = set(channels) - (e.channels if e is not None else set())
        need = (self.up_bytes if add_up else 0) + len(new) * self.record_bytes
        if need == 0:
            self.touch(key)
            return 0
        self._evict_for(need, key, protect)
        e = self.entries.setdefault(key, _Entry())
        e.up = e.up or add_up
        e.channels |= new
        self.used += need
        self.entries.move_to_end(key)
        return need


# ---------------------------------------------------------------------------
# simulation


@dataclass
class LayerTiming:
    token: int
    layer: int
    compute_s: float
    transfer_s: float
    stall_s: float
    sync_fetch_s: float

    @property
    def latency(self) -> float:
        return self.compute_s + self.stall_s + self.sync_fetch_s


@dataclass
class DecodeTimeline:
    rows: list[LayerTiming]
    tokens: int
    layers: int
    demand_bytes: int = 0
    hit_bytes: int = 0
    prefetched_used_bytes: int = 0
    sync_bytes: int = 0
    prefetch_bytes: int = 0
    requests: int = 0
    channel_requests: int = 0  # requests carrying gate/down records (excludes whole up transfers)

    def token_latencies(self) -> np.ndarray:
        lat = np.zeros(self.tokens)
        for r in self.rows:
            lat[r.token] += r.latency
        return lat

    def token_compute(self) -> np.ndarray:
        """Per-token compute time, summed in the same order as :meth:`token_latencies`."""
        comp = np.zeros(self.tokens)
        for r in self.rows:
            comp[r.token] += r.compute_s
        return comp

    @property
    def total_s(self) -> float:
        return float(self.token_latencies().sum())

    @property
    def total_stall(self) -> float:
        return float(sum(r.stall_s for r in self.rows))

    @property
    def total_compute(self) -> float:
        return float(sum(r.compute_s for r in self.rows))

    @property
    def tps(self) -> float:
        total = self.total_s
        return self.tokens / total if total > 0 else math.inf

    @property
    def bytes_transferred(self) -> int:
        return self.prefetch_bytes + self.sync_bytes

    @property
    def cache_hit_rate(self) -> float:
        return self.hit_bytes / self.demand_bytes if self.demand_bytes else 1.0

    def conservation_holds(self) -> bool:
        """Every demanded byte was either already resident, prefetched, or fetched synchronously."""
        return self.hit_bytes + self.prefetched_used_bytes + self.sync_bytes == self.demand_bytes


@dataclass(frozen=True)
class SimConfig:
    prefetch: str = PREDICTED  # predicted | oracle | none
    prefetch_count: int | None = None  # experts prefetched per layer; defaults to top_k
    chunk_size: int = 16
    layout: str = COMPACT
    element_bytes: int = 2
    oracle_recall: float = 1.0  # oracle mode: fraction of true channels predicted
    prefill_window: float = math.inf  # time to prefetch the first layer before decode begins
    seed: int = 0


def _oracle_plan(tr, recall: float, rng_seed: tuple) -> dict[int, np.ndarray]:
    plan = {}
    for j in tr.experts.tolist():
        mask = tr.masks[j]
        if recall < 1.0:
            u = np.random.default_rng(rng_seed + (j,)).random(mask.shape[0])
            mask = mask & (u < recall)
        plan[j] = mask
    return plan


def simulate_decode(
    model: CompressedModel,
    tokens,
    tm: TransferModel,
    compute: ComputeModel,
    cache_capacity: float,
    predictor: InterExpertPredictor | None = None,
    config: SimConfig = SimConfig(),
) -> DecodeTimeline:
    """Replay decode of ``tokens`` through the offloading pipeline.

    ``config.prefetch`` picks the lookahead: ``"predicted"`` uses the learned
    expert predictor plus the reuse-based channel predictor (layer 0 gets no
    lookahead), ``"oracle"`` prefetches the true experts and channels (thinned
    to ``oracle_recall``), ``"none"`` fetches everything on demand.
    """
    c = model.config
    if config.prefetch not in (PREDICTED, ORACLE, NONE):
        raise ValueError(f"unknown prefetch mode {config.prefetch!r}")
    if config.prefetch == PREDICTED and predictor is None:
        raise ValueError("predicted prefetch needs an inter-expert predictor")
    k_pref = config.prefetch_count or c.top_k
    if not c.top_k <= k_pref <= c.experts:
        raise ValueError("prefetch_count must lie in [top_k, experts]")

    up_bytes = model.experts[0][0].up_bytes(include_metadata=True)
    record_bytes = 2 * c.d_hidden * config.element_bytes
    cache = CacheState(cache_capacity, up_bytes, record_bytes, c.d_intermediate)

    traces = [forward_trace(model, np.asarray(x, dtype=DTYPE), SPARSE) for x in tokens]
    tl = DecodeTimeline([], len(traces), c.layers)
    window = config.prefill_window

    def requests_for(up: bool, n_channels: int) -> int:
        n = channel_requests(n_channels, config.chunk_size, config.layout)
        tl.channel_requests += n
        return int(up) + n

    for tau, tr_tok in enumerate(traces):
        for i, tr in enumerate(tr_tok):
            # plan for layer i, issued while the previous layer computed
            if config.prefetch == ORACLE:
                plan = _oracle_plan(tr, config.oracle_recall, (config.seed, tau, i))
            elif config.prefetch == PREDICTED and i > 0:
                h_prev = tr_tok[i - 1].h
                plan = {
                    j: predict_mask(h_prev, model.experts[i][j].up_q, model.experts[i][j].threshold)
                    for j in predict_experts(predictor, h_prev, i, k_pref).tolist()
                }
            else:
                plan = {}

            true_keys = [(i, j) for j in tr.experts.tolist()]
            before = {key: cache.resident_units(key, np.flatnonzero(tr.masks[key[1]]).tolist()) for key in true_keys}

            pf_bytes = pf_requests = 0
            plan_keys = {(i, j) for j in plan}
            for j, mask in sorted(plan.items()):
                chans = np.flatnonzero(mask).tolist()
                need_up, need_ch = cache.missing((i, j), chans)
                added = cache.insert((i, j), True, chans, protect=plan_keys)
                if added:
                    pf_bytes += added
                    pf_requests += requests_for(need_up, len(need_ch))
            pf_time = tm.transfer_time(pf_bytes, pf_requests)
            stall = max(0.0, pf_time - window)

            sync_bytes = sync_requests = 0
            compute_s = 0.0
            for key in true_keys:
                mask = tr.masks[key[1]]
                chans = np.flatnonzero(mask).tolist()
                demand = up_bytes + len(chans) * record_bytes
                resident = cache.resident_units(key, chans)
                hit = before[key] & resident
                tl.demand_bytes += demand
                tl.hit_bytes += sum(up_bytes if u == ("up",) else record_bytes for u in hit)
                tl.prefetched_used_bytes += sum(
                    up_bytes if u == ("up",) else record_bytes for u in resident - hit
                )
                need_up, need_ch = cache.missing(key, chans)
                added = cache.insert(key, True, chans, protect=set(true_keys))
                if added:
                    sync_bytes += added
                    sync_requests += requests_for(need_up, len(need_ch))
                compute_s += compute.expert_time(c.d_hidden, c.d_intermediate, float(mask.mean()))
            for key in true_keys:
                cache.touch(key)
            sync_time = tm.transfer_time(sync_bytes, sync_requests)

            tl.prefetch_bytes += pf_bytes
            tl.sync_bytes += sync_bytes
            tl.requests += pf_requests + sync_requests
            tl.rows.append(LayerTiming(tau, i, compute_s, pf_time, stall, sync_time))
            window = compute_s
    return tl


def timeline_csv(t: DecodeTimeline) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TIMELINE_HEADER)
    for r in t.rows:
        w.writerow([r.token, r.layer, repr(r.compute_s), repr(r.transfer_s), repr(r.stall_s), repr(r.sync_fetch_s)])
    return buf.getvalue()


def report_tps(t: DecodeTimeline) -> list[dict]:
    """Per-token rows followed by one aggregate row (``token == "all"``)."""
    if t.tokens == 0:
        raise ValueError("empty timeline")
    rows = [
        {"token": n, "latency_s": float(lat), "tps": 1.0 / lat if lat > 0 else math.inf}
        for n, lat in enumerate(t.token_latencies())
    ]
    rows.append({"token": "all", "latency_s": t.total_s / t.tokens, "tps": t.tps})
    return rows


def tokens_csv(t: DecodeTimeline) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("token", "latency_s", "tps"))
    for r in report_tps(t):
        w.writerow([r["token"], repr(r["latency_s"]), repr(r["tps"])])
    return buf.getvalue()


def summary_csv(t: DecodeTimeline) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_HEADER)
    w.writerow([t.tokens, repr(t.total_s), repr(t.tps), t.bytes_transferred, repr(t.cache_hit_rate)])
    return buf.getvalue()
