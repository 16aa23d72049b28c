import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sparsemoe.linalg import DTYPE
from sparsemoe.model import ExpertWeights, compress_expert, token_stream
from sparsemoe.offload import (
    COMPACT,
    NONE,
    ORACLE,
    SPLIT,
    CacheState,
    ComputeModel,
    DecodeTimeline,
    LayerTiming,
    SimConfig,
    TransferModel,
    channel_requests,
    pack_compact,
    report_tps,
    simulate_decode,
    summary_csv,
    timeline_csv,
    tokens_csv,
    transfer_time,
)

TM = TransferModel()
CM = ComputeModel(1e-5, 1e-10)


def _cexpert(rng, d_h=16, d_i=32):
    draw = lambda shape: rng.standard_normal(shape).astype(DTYPE)
    return compress_expert(ExpertWeights(draw((d_h, d_i)), draw((d_h, d_i)), draw((d_i, d_h))), 2, 0.5)


# ---------------------------------------------------------------------------
# layout and transfer cost


def test_transfer_time_examples():
    assert transfer_time(0, 0, TM) == 0.0
    assert transfer_time(16384, 1, TM) == pytest.approx(5e-6 + 1.6384e-7 + 6.5536e-7)
    assert transfer_time(16384, 1, TM) == pytest.approx(5.82e-6, abs=1e-8)
    with pytest.raises(ValueError):
        transfer_time(-1, 0, TM)
    with pytest.raises(ValueError):
        TransferModel(bandwidth=0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5000), st.integers(1, 64))
def test_doubling_chunk_never_slower(count, chunk):
    nbytes = count * 16384
    slow = transfer_time(nbytes, channel_requests(count, chunk), TM)
    fast = transfer_time(nbytes, channel_requests(count, 2 * chunk), TM)
    assert fast <= slow
    if count > chunk:
        assert fast < slow


def test_split_layout_doubles_requests():
    for count in (0, 1, 15, 16, 17, 1000):
        assert channel_requests(count, 16, SPLIT) == 2 * channel_requests(count, 16, COMPACT)
    with pytest.raises(ValueError):
        channel_requests(3, 16, "zigzag")


def test_pack_compact_round_trip(rng):
    e = _cexpert(rng)
    mask = rng.random(32) < 0.4
    lay = pack_compact(e, mask, chunk_size=4)
    gate, down = lay.unpack()
    assert np.array_equal(gate, e.gate[:, mask])
    assert np.array_equal(down, e.down_t[mask])
    assert lay.nbytes == mask.sum() * 2 * 16 * 4
    assert lay.n_requests == len(lay.requests()) == -(-int(mask.sum()) // 4)
    assert np.array_equal(np.concatenate(lay.requests()), lay.records)


def test_pack_compact_sizes(rng):
    d_h = 4096
    gate = np.zeros((d_h, 2), DTYPE)
    e = compress_expert(ExpertWeights(gate, gate, gate.T), 2, 0.0, group_size=64)
    lay = pack_compact(e, np.ones(2, bool), dtype=np.float16)
    assert lay.record_bytes == 16_384
    empty = pack_compact(e, np.zeros(2, bool))
    assert empty.nbytes == 0 and empty.n_requests == 0 and empty.requests() == []
    with pytest.raises(ValueError):
        pack_compact(e, np.ones(3, bool))


# ---------------------------------------------------------------------------
# cache


def test_cache_lru_and_capacity():
    cache = CacheState(capacity=300, up_bytes=100, record_bytes=10, d_intermediate=10)
    for j in range(3):
        cache.insert((0, j), True, [])
    assert list(cache.entries) == [(0, 0), (0, 1), (0, 2)]
    cache.touch((0, 0))
    cache.insert((0, 3), True, [])
    # (0, 1) was least recently used
    assert list(cache.entries) == [(0, 2), (0, 0), (0, 3)]
    assert cache.used == 300 and cache.evictions == 1
    assert cache.insert((0, 3), True, []) == 0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.booleans(), st.sets(st.integers(0, 9), max_size=10)), max_size=60))
def test_cache_never_exceeds_capacity(ops):
    cache = CacheState(capacity=450, up_bytes=100, record_bytes=20, d_intermediate=10)
    for j, up, chans in ops:
        cache.insert((0, j), up, chans)
        assert cache.used <= cache.capacity
        assert cache.used == sum(cache.entry_bytes(e) for e in cache.entries.values())


def test_cache_rejects_tiny_capacity():
    with pytest.raises(ValueError):
        CacheState(capacity=100, up_bytes=100, record_bytes=10, d_intermediate=10)


# ---------------------------------------------------------------------------
# simulation


@pytest.fixture(scope="module")
def tokens():
    return list(token_stream(64, 6, 11))


def _full_capacity(comp, element_bytes=2):
    c = comp.config
    per = comp.experts[0][0].up_bytes() + c.d_intermediate * 2 * c.d_hidden * element_bytes
    return per * c.layers * c.experts


def _sim(comp, tokens, cap=None, tm=TM, **kw):
    return simulate_decode(comp, tokens, tm, CM, cap or _full_capacity(comp) // 4, config=SimConfig(**kw))


def test_capacity_error(toy, tokens):
    _, comp = toy
    with pytest.raises(ValueError, match="capacity"):
        simulate_decode(comp, tokens, TM, CM, 1000, config=SimConfig(prefetch=NONE))


def test_mode_errors(toy, tokens):
    _, comp = toy
    with pytest.raises(ValueError):
        _sim(comp, tokens, prefetch="psychic")
    with pytest.raises(ValueError):
        _sim(comp, tokens, prefetch="predicted")
    with pytest.raises(ValueError):
        _sim(comp, tokens, prefetch=ORACLE, prefetch_count=1)


def test_perfect_overlap_has_no_stall(toy, tokens):
    _, comp = toy
    slow = ComputeModel(1.0, 0.0)  # every layer computes far longer than any transfer
    tl = simulate_decode(comp, tokens, TM, slow, _full_capacity(comp) // 4, config=SimConfig(prefetch=ORACLE))
    assert tl.total_stall == 0.0
    assert sum(r.sync_fetch_s for r in tl.rows) == 0.0
    assert np.array_equal(tl.token_latencies(), tl.token_compute())


def test_no_prefetch_is_slower(toy, tokens):
    _, comp = toy
    oracle = _sim(comp, tokens, prefetch=ORACLE)
    none = _sim(comp, tokens, prefetch=NONE)
    assert none.total_s > oracle.total_s
    assert none.prefetch_bytes == 0


def test_warm_infinite_cache_transfers_nothing(toy):
    _, comp = toy
    x = next(token_stream(64, 1, 3))
    tl = _sim(comp, [x, x, x], cap=math.inf, prefetch=NONE)
    later = [r for r in tl.rows if r.token > 0]
    assert all(r.transfer_s == 0 and r.sync_fetch_s == 0 and r.stall_s == 0 for r in later)
    assert np.array_equal(tl.token_latencies()[1:], tl.token_compute()[1:])


@pytest.mark.parametrize("mode", [ORACLE, NONE])
def test_conservation(toy, tokens, mode):
    _, comp = toy
    tl = _sim(comp, tokens, prefetch=mode)
    assert tl.conservation_holds()
    assert tl.bytes_transferred >= tl.sync_bytes
    assert all(r.compute_s >= 0 and r.stall_s >= 0 and r.sync_fetch_s >= 0 for r in tl.rows)


def test_tps_monotone_in_bandwidth_and_recall(toy, tokens):
    _, comp = toy
    tps = [_sim(comp, tokens, tm=TransferModel(bandwidth=b), prefetch=ORACLE).tps for b in (1e9, 5e9, 25e9, 100e9)]
    assert all(a <= b for a, b in zip(tps, tps[1:]))
    tps = [_sim(comp, tokens, prefetch=ORACLE, oracle_recall=r).tps for r in (0.0, 0.5, 0.9, 1.0)]
    assert all(a <= b for a, b in zip(tps, tps[1:]))


def test_tps_monotone_in_capacity(toy, tokens):
    _, comp = toy
    full = _full_capacity(comp)
    tps = [_sim(comp, tokens, cap=full * f, prefetch=NONE).tps for f in (0.1, 0.25, 0.5, 1.0)]
    assert all(a <= b for a, b in zip(tps, tps[1:]))


def test_split_layout_doubles_channel_requests(toy, tokens):
    _, comp = toy
    compact = _sim(comp, tokens, prefetch=ORACLE, layout=COMPACT)
    split = _sim(comp, tokens, prefetch=ORACLE, layout=SPLIT)
    assert split.channel_requests == 2 * compact.channel_requests
    assert split.bytes_transferred == compact.bytes_transferred


def test_reports():
    tl = DecodeTimeline([LayerTiming(0, 0, 0.03, 0.0, 0.01, 0.01)], tokens=1, layers=1)
    assert tl.tps == pytest.approx(20.0)
    rows = report_tps(tl)
    assert rows[-1]["token"] == "all" and rows[-1]["tps"] == pytest.approx(20.0)
    even = DecodeTimeline([LayerTiming(t, 0, 0.1, 0, 0, 0) for t in range(3)], tokens=3, layers=1)
    rows = report_tps(even)
    assert rows[-1]["tps"] == pytest.approx(rows[0]["tps"])
    with pytest.raises(ValueError):
        report_tps(DecodeTimeline([], 0, 1))


def test_csv_is_deterministic(toy, tokens):
    _, comp = toy
    a, b = _sim(comp, tokens, prefetch=ORACLE, oracle_recall=0.7), _sim(comp, tokens, prefetch=ORACLE, oracle_recall=0.7)
    for fn in (timeline_csv, tokens_csv, summary_csv):
        assert fn(a) == fn(b)
    assert timeline_csv(a).splitlines()[0] == "token,layer,compute_s,transfer_s,stall_s,sync_fetch_s"
    assert summary_csv(a).splitlines()[0] == "tokens,total_s,tps,bytes_transferred,cache_hit_rate"


def test_compute_model():
    cm = ComputeModel(1.0, 2.0)
    assert cm.expert_time(2, 3, 0.5) == 1.0 + 2.0 * (12 + 0.5 * 24)
    with pytest.raises(ValueError):
        ComputeModel(-1, 0)
    fitted = ComputeModel.benchmark(64, 256, repeats=3)
    assert fitted.c0 >= 0 and fitted.c1 >= 0
