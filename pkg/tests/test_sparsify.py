import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from sparsemoe.model import MoEConfig, forward_trace, gen_model, token_stream, with_residual_scale
from sparsemoe.sparsify import (
    ActivationSampleSet,
    Reservoir,
    ThresholdTable,
    apply_sparsity,
    calibrate,
    collect_stats,
    quantile_threshold,
    realized_density,
)

vec = arrays(np.float64, st.integers(1, 50), elements=st.floats(-1e3, 1e3))
thr = st.floats(0, 1e3)


def test_apply_sparsity_examples(rng):
    a = np.array([0.5, -0.2, 0.9])
    assert apply_sparsity(a, 0.3).tolist() == [0.5, 0.0, 0.9]
    assert np.array_equal(apply_sparsity(a, 0.0), a)
    assert apply_sparsity(np.array([0.3]), 0.3).tolist() == [0.3]  # keep on equality
    with pytest.raises(ValueError):
        apply_sparsity(a, -1)
    g = rng.standard_normal(1000)
    t = np.sort(np.abs(g))[899]
    assert abs(realized_density(g, t) - 0.10) <= 0.01


@given(vec, thr)
def test_idempotent(a, t):
    once = apply_sparsity(a, t)
    assert np.array_equal(apply_sparsity(once, t), once)


@given(vec, thr, thr)
def test_support_monotone(a, t1, t2):
    lo, hi = sorted((t1, t2))
    assert np.all(apply_sparsity(a, lo)[apply_sparsity(a, hi) != 0] != 0)


@given(vec, thr, st.sampled_from([0.5, 2.0, 4.0]))
def test_scale_equivariance(a, t, alpha):
    assert np.array_equal(apply_sparsity(alpha * a, alpha * t), alpha * apply_sparsity(a, t))


def test_realized_density_edges(rng):
    a = rng.standard_normal(20)
    a[3] = 0.0
    assert realized_density(a, 0.0) == 1.0
    assert realized_density(a, np.abs(a).max() + 1) == 0.0


def test_quantile_threshold_examples(rng):
    assert quantile_threshold(np.arange(1, 101), 0.7) == 70
    assert quantile_threshold(np.arange(1, 101), 0.0) == 0.0
    t = quantile_threshold(np.abs(rng.standard_normal(10**5)), 0.5)
    assert abs(t - 0.674) <= 0.02
    with pytest.raises(ValueError):
        quantile_threshold([], 0.5)
    with pytest.raises(ValueError):
        quantile_threshold([1.0], 1.0)


@settings(max_examples=60)
@given(arrays(np.float64, st.integers(1, 300), elements=st.floats(0, 100)), st.floats(0, 0.99))
def test_calibration_consistency(s, k):
    t = quantile_threshold(s, k)
    pruned = 1.0 - realized_density(s, t)
    # ties at t are kept, so the pruned mass can only fall short by the tied mass
    ties = np.count_nonzero(s == t) / s.size if k > 0 else 0.0
    assert k - 1 / s.size - ties - 1e-12 <= pruned <= k + 1 / s.size + 1e-12


def test_reservoir_is_uniform_and_capped():
    res = Reservoir(100, np.random.default_rng(0))
    for chunk in np.array_split(np.arange(10_000, dtype=np.float32), 37):
        res.extend(chunk)
    assert res.seen == 10_000 and res.values.size == 100
    assert abs(res.values.mean() - 5000) < 900


def test_calibrate_requires_samples():
    s = ActivationSampleSet(1, 2, cap=64)
    s.add(0, 0, np.ones(2000))
    with pytest.raises(ValueError):
        calibrate(s, 0.5)
    s.add(0, 1, np.ones(10))
    with pytest.raises(ValueError):
        calibrate(s, 0.5)
    with pytest.raises(ValueError):
        s.add(0, 0, [np.nan])


def test_threshold_table_csv_round_trip():
    t = ThresholdTable(np.array([[0.1, 0.25], [1 / 3, 0.0]]), 0.9)
    text = t.to_csv()
    assert text.startswith("layer,expert,threshold,target_sparsity\n") and text.endswith("\n")
    back = ThresholdTable.from_csv(text)
    assert np.array_equal(back.thresholds, t.thresholds) and back.target_sparsity == 0.9
    with pytest.raises(ValueError):
        ThresholdTable.from_csv("a,b\n")
    with pytest.raises(ValueError):
        ThresholdTable(np.array([[-1.0]]), 0.5)


def test_collect_stats_counts_match_independent_counter():
    model = gen_model(MoEConfig(3, 4, 2, 16, 32, seed=1))
    tokens = list(token_stream(16, 100, 2))
    stats, sim = collect_stats(model, tokens, cap=10**6)
    visits = np.zeros((3, 4), dtype=int)
    for x in tokens:
        for i, tr in enumerate(forward_trace(model, x)):
            visits[i, tr.experts] += 1
    assert np.array_equal(stats.counts(), visits * 32)
    assert visits.sum() == 3 * 2 * 100
    assert sim.per_token.shape == (100, 2)
    assert np.all(np.abs(sim.per_token) <= 1)


def test_similarity_one_for_identity_model():
    model = with_residual_scale(gen_model(MoEConfig(2, 4, 1, 8, 16, seed=0)), 0.0)
    x = next(token_stream(8, 1, 0))
    _, sim = collect_stats(model, [x, x, x])
    assert sim.per_token.shape == (3, 1)
    assert np.allclose(sim.mean, 1.0)


def test_collect_stats_worker_independent():
    model = gen_model(MoEConfig(2, 4, 2, 16, 32, seed=3))
    a, sa = collect_stats(model, token_stream(16, 60, 1), cap=500, seed=5, workers=1)
    b, sb = collect_stats(model, token_stream(16, 60, 1), cap=500, seed=5, workers=3)
    for i in range(2):
        for j in range(4):
            assert np.array_equal(a.samples(i, j), b.samples(i, j))
    assert np.array_equal(sa.per_token, sb.per_token)
    with pytest.raises(ValueError):
        collect_stats(model, [])
