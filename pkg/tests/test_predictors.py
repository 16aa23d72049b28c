import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sparsemoe.linalg import DTYPE
from conftest import build_toy
from sparsemoe.model import MoEConfig, forward_trace, gen_model, token_stream
from sparsemoe.predictors import (
    ONE_VS_ALL,
    PAIRWISE,
    ExpertTrace,
    InterExpertPredictor,
    eval_predictions,
    expert_trace,
    fit_linear_scorer,
    inter_metrics,
    intra_metrics,
    learned_predictor_footprint,
    metrics_csv,
    predict_experts,
    predict_mask,
    predictor_bytes,
    predictor_from_bytes,
    sign_bit_footprint,
    train_inter,
)
from sparsemoe.quant import quantize


def test_eval_predictions_examples():
    m = eval_predictions([[1, 2]], [[1, 2]])
    assert (m.precision, m.recall, m.samples) == (1.0, 1.0, 1)
    m = eval_predictions([[0, 1]], [[2, 3]])
    assert (m.precision, m.recall) == (0.0, 0.0)
    m = eval_predictions([list(range(8))], [[3, 5]])
    assert (m.precision, m.recall) == (0.25, 1.0)
    # empty predictions: precision 1 only when nothing was needed
    assert eval_predictions([[]], [[]]).precision == 1.0
    assert eval_predictions([[]], [[1]]).precision == 0.0
    masks = eval_predictions([np.array([True, False, True])], [np.array([True, True, False])])
    assert (masks.precision, masks.recall) == (0.5, 0.5)
    with pytest.raises(ValueError):
        eval_predictions([[1]], [])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.sets(st.integers(0, 9)), st.sets(st.integers(0, 9))), min_size=1, max_size=20))
def test_eval_predictions_bounded(pairs):
    m = eval_predictions([sorted(p) for p, _ in pairs], [sorted(t) for _, t in pairs])
    assert 0 <= m.precision <= 1 and 0 <= m.recall <= 1


def _predictor(rng, layers=3, d=6, n=5):
    w = [None] + [rng.standard_normal((d, n)).astype(DTYPE) for _ in range(layers - 1)]
    b = [None] + [np.zeros(n, DTYPE) for _ in range(layers - 1)]
    return InterExpertPredictor(w, b)


def test_predict_experts(rng):
    p = _predictor(rng)
    x = rng.standard_normal(6)
    s = p.scores(x, 1).astype(np.float64)
    assert predict_experts(p, x, 1, 2).tolist() == sorted(np.argsort(-s, kind="stable")[:2].tolist())
    assert predict_experts(p, x, 1, 5).tolist() == list(range(5))
    flat = InterExpertPredictor([None, np.zeros((6, 5), DTYPE)], [None, np.zeros(5, DTYPE)])
    assert predict_experts(flat, x, 1, 3).tolist() == [0, 1, 2]
    with pytest.raises(ValueError):
        predict_experts(p, x, 0, 2)
    with pytest.raises(ValueError):
        predict_experts(p, x, 3, 2)


def test_predict_mask(rng):
    up = quantize(rng.standard_normal((16, 32)).astype(DTYPE), 2, 16)
    x = rng.standard_normal(16)
    assert predict_mask(x, up, 0.0).all()
    m1, m2 = predict_mask(x, up, 0.7), predict_mask(x, up, 0.7)
    assert np.array_equal(m1, m2) and 0 < m1.sum() < 32
    with pytest.raises(ValueError):
        predict_mask(x[:-1], up, 0.1)


def test_footprints():
    assert learned_predictor_footprint(4096, 14336, 1024, 256) == 9_663_676_416
    assert sign_bit_footprint(14336, 160, 256) == 2_348_810_240
    assert learned_predictor_footprint(4096, 14336, 0, 256) == 0


def test_fit_loss_does_not_increase(rng):
    X = rng.standard_normal((200, 6))
    Y = np.zeros((200, 4))
    Y[np.arange(200), np.argmax(X[:, :4], axis=1)] = 1
    for loss in (PAIRWISE, ONE_VS_ALL):
        _, _, hist = fit_linear_scorer(X, Y, lr=1.0, epochs=200, loss=loss)
        assert hist[-1] <= hist[0]
    with pytest.raises(ValueError):
        fit_linear_scorer(X, Y, loss="hinge")
    with pytest.raises(ValueError):
        fit_linear_scorer(X[:0], Y[:0])


def test_memorizes_single_repeated_sample(rng):
    x = rng.standard_normal(8)
    y = np.zeros(6)
    y[[1, 4]] = 1
    trace = ExpertTrace([np.zeros((0, 8)), np.tile(x, (100, 1))], [np.zeros((0, 6)), np.tile(y, (100, 1))])
    p = train_inter(trace, epochs=300)
    assert predict_experts(p, x, 1, 2).tolist() == [1, 4]


def test_train_inter_errors(rng):
    empty = ExpertTrace([np.zeros((0, 4)), np.zeros((0, 4))], [np.zeros((0, 3)), np.zeros((0, 3))])
    with pytest.raises(ValueError, match="empty"):
        train_inter(empty)
    small = ExpertTrace([np.zeros((0, 4)), np.ones((10, 4))], [np.zeros((0, 3)), np.ones((10, 3))])
    with pytest.raises(ValueError):
        train_inter(small)
    model = gen_model(MoEConfig(2, 4, 2, 8, 16))
    with pytest.raises(ValueError):
        expert_trace(model, [])


@pytest.fixture(scope="module")
def trained():
    model = gen_model(MoEConfig(3, 6, 2, 16, 32, seed=7))
    trace = expert_trace(model, token_stream(16, 200, 1))
    return model, trace, train_inter(trace, epochs=300, seed=2)


def test_train_is_deterministic(trained):
    _, trace, p = trained
    q = train_inter(trace, epochs=300, seed=2)
    assert predictor_bytes(p) == predictor_bytes(q)


def test_full_prefetch_has_recall_one(trained):
    model, trace, p = trained
    for m in inter_metrics(p, trace, model.config.experts)[1:]:
        assert m.recall == 1.0
        assert m.precision == pytest.approx(model.config.top_k / model.config.experts)


def test_predictor_file_round_trip(trained):
    _, _, p = trained
    data = predictor_bytes(p)
    assert data[:4] == b"FLOP"
    q = predictor_from_bytes(data)
    assert predictor_bytes(q) == data
    with pytest.raises(ValueError):
        predictor_from_bytes(data[:-4])
    with pytest.raises(ValueError):
        predictor_from_bytes(b"XXXX" + data[4:])


def test_expert_trace_pairs_previous_state_with_next_experts():
    model = gen_model(MoEConfig(3, 6, 2, 16, 32, seed=7))
    tokens = list(token_stream(16, 3, 0))
    trace = expert_trace(model, tokens)
    traces = forward_trace(model, tokens[1])
    assert np.allclose(trace.inputs[2][1], traces[1].h)
    assert np.flatnonzero(trace.targets[2][1]).tolist() == traces[2].experts.tolist()


def test_metrics_csv_skips_layer_zero(trained):
    model, trace, p = trained
    text = metrics_csv(inter_metrics(p, trace, 2))
    lines = text.splitlines()
    assert lines[0] == "layer,precision,recall,samples"
    assert [l.split(",")[0] for l in lines[1:]] == ["1", "2"]


def test_intra_recall_zero_drift_is_exact():
    # with zero residual scale every layer sees the same state, so the reuse
    # predictor reproduces the true masks
    _, comp = build_toy(eps=0.0, layers=3, calib_tokens=200)
    for m in intra_metrics(comp, token_stream(64, 20, 5))[1:]:
        assert m.recall == 1.0 and m.precision == 1.0


def test_intra_recall_decreases_with_drift():
    recalls = []
    for eps in (0.0, 0.01, 0.1, 1.0):
        _, comp = build_toy(eps=eps, layers=3, calib_tokens=200)
        ms = intra_metrics(comp, token_stream(64, 50, 5))[1:]
        recalls.append(float(np.mean([m.recall for m in ms])))
    assert all(a >= b for a, b in zip(recalls, recalls[1:]))
    assert recalls[1] >= 0.9
