import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetbot import numcore as nc
from hetbot import train as tr
from hetbot.config import TrainConfig
from hetbot.faat import AttentionTrace, EdgePlan, forward, init_params
from hetbot.graph import HeteroGraph, SynthConfig, synth_graph
from hetbot.homoaug import KNN_RELATION
from hetbot.train import (
    SplitSet,
    ablation_run,
    evaluate,
    make_splits,
    metrics_from_confusion,
    prepare_graph,
    total_loss,
    train_model,
    variant_config,
    weight_guidance_loss,
)


def trace_for(g, alpha_bar):
    plan = EdgePlan(g)
    ab = np.asarray(alpha_bar, dtype=float)
    return AttentionTrace(plan, [np.repeat(ab, 2)[:, None]], nc.Tensor(ab))


# -- weight guidance loss ---------------------------------------------------

EDGE = HeteroGraph(2, {"r": [(0, 1)]})


@pytest.mark.parametrize("labels, ab, expected", [
    ([0, 0], 1.0, 0.0),
    ([0, 0], -1.0, 2.0),
    ([0, 0], 0.0, 1.0),
    ([0, 1], 0.0, 1.0),
    ([0, 1], -1.0, 0.0),
])
def test_wegl_hinge_examples(labels, ab, expected):
    loss = weight_guidance_loss(trace_for(EDGE, [ab]), np.array(labels), [0, 1])
    assert loss.item() == expected


def test_wegl_empty_training_edges_warns_and_is_zero():
    with pytest.warns(UserWarning):
        loss = weight_guidance_loss(trace_for(EDGE, [0.3]), np.array([0, 1]), [0])
    assert loss.item() == 0.0


def test_wegl_only_counts_edges_inside_training_set():
    g = HeteroGraph(4, {"r": [(0, 1), (1, 2), (2, 3)]})
    y = np.array([0, 0, 1, 1])
    # pairs ordered (0,1), (1,2), (2,3); only (0,1) and (1,2) are inside {0,1,2}
    loss = weight_guidance_loss(trace_for(g, [0.5, 0.5, -5.0]), y, [0, 1, 2])
    assert loss.item() == pytest.approx((0.5 + 1.5) / 2, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=3, max_size=3), st.lists(st.integers(0, 1), min_size=4,
                                                                      max_size=4))
def test_wegl_label_swap_invariance_and_zero_condition(ab, y):
    g = HeteroGraph(4, {"r": [(0, 1), (1, 2), (2, 3)]})
    y = np.array(y)
    trace = trace_for(g, ab)
    a = weight_guidance_loss(trace, y, range(4)).item()
    b = weight_guidance_loss(trace, 1 - y, range(4)).item()
    assert a == b
    signs = np.where(y[[0, 1, 2]] == y[[1, 2, 3]], 1.0, -1.0)
    assert (a == 0.0) == bool(np.all(np.array(ab) * signs >= 1.0))


def test_wegl_gradient_reaches_attention_parameters():
    g = HeteroGraph(4, {"a": [(0, 1), (2, 3)], "b": [(1, 2)]})
    cfg = TrainConfig(hidden=4, heads=2, dropout=0.0)
    params = init_params(cfg, 3, g.relations, 0)
    x = np.random.default_rng(0).normal(size=(4, 3))
    _, trace = forward(g, x, params, cfg)
    weight_guidance_loss(trace, np.array([0, 0, 1, 1]), range(4)).backward()
    assert np.any(params["layer0.g"].grad != 0)
    assert np.any(params["layer1.Wq"].grad != 0)


# -- total loss --------------------------------------------------------------

def _zero_trace():
    return trace_for(EDGE, [0.0])


def test_total_loss_examples():
    logits = nc.Tensor([[0.2, -0.1], [1.0, 0.0]])
    y = np.array([1, 0])
    ce = nc.cross_entropy_logits(logits, y, [0, 1]).item()
    plain = TrainConfig(lambda1=0.0, lambda2=0.0)
    params = {"w": nc.Parameter([2.0])}
    assert total_loss(logits, y, [0, 1], params, _zero_trace(), plain).item() == ce
    zeros = {"w": nc.Parameter(np.zeros((3, 3)))}
    l2only = TrainConfig(lambda1=0.5, lambda2=0.0)
    assert total_loss(logits, y, [0, 1], zeros, _zero_trace(), l2only).item() == ce
    cfg = TrainConfig(lambda1=0.01, lambda2=0.0)
    extra = total_loss(logits, y, [0, 1], params, _zero_trace(), cfg).item() - ce
    assert extra == pytest.approx(0.04, abs=1e-15)


def test_total_loss_includes_weighted_wegl():
    logits = nc.Tensor([[0.0, 0.0], [0.0, 0.0]])
    y = np.array([0, 0])
    cfg = TrainConfig(lambda1=0.0, lambda2=0.2)
    out = total_loss(logits, y, [0, 1], {}, trace_for(EDGE, [-1.0]), cfg).item()
    assert out == pytest.approx(math.log(2.0) + 0.2 * 2.0, abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_total_loss_monotone_in_lambdas(l1a, l1b, l2a, l2b):
    logits = nc.Tensor([[0.3, -0.4], [0.1, 0.9]])
    y = np.array([1, 1])
    params = {"w": nc.Parameter([[0.5, -1.5]])}
    trace = trace_for(EDGE, [-0.3])

    def value(l1, l2):
        return total_loss(logits, y, [0, 1], params, trace, TrainConfig(lambda1=l1, lambda2=l2)).item()

    lo1, hi1 = sorted((l1a, l1b))
    lo2, hi2 = sorted((l2a, l2b))
    assert value(lo1, lo2) <= value(hi1, lo2) + 1e-15
    assert value(lo1, lo2) <= value(lo1, hi2) + 1e-15


def test_descent_over_five_steps():
    rng = np.random.default_rng(0)
    g = HeteroGraph(10, {"r": [(i, (i + 1) % 10) if i < 9 else (0, 9) for i in range(10)]})
    x = rng.normal(size=(10, 4))
    y = np.array([0, 1] * 5)
    cfg = TrainConfig(hidden=8, heads=2, dropout=0.0, lr=1e-3)
    params = init_params(cfg, 4, g.relations, 0)
    opt = nc.Adam(params.values(), lr=cfg.lr)
    train = np.arange(10)
    losses = []
    for _ in range(6):
        opt.zero_grad()
        logits, trace = forward(g, x, params, cfg, "train")
        loss = total_loss(logits, y, train, params, trace, cfg)
        losses.append(loss.item())
        loss.backward()
        opt.step()
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


# -- splits and metrics ------------------------------------------------------

def test_make_splits_sizes_determinism_and_balance():
    y = np.repeat([0, 1], 50)
    s = make_splits(y, seed=1)
    assert (len(s.train), len(s.val), len(s.test)) == (10, 10, 80)
    t = make_splits(y, seed=1)
    assert all(np.array_equal(getattr(s, n), getattr(t, n)) for n in ("train", "val", "test"))
    for part in (s.train, s.val, s.test):
        counts = np.bincount(y[part], minlength=2)
        assert abs(counts[0] - counts[1]) <= 1
    assert sorted(np.concatenate([s.train, s.val, s.test]).tolist()) == list(range(100))


def test_make_splits_rounding_and_unlabeled():
    y = np.array([0] * 7 + [1] * 7 + [-1] * 3)
    s = make_splits(y, seed=0)
    assert len(s.train) == 2  # ceil(0.7) = 1 per class
    union = np.concatenate([s.train, s.val, s.test])
    assert not np.isin([14, 15, 16], union).any()
    with pytest.raises(ValueError):
        make_splits(y, ratios=(0.5, 0.5, 0.1))
    with pytest.raises(ValueError):
        SplitSet([0, 1], [1], [2])


def test_confusion_fixture():
    m = metrics_from_confusion(3, 1, 1, 5)
    assert abs(m.accuracy - 0.8) <= 1e-12
    assert abs(m.f1 - 0.75) <= 1e-12
    assert abs(m.balanced_accuracy - (0.75 + 5 / 6) / 2) <= 1e-12
    assert round(m.balanced_accuracy, 4) == 0.7917


def test_evaluate_fixtures_and_permutation_invariance():
    y = np.array([1, 1, 1, 1, 0, 0, 0, 0, 0, 0])
    pred = np.array([1, 1, 1, 0, 1, 0, 0, 0, 0, 0])
    logits = np.stack([1 - pred, pred], axis=1).astype(float)
    m = evaluate(logits, y, np.arange(10))
    assert m.confusion == (3, 1, 1, 5)
    assert evaluate(logits, y, np.arange(10)[::-1]) == m

    perfect = evaluate(np.stack([1 - y, y], axis=1).astype(float), y, np.arange(10))
    assert (perfect.accuracy, perfect.f1, perfect.balanced_accuracy) == (1.0, 1.0, 1.0)

    yb = np.array([0, 1, 0, 1])
    allbot = evaluate(np.tile([0.0, 1.0], (4, 1)), yb, np.arange(4))
    assert (allbot.accuracy, allbot.balanced_accuracy) == (0.5, 0.5)
    assert allbot.f1 == pytest.approx(2 / 3, abs=1e-15)
    with pytest.raises(ValueError):
        evaluate(logits, y, [])


# -- training loop and ablations ----------------------------------------------

def tiny_problem(seed=0, h=0.3, n=60):
    g, f, y = synth_graph(SynthConfig(n_per_class=n, target_edge_homophily=h, mean_degree=6,
                                      seed=seed))
    return g, f, y, make_splits(y, ratios=(0.3, 0.2, 0.5), seed=seed)


def quick(**kw):
    return TrainConfig.desk(max_epochs=15, patience=5, hidden=16, mlp_epochs=30, **kw)


def test_train_model_deterministic():
    g, f, y, s = tiny_problem()
    a = train_model(g, f, y, s, quick(seed=3))
    b = train_model(g, f, y, s, quick(seed=3))
    assert a.metrics == b.metrics
    assert a.trace.alpha_bar.data.tobytes() == b.trace.alpha_bar.data.tobytes()
    assert 1 <= a.epochs_ran <= 15 and 0 <= a.best_epoch < a.epochs_ran


def test_train_model_reports_divergence(monkeypatch):
    g, f, y, s = tiny_problem()
    monkeypatch.setattr(tr, "total_loss", lambda *a, **k: nc.Tensor(np.nan))
    with pytest.raises(FloatingPointError, match="epoch 0"):
        train_model(g, f, y, s, quick())


def test_ablation_definitions():
    cfg = quick(lambda2=0.3)
    assert variant_config(cfg, "no_wegl").lambda2 == 0.0
    assert variant_config(cfg, "mean_pooling").attention == "constant"
    assert variant_config(cfg, "no_freq_adaptive").attention == "sigmoid"
    assert variant_config(cfg, "full") == cfg
    with pytest.raises(ValueError):
        variant_config(cfg, "no_attention")


def test_prepare_graph_variants():
    g, f, y, s = tiny_problem(1)
    cfg = quick()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        full = prepare_graph(g, f, y, s, cfg, "full")
        rand = prepare_graph(g, f, y, s, cfg, "random_edges")
    assert prepare_graph(g, f, y, s, cfg, "no_aug") is g
    assert KNN_RELATION in full.relations
    assert len(rand.edges["random"]) == len(full.edges[KNN_RELATION])
    assert KNN_RELATION not in rand.relations
    # an already-augmented graph is reused rather than augmented again
    assert prepare_graph(full, f, y, s, cfg, "full") is full
    assert prepare_graph(full, f, y, s, cfg, "no_aug") == g
    with pytest.raises(ValueError):
        prepare_graph(g, f, y, s, cfg, "bogus")


def test_mean_pooling_trace_constant_and_no_wegl_matches_lambda_zero():
    g, f, y, s = tiny_problem(2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        mp = ablation_run("mean_pooling", g, f, y, s, quick())
        a = ablation_run("no_wegl", g, f, y, s, quick())
        b = ablation_run("full", g, f, y, s, quick(lambda2=0.0))
    assert np.all(mp.trace.alpha_bar.data == 1.0)
    assert a.metrics == b.metrics


def test_homophilic_regime_is_easy():
    g, f, y = synth_graph(SynthConfig(n_per_class=500, target_edge_homophily=0.8,
                                      class_mean_separation=4.0, seed=0))
    s = make_splits(y, seed=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = ablation_run("full", g, f, y, s, TrainConfig.desk(seed=0))
    assert res.metrics.accuracy >= 0.95
