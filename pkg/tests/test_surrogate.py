import numpy as np
import pytest
from hypothesis import given, strategies as st

from oneshot_fgl.graph import TRAIN
from oneshot_fgl.secure_agg import GlobalStats
from oneshot_fgl.surrogate import (
    GenConfig, LinkPredictor, alignment_loss, class_node_counts, finalize_adjacency,
    generate_surrogate, init_surrogate, objective, optimize_surrogate, smoothness_loss,
    soft_adjacency,
)

from conftest import central_diff, max_rel_err


def global_stats(means, variances, counts):
    means = np.asarray(means, dtype=np.float64)
    counts = np.asarray(counts, dtype=np.float64)
    return GlobalStats(counts=counts, client_counts=(counts > 0).astype(np.int64),
                       means=means, variances=np.asarray(variances, dtype=np.float64))


def random_gs(rng, c, f, h):
    d = f * (h + 1)
    return global_stats(rng.normal(size=(c, d)), rng.uniform(0.2, 2.0, (c, d)),
                        rng.integers(5, 50, c))


def test_init_sizing_examples():
    gs = global_stats(np.zeros((2, 3)), np.ones((2, 3)), [10, 10])
    sg, _ = init_surrogate(gs, GenConfig(nodes_per_class=1, prop_depth=2))
    assert sg.num_nodes == 2 and list(sg.labels) == [0, 1]
    frac = global_stats(np.zeros((2, 3)), np.ones((2, 3)), [100, 50])
    assert list(class_node_counts(frac, GenConfig(node_fraction=0.02))) == [2, 1]


def test_init_absent_class_gets_no_nodes():
    gs = global_stats(np.zeros((3, 2)), np.ones((3, 2)), [4, 0, 4])
    sg, _ = init_surrogate(gs, GenConfig(nodes_per_class=2, prop_depth=1))
    assert list(sg.labels) == [0, 0, 2, 2]


def test_init_is_deterministic(rng):
    gs = random_gs(rng, 3, 4, 2)
    a, la = init_surrogate(gs, GenConfig(seed=5))
    b, lb = init_surrogate(gs, GenConfig(seed=5))
    assert np.array_equal(a.features, b.features)
    assert all(np.array_equal(la.params[k], lb.params[k]) for k in la.params)


def test_zero_link_predictor_gives_half():
    x = np.random.default_rng(0).normal(size=(4, 3))
    params = {"W0": np.zeros((6, 5)), "b0": np.zeros(5), "W1": np.zeros((5, 1)), "b1": np.zeros(1)}
    p = soft_adjacency(x, LinkPredictor("mlp", params))
    off = ~np.eye(4, dtype=bool)
    assert np.all(p[off] == 0.5) and np.all(np.diag(p) == 0)


@pytest.mark.parametrize("mode", ["mlp", "direct", "dot"])
@given(seed=st.integers(0, 10_000))
def test_soft_adjacency_symmetric_and_in_unit_interval(mode, seed):
    rng = np.random.default_rng(seed)
    gs = random_gs(rng, 2, 3, 1)
    sg, lp = init_surrogate(gs, GenConfig(nodes_per_class=3, prop_depth=1, adjacency=mode,
                                          hidden=(8,), seed=seed))
    if mode == "direct":
        lp.params["Z"] = rng.normal(scale=3, size=lp.params["Z"].shape)
    p = soft_adjacency(sg.features, lp)
    off = ~np.eye(len(p), dtype=bool)
    assert np.array_equal(p, p.T)
    assert np.all((p[off] > 0) & (p[off] < 1))


def test_alignment_zero_when_matched(rng):
    x = rng.normal(size=(4, 2))
    p = np.full((4, 4), 0.3)
    np.fill_diagonal(p, 0)
    labels = np.array([0, 0, 1, 1])
    gs = global_stats(np.stack([x[:2].mean(0), x[2:].mean(0)]),
                      np.stack([x[:2].var(0, ddof=1), x[2:].var(0, ddof=1)]), [5, 5])
    loss, _, _ = alignment_loss(x, p, labels, gs, h=0)
    assert loss == pytest.approx(0.0, abs=1e-24)


def test_alignment_single_class_scalar_example():
    gs = global_stats([[0.0]], [[1.0]], [7])
    loss, gx, _ = alignment_loss(np.array([[1.0]]), np.zeros((1, 1)), np.array([0]), gs, h=0)
    assert loss == 1.0 and gx[0, 0] == 2.0


def test_alignment_weight_proportional_to_class_share(rng):
    x = rng.normal(size=(6, 2))
    p = rng.uniform(0.1, 0.9, (6, 6))
    p = (p + p.T) / 2
    np.fill_diagonal(p, 0)
    labels = np.array([0, 0, 0, 1, 1, 1])
    means, var = rng.normal(size=(2, 6)), rng.uniform(0.5, 1.5, (2, 6))
    w = np.array([1.0, 0.0])
    base, _, _ = alignment_loss(x, p, labels, global_stats(means, var, [10, 10]), 2, w)
    doubled, _, _ = alignment_loss(x, p, labels, global_stats(means, var, [10, 10]), 2, 2 * w)
    assert doubled == pytest.approx(2 * base, rel=1e-12)
    # with default weights, doubling class 0's count raises its share from 1/2 to 2/3
    gs1 = global_stats(means, var, [10, 10])
    gs2 = global_stats(means, var, [20, 10])
    l0 = alignment_loss(x, p, labels, gs1, 2, [1, 0])[0]
    l1 = alignment_loss(x, p, labels, gs1, 2, [0, 1])[0]
    assert alignment_loss(x, p, labels, gs2, 2)[0] == pytest.approx(2 / 3 * l0 + 1 / 3 * l1)


def test_smoothness_examples():
    x = np.ones((3, 2))
    p = np.array([[0, 0.2, 0.7], [0.2, 0, 0.4], [0.7, 0.4, 0]])
    assert smoothness_loss(x, p)[0] == pytest.approx(1.0)
    y = np.array([[0.0, 0.0], [1.0, 2.0]])
    for val in (0.1, 0.9):
        p2 = np.array([[0.0, val], [val, 0.0]])
        assert smoothness_loss(y, p2)[0] == pytest.approx(np.exp(-5 / 2))


def _fd_check(x, lp, labels, gs, cfg):
    _, _, g_x, g_lp = objective(x, lp, labels, gs, cfg)

    def loss():
        return objective(x, lp, labels, gs, cfg)[0]

    errs = [max_rel_err(g_x, central_diff(loss, x))]
    errs += [max_rel_err(g_lp[k], central_diff(loss, lp.params[k])) for k in lp.params]
    return max(errs)


@pytest.mark.parametrize("mode", ["mlp", "direct", "dot"])
@pytest.mark.parametrize("h", [0, 1, 2])
def test_objective_gradients_match_finite_differences(mode, h):
    rng = np.random.default_rng(10 * h + len(mode))
    gs = random_gs(rng, 2, 2, h)
    cfg = GenConfig(nodes_per_class=3, prop_depth=h, alpha=0.3, adjacency=mode, hidden=(5, 4),
                    seed=3)
    sg, lp = init_surrogate(gs, cfg)
    if mode == "direct":
        lp.params["Z"] = rng.normal(size=lp.params["Z"].shape)
    assert _fd_check(sg.features.copy(), lp, sg.labels, gs, cfg) < 1e-4


def test_alignment_gradients_four_nodes(rng):
    gs = random_gs(rng, 2, 2, 1)
    cfg = GenConfig(nodes_per_class=2, prop_depth=1, alpha=0.0, hidden=(6,), seed=1)
    sg, lp = init_surrogate(gs, cfg)
    assert _fd_check(sg.features.copy(), lp, sg.labels, gs, cfg) < 1e-4


def test_single_node_converges_to_target_mean():
    gs = global_stats([[1.5, -2.0]], [[1.0, 1.0]], [9])
    cfg = GenConfig(alpha=0.0, prop_depth=0, steps=2000, lr=0.05, init="gaussian", hidden=(4,))
    sg = generate_surrogate(gs, cfg)
    assert np.allclose(sg.features[0], [1.5, -2.0], atol=1e-3)


def test_best_iterate_not_worse_than_init(rng):
    gs = random_gs(rng, 3, 3, 1)
    cfg = GenConfig(nodes_per_class=2, prop_depth=1, steps=100, hidden=(16,), lr=0.5)
    sg0, lp0 = init_surrogate(gs, cfg)
    sg, lp = optimize_surrogate(sg0, lp0, gs, cfg)
    init_loss = sg.history[0]["loss"]
    best = objective(sg.features, lp, sg.labels, gs, cfg)[0]
    assert best <= init_loss
    assert best == pytest.approx(min(r["loss"] for r in sg.history))


def test_generation_is_deterministic(rng):
    gs = random_gs(rng, 2, 3, 2)
    cfg = GenConfig(nodes_per_class=2, steps=50, hidden=(8, 8), seed=4)
    a, b = generate_surrogate(gs, cfg), generate_surrogate(gs, cfg)
    assert np.array_equal(a.features, b.features)
    assert np.array_equal(a.adjacency, b.adjacency)


def test_threshold_extremes_and_monotonicity(rng):
    gs = random_gs(rng, 3, 2, 1)
    cfg = GenConfig(nodes_per_class=3, prop_depth=1, steps=20, hidden=(8,))
    sg, lp = init_surrogate(gs, cfg)
    sg, _ = optimize_surrogate(sg, lp, gs, cfg)
    n = sg.num_nodes
    assert not finalize_adjacency(sg, 1.0).adjacency.any()
    assert np.array_equal(finalize_adjacency(sg, 0.0).adjacency, ~np.eye(n, dtype=bool))
    deltas = np.linspace(0, 1, 11)
    edges = [finalize_adjacency(sg, d).adjacency for d in deltas]
    for lo, hi in zip(edges[:-1], edges[1:]):
        assert not np.any(hi & ~lo)


def test_bundle_export(rng):
    gs = random_gs(rng, 2, 3, 2)
    sg = generate_surrogate(gs, GenConfig(nodes_per_class=2, steps=5, hidden=(4,), delta=0.0))
    b = sg.to_bundle()
    assert b.features.dtype == np.float32 and np.all(b.splits == TRAIN)
    assert b.graph.num_edges == 6
