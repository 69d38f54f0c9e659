import numpy as np
import pytest
from hypothesis import given, strategies as st

from oneshot_fgl.gnn import (
    AdamState, ModelSpec, TrainConfig, TrainingError, accuracy, adam_step, cross_entropy_loss,
    init_model, kl_divergence_loss, load_checkpoint, model_backward, model_forward, predict,
    save_checkpoint, softmax, train_supervised,
)
from oneshot_fgl.graph import Graph, normalized_adjacency

from conftest import central_diff, max_rel_err, random_graph


def test_zero_weights_give_zero_logits(rng):
    g = random_graph(8, 0.3, rng)
    for spec in (ModelSpec("gcn2", hidden=4), ModelSpec("sgc", k=2)):
        m = init_model(spec, 3, 2, 0)
        for v in m.params.values():
            v[...] = 0
        logits, _ = model_forward(m, normalized_adjacency(g), rng.normal(size=(8, 3)))
        assert np.all(logits == 0)


def test_isolated_node_is_plain_mlp(rng):
    m = init_model(ModelSpec("gcn2", hidden=5), 3, 2, 1)
    m.params["b1"] = rng.normal(size=5)
    m.params["b2"] = rng.normal(size=2)
    x = rng.normal(size=(1, 3))
    logits, _ = model_forward(m, normalized_adjacency(Graph.empty(1)), x)
    p = m.params
    expect = np.maximum(x @ p["W1"] + p["b1"], 0) @ p["W2"] + p["b2"]
    assert np.allclose(logits, expect, rtol=1e-14)


def test_sgc_k0_is_linear(rng):
    m = init_model(ModelSpec("sgc", k=0), 4, 3, 2)
    x = rng.normal(size=(6, 4))
    logits, _ = model_forward(m, normalized_adjacency(random_graph(6, 0.5, rng)), x)
    assert np.allclose(logits, x @ m.params["W"] + m.params["b"], rtol=1e-14)


def test_cross_entropy_examples(rng):
    loss, _ = cross_entropy_loss(np.zeros((3, 4)), [0, 1, 2], np.ones(3, bool))
    assert loss == pytest.approx(np.log(4))
    logits = np.zeros((2, 3))
    logits[[0, 1], [2, 0]] = 50
    assert cross_entropy_loss(logits, [2, 0], np.ones(2, bool))[0] < 1e-20
    logits = rng.normal(size=(5, 3))
    labels, mask = np.array([0, 2, 1, 1, 0]), np.array([1, 1, 0, 1, 1], bool)
    _, g = cross_entropy_loss(logits, labels, mask)
    num = central_diff(lambda: cross_entropy_loss(logits, labels, mask)[0], logits)
    assert max_rel_err(g, num) < 1e-6


def test_cross_entropy_empty_mask_rejected():
    with pytest.raises(ValueError):
        cross_entropy_loss(np.zeros((2, 2)), [0, 1], np.zeros(2, bool))


@pytest.mark.parametrize("direction", ["teacher_student", "student_teacher"])
def test_kl_examples_and_gradient(rng, direction):
    s, t = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    w = rng.uniform(0, 2, 6)
    assert kl_divergence_loss(t, t, w, direction)[0] == pytest.approx(0, abs=1e-15)
    loss, g = kl_divergence_loss(s, t, np.zeros(6), direction)
    assert loss == 0 and np.all(g == 0)
    _, g = kl_divergence_loss(s, t, w, direction)
    num = central_diff(lambda: kl_divergence_loss(s, t, w, direction)[0], s)
    assert max_rel_err(g, num) < 1e-6
    assert kl_divergence_loss(s, t, w, direction)[0] >= 0


@pytest.mark.parametrize("spec", [ModelSpec("gcn2", hidden=7), ModelSpec("sgc", k=2),
                                  ModelSpec("sgc", k=0)])
def test_model_gradients_match_finite_differences(spec):
    rng = np.random.default_rng(3)
    a = normalized_adjacency(random_graph(20, 0.2, rng))
    x = rng.normal(size=(20, 5))
    m = init_model(spec, 5, 3, 4)
    for k in m.params:
        if k.startswith("b"):
            m.params[k] = rng.normal(scale=0.1, size=m.params[k].shape)
    labels = rng.integers(0, 3, 20)
    mask = rng.random(20) < 0.5
    teacher = rng.normal(size=(20, 3))
    w = rng.uniform(0, 1, 20)

    def loss_and_grad():
        logits, cache = model_forward(m, a, x)
        ce, g1 = cross_entropy_loss(logits, labels, mask)
        kl, g2 = kl_divergence_loss(logits, teacher, w)
        return ce + kl, cache, g1 + g2

    _, cache, g_logits = loss_and_grad()
    grads = model_backward(m, cache, g_logits)
    for name, p in m.params.items():
        num = central_diff(lambda: loss_and_grad()[0], p)
        assert max_rel_err(grads[name], num) < 1e-4, name


def test_adam_examples():
    p = {"w": np.array([1.0, -2.0])}
    adam_step(p, {"w": np.zeros(2)}, AdamState(), lr=0.1)
    assert np.array_equal(p["w"], [1.0, -2.0])
    p, state = {"w": np.zeros(2)}, AdamState()
    g = np.array([3.0, -0.01])
    prev = p["w"].copy()
    for _ in range(500):
        adam_step(p, {"w": g}, state, lr=0.01)
        step, prev = p["w"] - prev, p["w"].copy()
    assert np.allclose(step, -0.01 * np.sign(g), rtol=1e-4)
    with pytest.raises(TrainingError):
        adam_step(p, {"w": np.array([np.nan, 0])}, AdamState(), lr=0.1)


def test_separable_edgeless_reaches_full_train_accuracy(rng):
    n = 40
    labels = np.repeat([0, 1], n // 2)
    x = rng.normal(size=(n, 2)) + 3 * np.where(labels[:, None] == 0, -1, 1)
    a = normalized_adjacency(Graph.empty(n))
    train = np.ones(n, bool)
    for spec in (ModelSpec("gcn2", hidden=8), ModelSpec("sgc", k=2)):
        m, hist = train_supervised(init_model(spec, 2, 2, 0), a, x, labels, train, None,
                                   TrainConfig(epochs=200))
        assert accuracy(model_forward(m, a, x)[0], labels, train) == 1.0
        assert hist[-1]["loss"] <= hist[0]["loss"]


def test_training_is_deterministic_and_best_not_worse(rng):
    g = random_graph(30, 0.15, rng)
    a, x = normalized_adjacency(g), rng.normal(size=(30, 4))
    labels = rng.integers(0, 3, 30)
    train, val = np.arange(30) < 15, np.arange(30) >= 15
    m0 = init_model(ModelSpec(hidden=8), 4, 3, 9)
    cfg = TrainConfig(epochs=60, patience=5)
    a1, h1 = train_supervised(m0, a, x, labels, train, val, cfg)
    a2, _ = train_supervised(m0, a, x, labels, train, val, cfg)
    assert all(np.array_equal(a1.params[k], a2.params[k]) for k in a1.params)
    init_loss = cross_entropy_loss(model_forward(m0, a, x)[0], labels, train)[0]
    assert cross_entropy_loss(model_forward(a1, a, x)[0], labels, train)[0] <= init_loss
    assert len(h1) <= cfg.epochs


def test_epochs_must_be_positive():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)


@given(st.integers(0, 1000))
def test_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    n = 10
    g = random_graph(n, 0.3, rng)
    x = rng.normal(size=(n, 3))
    perm = rng.permutation(n)
    inv = np.argsort(perm)
    gp = Graph.from_edges(n, inv[g.edge_list()]) if g.num_edges else Graph.empty(n)
    for spec in (ModelSpec("gcn2", hidden=4), ModelSpec("sgc", k=2)):
        m = init_model(spec, 3, 2, seed)
        lo, _ = model_forward(m, normalized_adjacency(g), x)
        lp, _ = model_forward(m, normalized_adjacency(gp), x[perm])
        assert np.allclose(lp, lo[perm], atol=1e-12)


@given(st.integers(0, 1000))
def test_softmax_rows_sum_to_one(seed):
    logits = np.random.default_rng(seed).normal(scale=30, size=(5, 4))
    assert np.allclose(softmax(logits).sum(axis=1), 1.0)


def test_checkpoint_roundtrip(tmp_path, rng):
    for spec in (ModelSpec("gcn2", hidden=6), ModelSpec("sgc", k=3)):
        m = init_model(spec, 4, 3, 5)
        save_checkpoint(m, tmp_path / f"model_{spec.arch}")
        back = load_checkpoint(tmp_path / f"model_{spec.arch}")
        assert back.spec == m.spec and back.in_dim == 4 and back.num_classes == 3
        assert all(np.array_equal(back.params[k], m.params[k]) for k in m.params)
        a = normalized_adjacency(random_graph(7, 0.4, rng))
        x = rng.normal(size=(7, 4))
        assert np.array_equal(predict(back, a, x), predict(m, a, x))
