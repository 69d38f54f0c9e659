import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from oneshot_fgl.client_stats import HomophilyProfile
from oneshot_fgl.gnn import (
    ModelSpec, TrainConfig, accuracy, init_model, model_forward, train_supervised,
)
from oneshot_fgl.graph import TEST, TRAIN, VAL, ClientGraph, DatasetBundle, Graph, normalized_adjacency
from oneshot_fgl.personalize import (
    PersonalizeConfig, compute_gamma, compute_w_dist, gamma_for_ablation, personalize_client,
    stage1_train_global, stage2_finetune,
)

from conftest import random_graph

FAST = TrainConfig(epochs=80, patience=10)


def small_client(seed=0, n=40, c=3, with_val=True):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, c, n)
    x = rng.normal(size=(n, 5)) + 2 * np.eye(c, 5)[labels]
    splits = np.full(n, TEST, dtype=np.int8)
    splits[: n // 4] = TRAIN
    if with_val:
        splits[n // 4 : n // 2] = VAL
    return ClientGraph(0, random_graph(n, 0.1, rng), x, labels, splits, c)


def separable_surrogate(c=3, per=4, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(c), per)
    x = rng.normal(scale=0.1, size=(len(labels), 5)) + 2 * np.eye(c, 5)[labels]
    n = len(labels)
    return DatasetBundle("s", Graph.empty(n), x.astype(np.float32), labels,
                         np.full(n, TRAIN, dtype=np.int8), c)


def test_w_dist_examples():
    w = compute_w_dist(np.array([0.0, np.e - 1, 5.0]))
    assert w[0] == 1.0 and w[1] == pytest.approx(0.5) and w[2] < w[1]
    with pytest.raises(ValueError):
        compute_w_dist(np.array([-1.0]))


def test_gamma_examples():
    w = np.array([1.0, 0.5])
    assert compute_gamma(np.array([[0.0, 1.0]]), w, 0.8)[0] == pytest.approx(0.4)
    assert compute_gamma(np.array([[0.5, 0.5]]), w, 0.5)[0] == pytest.approx(0.375)
    w3 = np.array([1.0, 0.2, 0.6])
    assert compute_gamma(np.full((1, 3), 1 / 3), w3, 2.0)[0] == pytest.approx(2 * w3.mean())
    assert compute_gamma(np.zeros((1, 3)), w3, 2.0)[0] == pytest.approx(2.0)


@given(arrays(np.int64, st.integers(1, 8), elements=st.integers(0, 10**12)),
       st.integers(0, 2**32), st.floats(0.01, 10))
def test_weight_bounds_and_antitonicity(h_micro, seed, beta):
    # class homophily is a sum of neighbour fractions; a 1e-6 grid keeps
    # distinct values distinguishable in float64
    h = h_micro / 1e6
    w = compute_w_dist(h)
    assert np.all((w > 0) & (w <= 1))
    order = np.argsort(h)
    hs, ws = h[order], w[order]
    strict = np.diff(hs) > 0
    assert np.all(np.diff(ws)[strict] < 0)
    rng = np.random.default_rng(seed)
    soft = rng.dirichlet(np.ones(len(h)), size=6)
    soft[0] = 0
    g = compute_gamma(soft, w, beta)
    assert np.all((g >= 0) & (g <= beta * w.max() * (1 + 1e-12)))


def test_ablation_gammas():
    g = np.array([0.1, 0.3, 0.5])
    assert np.all(gamma_for_ablation(g, PersonalizeConfig(ablation="ft_only")) == 0)
    fixed = gamma_for_ablation(g, PersonalizeConfig(ablation="fixed_gamma"))
    assert np.allclose(fixed, 0.3)
    given_g0 = gamma_for_ablation(g, PersonalizeConfig(ablation="fixed_gamma", fixed_gamma=2.0))
    assert np.all(given_g0 == 2.0)
    assert np.array_equal(gamma_for_ablation(g, PersonalizeConfig()), g)


def test_stage1_copies_and_determinism():
    cfg = PersonalizeConfig(stage1=FAST)
    sur = separable_surrogate()
    spec = ModelSpec(hidden=8)
    teacher, init, _ = stage1_train_global(sur, spec, cfg)
    assert teacher is not init and teacher.params is not init.params
    assert all(np.array_equal(teacher.params[k], init.params[k]) for k in teacher.params)
    a = normalized_adjacency(sur.graph)
    x = sur.features.astype(np.float64)
    assert accuracy(model_forward(teacher, a, x)[0], sur.labels, np.ones(len(x), bool)) == 1.0
    again, _, _ = stage1_train_global(sur, spec, cfg)
    assert all(np.array_equal(teacher.params[k], again.params[k]) for k in teacher.params)


def test_zero_gamma_is_supervised_finetuning():
    cg = small_client()
    cfg = PersonalizeConfig(stage2=FAST)
    init = init_model(ModelSpec(hidden=8), 5, 3, 1)
    teacher = init_model(ModelSpec(hidden=8), 5, 3, 2)
    m1, h1 = stage2_finetune(init, teacher, cg, np.zeros(cg.num_nodes), cfg)
    m2, h2 = train_supervised(init, normalized_adjacency(cg.graph), cg.features, cg.labels,
                              cg.train_mask, cg.val_mask, FAST)
    assert h1 == h2
    assert all(np.array_equal(m1.params[k], m2.params[k]) for k in m1.params)


def test_teacher_is_not_modified():
    cg = small_client()
    teacher = init_model(ModelSpec(hidden=8), 5, 3, 2)
    before = teacher.copy()
    stage2_finetune(teacher.copy(), teacher, cg, np.ones(cg.num_nodes), PersonalizeConfig(stage2=FAST))
    assert all(np.array_equal(teacher.params[k], before.params[k]) for k in teacher.params)


def test_large_gamma_follows_teacher():
    cg = small_client(seed=4, n=60, with_val=False)
    spec = ModelSpec(hidden=16)
    teacher = init_model(spec, 5, 3, 7)
    teacher.params["W2"] *= 5
    init = init_model(spec, 5, 3, 8)
    cfg = PersonalizeConfig(stage2=TrainConfig(epochs=500, lr=0.02, weight_decay=0.0))
    model, _ = stage2_finetune(init, teacher, cg, np.full(cg.num_nodes, 100.0), cfg)
    a = normalized_adjacency(cg.graph)
    agree = np.mean(model_forward(model, a, cg.features)[0].argmax(1)
                    == model_forward(teacher, a, cg.features)[0].argmax(1))
    assert agree >= 0.99


def test_negative_gamma_rejected():
    cg = small_client()
    m = init_model(ModelSpec(hidden=4), 5, 3, 0)
    with pytest.raises(ValueError):
        stage2_finetune(m, m, cg, -np.ones(cg.num_nodes), PersonalizeConfig(stage2=FAST))


def test_personalize_client_without_surrogate_is_standalone():
    cg = small_client()
    cfg = PersonalizeConfig(stage2=FAST)
    prof = HomophilyProfile(node=np.zeros(cg.num_nodes), per_class=np.zeros(3))
    res = personalize_client(cg, None, ModelSpec(hidden=8), cfg, prof, np.zeros((cg.num_nodes, 3)))
    ref, _ = train_supervised(init_model(ModelSpec(hidden=8), 5, 3, FAST.seed),
                              normalized_adjacency(cg.graph), cg.features, cg.labels,
                              cg.train_mask, cg.val_mask, FAST)
    assert res.teacher is None
    assert all(np.array_equal(res.model.params[k], ref.params[k]) for k in ref.params)


def test_personalize_client_full_pipeline_runs():
    cg = small_client()
    cfg = PersonalizeConfig(stage1=FAST, stage2=FAST)
    prof = HomophilyProfile(node=np.zeros(cg.num_nodes), per_class=np.array([3.0, 1.0, 0.0]))
    soft = np.eye(3)[cg.labels]
    res = personalize_client(cg, separable_surrogate(), ModelSpec(hidden=8), cfg, prof, soft)
    w = compute_w_dist(prof)
    assert np.allclose(res.gamma, cfg.beta * w[cg.labels])
    assert res.stage1_history and res.stage2_history
