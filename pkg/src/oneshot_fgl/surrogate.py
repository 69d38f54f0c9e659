"""Server-side synthesis of a small labelled graph whose propagated class
statistics match the pooled global statistics.

Features X and the link predictor are optimised jointly with Adam on
``align + alpha * smooth``.  The adjacency used during optimisation is the soft
matrix P (sigmoid outputs, zero diagonal); it is thresholded only at the end.
All gradients are derived by hand; ``tests/test_surrogate.py`` checks them
against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gnn import AdamState, TrainingError, adam_step
from .graph import TRAIN, DatasetBundle, Graph
from .secure_agg import GlobalStats

ADJ_MODES = ("mlp", "direct", "dot")
INIT_MODES = ("mean-shifted", "gaussian")


@dataclass(frozen=True)
class GenConfig:
    """Surrogate sizing and optimisation settings.

    ``node_fraction`` (if set) overrides ``nodes_per_class`` with
    max(1, round(p * N_c)) nodes for class c.
    """

    nodes_per_class: int = 1
    node_fraction: float | None = None
    delta: float = 0.5
    alpha: float = 0.1
    prop_depth: int = 2
    lr: float = 0.01
    steps: int = 2000
    seed: int = 0
    hidden: tuple[int, ...] = (128, 128)
    adjacency: str = "mlp"
    init: str = "mean-shifted"

    def __post_init__(self):
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError("delta must lie in [0, 1]")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.nodes_per_class < 1:
            raise ValueError("nodes_per_class must be >= 1")
        if self.node_fraction is not None and not 0 < self.node_fraction <= 1:
            raise ValueError("node_fraction must lie in (0, 1]")
        if self.adjacency not in ADJ_MODES:
            raise ValueError(f"adjacency must be one of {ADJ_MODES}")
        if self.init not in INIT_MODES:
            raise ValueError(f"init must be one of {INIT_MODES}")
        if self.steps < 0 or self.prop_depth < 0:
            raise ValueError("steps and prop_depth must be >= 0")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


@dataclass
class LinkPredictor:
    """Adjacency parameters.  ``mlp``: weights W0..WL and biases b0..bL of
    g([x_i, x_j]) -> scalar.  ``direct``: a free n x n logit matrix Z.
    ``dot``: no parameters (cosine similarity of features)."""

    mode: str
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def num_layers(self) -> int:
        return sum(1 for k in self.params if k.startswith("W"))


@dataclass
class SurrogateGraph:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    soft_adj: np.ndarray | None = None
    adjacency: np.ndarray | None = None
    history: list[dict] = field(default_factory=list)

    @property
    def num_nodes(self) -> int:
        return len(self.labels)

    def to_bundle(self, name: str = "surrogate") -> DatasetBundle:
        """Export as a dataset bundle (float32 features, every node TRAIN)."""
        if self.adjacency is None:
            raise ValueError("finalize_adjacency must run before export")
        iu, ju = np.nonzero(np.triu(self.adjacency, 1))
        n = self.num_nodes
        return DatasetBundle(
            name=name,
            graph=Graph.from_edges(n, np.stack([iu, ju], axis=1)),
            features=self.features.astype(np.float32),
            labels=self.labels.astype(np.int64),
            splits=np.full(n, TRAIN, dtype=np.int8),
            num_classes=self.num_classes,
        )


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def class_node_counts(gs: GlobalStats, cfg: GenConfig) -> np.ndarray:
    counts = np.zeros(gs.num_classes, dtype=np.int64)
    present = gs.present
    if cfg.node_fraction is None:
        counts[present] = cfg.nodes_per_class
    else:
        scaled = cfg.node_fraction * gs.counts[present]
        counts[present] = np.maximum(1, np.floor(scaled + 0.5)).astype(np.int64)
    return counts


def init_surrogate(gs: GlobalStats, cfg: GenConfig, feature_dim: int | None = None
                   ) -> tuple[SurrogateGraph, LinkPredictor]:
    if not np.any(gs.present):
        raise ValueError("global statistics contain no present class")
    f = gs.dim // (cfg.prop_depth + 1) if feature_dim is None else feature_dim
    if f * (cfg.prop_depth + 1) != gs.dim:
        raise ValueError(
            f"statistics dim {gs.dim} is not (prop_depth + 1) * feature dim"
        )
    counts = class_node_counts(gs, cfg)
    labels = np.repeat(np.arange(gs.num_classes), counts).astype(np.int64)
    rng = np.random.default_rng(cfg.seed)
    x = 0.1 * rng.standard_normal((len(labels), f))
    if cfg.init == "mean-shifted":
        x += gs.means[labels, :f]
    lp = LinkPredictor(cfg.adjacency)
    if cfg.adjacency == "mlp":
        sizes = [2 * f, *cfg.hidden, 1]
        for layer, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            lp.params[f"W{layer}"] = rng.uniform(-bound, bound, (fan_in, fan_out))
            lp.params[f"b{layer}"] = rng.uniform(-bound, bound, fan_out)
    elif cfg.adjacency == "direct":
        lp.params["Z"] = np.zeros((len(labels), len(labels)))
    sg = SurrogateGraph(features=x, labels=labels, num_classes=gs.num_classes)
    return sg, lp


# -- soft adjacency -----------------------------------------------------------


def _mlp_pair_logits(x, params, num_layers):
    """o[i, j] = g([x_i, x_j]) for all ordered pairs, plus a backward cache."""
    n, f = x.shape
    w0 = params["W0"]
    left, right = x @ w0[:f], x @ w0[f:]
    pre = (left[:, None, :] + right[None, :, :] + params["b0"]).reshape(n * n, -1)
    pres = [pre]
    act = np.maximum(pre, 0.0)
    acts = [act]
    for layer in range(1, num_layers):
        pre = act @ params[f"W{layer}"] + params[f"b{layer}"]
        if layer == num_layers - 1:
            return pre.reshape(n, n), (pres, acts)
        pres.append(pre)
        act = np.maximum(pre, 0.0)
        acts.append(act)
    raise ValueError("link predictor needs at least two layers")


def _mlp_pair_backward(x, params, num_layers, cache, g_out):
    n, f = x.shape
    pres, acts = cache
    grads = {}
    g = g_out.reshape(n * n, 1)
    for layer in range(num_layers - 1, 0, -1):
        grads[f"W{layer}"] = acts[layer - 1].T @ g
        grads[f"b{layer}"] = g.sum(axis=0)
        g = (g @ params[f"W{layer}"].T) * (pres[layer - 1] > 0)
    g = g.reshape(n, n, -1)
    g_left, g_right = g.sum(axis=1), g.sum(axis=0)
    w0 = params["W0"]
    grads["W0"] = np.concatenate([x.T @ g_left, x.T @ g_right], axis=0)
    grads["b0"] = g_left.sum(axis=0)
    g_x = g_left @ w0[:f].T + g_right @ w0[f:].T
    return grads, g_x


def _dot_scores(x):
    norms = np.sqrt(np.sum(x * x, axis=1) + 1e-12)
    xh = x / norms[:, None]
    return xh @ xh.T, (xh, norms)


def soft_adjacency(x: np.ndarray, lp: LinkPredictor) -> np.ndarray:
    p, _ = _soft_adjacency(x, lp)
    return p


def _soft_adjacency(x, lp):
    if lp.mode == "mlp":
        o, cache = _mlp_pair_logits(x, lp.params, lp.num_layers)
        s = 0.5 * (o + o.T)
    elif lp.mode == "direct":
        z = lp.params["Z"]
        if z.shape != (len(x), len(x)):
            raise ValueError("direct adjacency logits do not match node count")
        s, cache = 0.5 * (z + z.T), None
    else:
        s, cache = _dot_scores(x)
    p = _sigmoid(s)
    np.fill_diagonal(p, 0.0)
    return p, cache


def _soft_adjacency_backward(x, lp, p, cache, g_p):
    """Return (link-predictor grads, grad wrt x) given dL/dP."""
    g_s = g_p * p * (1.0 - p)
    np.fill_diagonal(g_s, 0.0)
    if lp.mode == "mlp":
        g_o = 0.5 * (g_s + g_s.T)
        return _mlp_pair_backward(x, lp.params, lp.num_layers, cache, g_o)
    if lp.mode == "direct":
        return {"Z": 0.5 * (g_s + g_s.T)}, np.zeros_like(x)
    xh, norms = cache
    g_xh = (g_s + g_s.T) @ xh
    radial = np.sum(g_xh * xh, axis=1, keepdims=True)
    return {}, (g_xh - radial * xh) / norms[:, None]


# -- losses -----------------------------------------------------------------


def _normalize_soft(p):
    a_hat = p + np.eye(len(p))
    r = 1.0 / np.sqrt(a_hat.sum(axis=1))
    return a_hat * r[:, None] * r[None, :], a_hat, r


def _normalize_backward(g_a, a_hat, r):
    """dL/dÂ given dL/dÃ for Ã = diag(r) Â diag(r), r = rowsum(Â)^-1/2."""
    g_r = np.sum(g_a * a_hat * r[None, :], axis=1) + np.sum(g_a * a_hat * r[:, None], axis=0)
    g_d = g_r * (-0.5) * r**3
    return g_a * r[:, None] * r[None, :] + g_d[:, None]


def _propagate(x, a_norm, h):
    blocks = [x]
    for _ in range(h):
        blocks.append(a_norm @ blocks[-1])
    return blocks


def alignment_terms(h_feat, labels, gs: GlobalStats, weights=None):
    """Per-class contributions and dL/dH for propagated surrogate features."""
    weights = gs.proportions if weights is None else np.asarray(weights, dtype=np.float64)
    if h_feat.shape[1] != gs.dim:
        raise ValueError(
            f"surrogate propagated dim {h_feat.shape[1]} differs from statistics dim {gs.dim}"
        )
    g_h = np.zeros_like(h_feat)
    contrib = np.zeros(gs.num_classes)
    for c in np.flatnonzero(gs.present):
        idx = np.flatnonzero(labels == c)
        if idx.size == 0:
            continue
        rows = h_feat[idx]
        n_c = len(idx)
        mu = rows.mean(axis=0)
        d_mu = mu - gs.means[c]
        contrib[c] = weights[c] * np.sum(d_mu**2)
        g = np.broadcast_to(2.0 * weights[c] * d_mu / n_c, rows.shape).copy()
        if n_c >= 2:
            centred = rows - mu
            var = np.sum(centred**2, axis=0) / (n_c - 1)
            d_var = var - gs.variances[c]
            contrib[c] += weights[c] * np.sum(d_var**2)
            g += 2.0 * weights[c] * d_var * 2.0 * centred / (n_c - 1)
        g_h[idx] = g
    return contrib, g_h


def alignment_loss(x, p, labels, gs: GlobalStats, h: int, weights=None):
    """Return (loss, dL/dX, dL/dP) for the propagated-statistics alignment."""
    a_norm, a_hat, r = _normalize_soft(p)
    blocks = _propagate(x, a_norm, h)
    contrib, g_h = alignment_terms(np.concatenate(blocks, axis=1), labels, gs, weights)
    f = x.shape[1]
    g_blocks = [g_h[:, i * f : (i + 1) * f].copy() for i in range(h + 1)]
    g_a = np.zeros_like(a_norm)
    for i in range(h, 0, -1):
        g_a += g_blocks[i] @ blocks[i - 1].T
        g_blocks[i - 1] += a_norm.T @ g_blocks[i]
    g_p = _normalize_backward(g_a, a_hat, r)
    np.fill_diagonal(g_p, 0.0)
    return float(contrib.sum()), g_blocks[0], g_p


def smoothness_loss(x, p):
    """Return (loss, dL/dX, dL/dP) for sum P_ij exp(-|x_i-x_j|^2/2) / sum P_ij."""
    if len(x) < 2:
        raise ValueError("smoothness loss needs at least two nodes")
    sq = np.sum(x * x, axis=1)
    dist2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * x @ x.T, 0.0)
    k = np.exp(-0.5 * dist2)
    np.fill_diagonal(k, 0.0)
    total = p.sum()
    w = p * k
    loss = float(w.sum() / total)
    g_p = (k - loss) / total
    np.fill_diagonal(g_p, 0.0)
    w_sym = w + w.T
    g_x = -(w_sym.sum(axis=1)[:, None] * x - w_sym @ x) / total
    return loss, g_x, g_p


def objective(x, lp: LinkPredictor, labels, gs: GlobalStats, cfg: GenConfig,
              weights=None):
    """Total loss, its parts, and gradients for X and the link predictor."""
    p, cache = _soft_adjacency(x, lp)
    l_align, g_x, g_p = alignment_loss(x, p, labels, gs, cfg.prop_depth, weights)
    l_smt = 0.0
    if cfg.alpha > 0 and len(x) >= 2:
        l_smt, g_x_s, g_p_s = smoothness_loss(x, p)
        g_x = g_x + cfg.alpha * g_x_s
        g_p = g_p + cfg.alpha * g_p_s
    lp_grads, g_x_adj = _soft_adjacency_backward(x, lp, p, cache, g_p)
    total = l_align + cfg.alpha * l_smt
    return total, {"align": l_align, "smooth": l_smt}, g_x + g_x_adj, lp_grads


def optimize_surrogate(sg: SurrogateGraph, lp: LinkPredictor, gs: GlobalStats,
                       cfg: GenConfig) -> tuple[SurrogateGraph, LinkPredictor]:
    """Adam on X and the link predictor; the best-loss iterate is kept."""
    params = {"X": sg.features.copy(), **{k: v.copy() for k, v in lp.params.items()}}
    work = LinkPredictor(lp.mode, {k: params[k] for k in lp.params})
    state = AdamState()
    history = []
    best_loss, best = np.inf, None
    for step in range(cfg.steps + 1):
        loss, parts, g_x, g_lp = objective(params["X"], work, sg.labels, gs, cfg)
        if not np.isfinite(loss):
            raise TrainingError(f"surrogate loss diverged at step {step}: {loss}")
        history.append({"step": step, "loss": loss, **parts})
        if loss < best_loss:
            best_loss = loss
            best = {k: v.copy() for k, v in params.items()}
        if step == cfg.steps:
            break
        adam_step(params, {"X": g_x, **g_lp}, state, cfg.lr)
    out_lp = LinkPredictor(lp.mode, {k: best[k] for k in lp.params})
    out = SurrogateGraph(
        features=best["X"], labels=sg.labels.copy(), num_classes=sg.num_classes,
        soft_adj=soft_adjacency(best["X"], out_lp), history=history,
    )
    return out, out_lp


def finalize_adjacency(sg: SurrogateGraph, delta: float) -> SurrogateGraph:
    if sg.soft_adj is None:
        raise ValueError("surrogate has no soft adjacency")
    if not 0.0 <= delta <= 1.0:
        raise ValueError("delta must lie in [0, 1]")
    a = sg.soft_adj >= delta
    np.fill_diagonal(a, False)
    a = a & a.T
    return SurrogateGraph(features=sg.features, labels=sg.labels, num_classes=sg.num_classes,
                          soft_adj=sg.soft_adj, adjacency=a, history=sg.history)


def generate_surrogate(gs: GlobalStats, cfg: GenConfig) -> SurrogateGraph:
    """init -> optimise -> threshold, the complete server-side generation."""
    sg, lp = init_surrogate(gs, cfg)
    sg, lp = optimize_surrogate(sg, lp, gs, cfg)
    return finalize_adjacency(sg, cfg.delta)


def surrogate_stats(sg: SurrogateGraph, h: int, hard: bool = False):
    """Per-class mean and variance of propagated surrogate features (diagnostic)."""
    p = sg.adjacency.astype(np.float64) if hard else sg.soft_adj
    a_norm, _, _ = _normalize_soft(p)
    feats = np.concatenate(_propagate(sg.features, a_norm, h), axis=1)
    means = np.full((sg.num_classes, feats.shape[1]), np.nan)
    for c in np.unique(sg.labels):
        means[c] = feats[sg.labels == c].mean(axis=0)
    return means, feats
