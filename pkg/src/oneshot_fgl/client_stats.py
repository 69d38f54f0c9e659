"""Client-side feature propagation, homophily, label propagation and
class-wise statistics.  Nothing in here leaves the client except ClassStats."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import ClientGraph, normalized_adjacency


@dataclass(frozen=True)
class StatsConfig:
    prop_depth: int = 2
    min_class_count: int = 2
    enable_hre: bool = True

    def __post_init__(self):
        if not 0 <= self.prop_depth <= 4:
            raise ValueError("prop_depth must lie in [0, 4]")
        if self.min_class_count < 2:
            raise ValueError("min_class_count must be >= 2")


@dataclass(frozen=True)
class HreConfig:
    """Reliable-node expansion thresholds.

    ``d_th=None`` uses the client's mean degree; ``top_k=None`` uses
    ceil(C / 2) classes.
    """

    d_th: float | None = None
    f_th: float = 0.95
    top_k: int | None = None
    lp_alpha: float = 0.9
    lp_iters: int = 50

    def __post_init__(self):
        if not 0.0 <= self.f_th <= 1.0:
            raise ValueError("f_th must lie in [0, 1]")
        if not 0.0 < self.lp_alpha < 1.0:
            raise ValueError("lp_alpha must lie in (0, 1)")
        if self.lp_iters < 0:
            raise ValueError("lp_iters must be >= 0")


@dataclass(frozen=True)
class HomophilyProfile:
    node: np.ndarray
    per_class: np.ndarray


@dataclass
class ClassStats:
    """Per-class count, mean and unbiased variance of propagated features.

    Absent classes carry count 0 and NaN vectors; ``present`` says which
    rows are meaningful.
    """

    counts: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    present: np.ndarray = field(init=False)

    def __post_init__(self):
        self.present = self.counts > 0

    @property
    def num_classes(self) -> int:
        return len(self.counts)

    @property
    def dim(self) -> int:
        return self.means.shape[1]


def propagate_features(cg: ClientGraph, h: int, a_norm=None) -> np.ndarray:
    """Concatenate X, ÃX, ..., Ã^h X along the feature axis."""
    if h < 0:
        raise ValueError("h must be >= 0")
    a_norm = normalized_adjacency(cg.graph) if a_norm is None else a_norm
    blocks = [np.asarray(cg.features, dtype=np.float64)]
    for _ in range(h):
        blocks.append(a_norm @ blocks[-1])
    return np.concatenate(blocks, axis=1)


def node_homophily(cg: ClientGraph) -> np.ndarray:
    """Fraction of each train node's train-labelled neighbours sharing its label.

    Non-train nodes and nodes without labelled neighbours get 0.
    """
    g = cg.graph
    train = cg.train_mask
    rows = np.repeat(np.arange(g.num_nodes), g.degrees)
    cols = g.indices
    labelled = train[cols]
    agree = labelled & (cg.labels[rows] == cg.labels[cols])
    denom = np.bincount(rows[labelled], minlength=g.num_nodes).astype(np.float64)
    numer = np.bincount(rows[agree], minlength=g.num_nodes).astype(np.float64)
    out = np.divide(numer, denom, out=np.zeros(g.num_nodes), where=denom > 0)
    out[~train] = 0.0
    return out


def class_homophily(cg: ClientGraph) -> HomophilyProfile:
    h_node = node_homophily(cg)
    train = cg.train_mask
    per_class = np.bincount(
        cg.labels[train], weights=h_node[train], minlength=cg.num_classes
    ).astype(np.float64)
    return HomophilyProfile(node=h_node, per_class=per_class)


def label_propagation(cg: ClientGraph, cfg: HreConfig, a_norm=None) -> np.ndarray:
    """Clamped diffusion F <- a ÃF + (1 - a) F0 followed by row normalisation.

    Unreached rows stay all-zero.
    """
    a_norm = normalized_adjacency(cg.graph) if a_norm is None else a_norm
    train = np.flatnonzero(cg.train_mask)
    f0 = np.zeros((cg.num_nodes, cg.num_classes))
    f0[train, cg.labels[train]] = 1.0
    f = f0.copy()
    for _ in range(cfg.lp_iters):
        f = cfg.lp_alpha * (a_norm @ f) + (1.0 - cfg.lp_alpha) * f0
        f[train] = f0[train]
    totals = f.sum(axis=1, keepdims=True)
    return np.divide(f, totals, out=np.zeros_like(f), where=totals > 0)


def top_k_classes(per_class: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries; ties go to the smaller class id."""
    order = np.lexsort((np.arange(len(per_class)), -per_class))
    return np.sort(order[:k])


def hre_expand(cg: ClientGraph, soft: np.ndarray, prof: HomophilyProfile,
               cfg: HreConfig) -> dict[int, int]:
    """Unlabelled nodes passing the degree, confidence and top-K homophily
    criteria, mapped to their inferred (argmax) label."""
    degrees = cg.graph.degrees
    d_th = float(degrees.mean()) if cfg.d_th is None else cfg.d_th
    k = cfg.top_k if cfg.top_k is not None else int(np.ceil(cg.num_classes / 2))
    k = min(k, cg.num_classes)
    allowed = np.zeros(cg.num_classes, dtype=bool)
    allowed[top_k_classes(prof.per_class, k)] = True
    inferred = soft.argmax(axis=1)
    confidence = soft.max(axis=1)
    selected = (
        ~cg.train_mask
        & (degrees >= d_th)
        & (confidence >= cfg.f_th)
        & (confidence > 0)
        & allowed[inferred]
    )
    return {int(v): int(inferred[v]) for v in np.flatnonzero(selected)}


def estimate_class_stats(x_prop: np.ndarray, cg: ClientGraph, cfg: StatsConfig,
                         hre_set: dict[int, int] | None = None) -> ClassStats:
    """Count, mean and n-1 variance per class over train nodes plus HRE nodes."""
    labels = np.where(cg.train_mask, cg.labels, -1)
    if hre_set:
        nodes = np.fromiter(hre_set.keys(), dtype=np.int64)
        labels[nodes] = np.fromiter(hre_set.values(), dtype=np.int64)
    dim = x_prop.shape[1]
    counts = np.zeros(cg.num_classes, dtype=np.int64)
    means = np.full((cg.num_classes, dim), np.nan)
    variances = np.full((cg.num_classes, dim), np.nan)
    for c in range(cg.num_classes):
        rows = x_prop[labels == c]
        if len(rows) < cfg.min_class_count:
            continue
        counts[c] = len(rows)
        means[c] = rows.mean(axis=0)
        variances[c] = rows.var(axis=0, ddof=1)
    return ClassStats(counts=counts, means=means, variances=variances)


@dataclass
class ClientSummary:
    """Everything a client computes locally before uploading."""

    stats: ClassStats
    profile: HomophilyProfile
    soft_labels: np.ndarray
    hre_nodes: dict[int, int]


def summarize_client(cg: ClientGraph, stats_cfg: StatsConfig, hre_cfg: HreConfig
                     ) -> ClientSummary:
    a_norm = normalized_adjacency(cg.graph)
    x_prop = propagate_features(cg, stats_cfg.prop_depth, a_norm)
    profile = class_homophily(cg)
    soft = label_propagation(cg, hre_cfg, a_norm)
    hre = hre_expand(cg, soft, profile, hre_cfg) if stats_cfg.enable_hre else {}
    stats = estimate_class_stats(x_prop, cg, stats_cfg, hre)
    return ClientSummary(stats=stats, profile=profile, soft_labels=soft, hre_nodes=hre)
