"""Synthetic attributed graphs for tests, fixtures and offline benchmarks."""

from __future__ import annotations

import numpy as np

from .bundle_io import random_splits
from .graph import TEST, TRAIN, DatasetBundle, Graph

CORA_CLASS_SIZES = (818, 426, 418, 351, 298, 217, 180)


def _sample_edges(blocks: np.ndarray, probs, rng) -> np.ndarray:
    """Sample an undirected edge set where P(u~v) = probs(blocks[u], blocks[v])."""
    n = len(blocks)
    iu, ju = np.triu_indices(n, k=1)
    p = probs(iu, ju)
    keep = rng.random(len(iu)) < p
    return np.stack([iu[keep], ju[keep]], axis=1)


def make_csbm(class_sizes, feature_dim: int = 16, *, avg_degree: float = 6.0,
              homophily: float = 0.8, feature_signal: float = 1.0,
              fractions=(0.2, 0.4, 0.4), seed: int = 0, name: str = "csbm"
              ) -> DatasetBundle:
    """Contextual stochastic block model with Gaussian features.

    Each class has a random unit-norm mean direction scaled by
    ``feature_signal``; features are that mean plus standard normal noise.
    ``homophily`` is the expected fraction of intra-class edges.
    """
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(len(class_sizes)), class_sizes).astype(np.int64)
    labels = labels[rng.permutation(len(labels))]
    n = len(labels)
    sizes = np.bincount(labels).astype(np.float64)
    intra_pairs = float(np.sum(sizes * (sizes - 1) / 2))
    inter_pairs = n * (n - 1) / 2 - intra_pairs
    total_edges = avg_degree * n / 2
    p_in = min(1.0, homophily * total_edges / max(intra_pairs, 1.0))
    p_out = min(1.0, (1 - homophily) * total_edges / max(inter_pairs, 1.0))
    edges = _sample_edges(
        labels, lambda i, j: np.where(labels[i] == labels[j], p_in, p_out), rng
    )
    means = rng.normal(size=(len(class_sizes), feature_dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    features = feature_signal * means[labels] + rng.normal(size=(n, feature_dim))
    return DatasetBundle(
        name=name,
        graph=Graph.from_edges(n, edges),
        features=features.astype(np.float32),
        labels=labels,
        splits=random_splits(n, fractions, seed + 1),
        num_classes=len(class_sizes),
    )


def make_cora_like(*, num_nodes: int = 2708, feature_dim: int = 1433,
                   class_sizes=CORA_CLASS_SIZES, cluster_size: int = 300,
                   avg_degree: float = 3.9, homophily: float = 0.81,
                   cluster_share: float = 0.7, words_per_node: float = 18.0,
                   topic_words: int = 60, topic_share: float = 0.15,
                   fractions=(0.2, 0.4, 0.4), seed: int = 0) -> DatasetBundle:
    """A citation-network stand-in with Cora's size, class skew and sparsity.

    Nodes of each class are grouped into small clusters; ``cluster_share`` of
    the intra-class edges stay inside a cluster, which gives Louvain many
    class-pure communities.  Features are sparse binary bag-of-words vectors
    in which ``topic_share`` of a node's words come from its class vocabulary.
    """
    rng = np.random.default_rng(seed)
    sizes = np.asarray(class_sizes, dtype=np.float64)
    sizes = np.floor(sizes / sizes.sum() * num_nodes).astype(np.int64)
    sizes[0] += num_nodes - sizes.sum()
    labels = np.repeat(np.arange(len(sizes)), sizes).astype(np.int64)
    clusters = np.concatenate(
        [np.arange(s) // cluster_size + 10_000 * c for c, s in enumerate(sizes)]
    )
    perm = rng.permutation(num_nodes)
    labels, clusters = labels[perm], clusters[perm]

    n = num_nodes
    total_edges = avg_degree * n / 2
    cl_ids, cl_sizes = np.unique(clusters, return_counts=True)
    cluster_pairs = float(np.sum(cl_sizes * (cl_sizes - 1) / 2))
    class_pairs = float(np.sum(sizes * (sizes - 1) / 2)) - cluster_pairs
    other_pairs = n * (n - 1) / 2 - cluster_pairs - class_pairs
    p_cluster = homophily * cluster_share * total_edges / cluster_pairs
    p_class = homophily * (1 - cluster_share) * total_edges / class_pairs
    p_other = (1 - homophily) * total_edges / other_pairs

    def probs(i, j):
        same_class = labels[i] == labels[j]
        same_cluster = clusters[i] == clusters[j]
        return np.where(same_cluster, p_cluster, np.where(same_class, p_class, p_other))

    edges = _sample_edges(labels, probs, rng)

    num_classes = len(sizes)
    vocab = np.stack([rng.choice(feature_dim, topic_words, replace=False)
                      for _ in range(num_classes)])
    features = np.zeros((n, feature_dim), dtype=np.float32)
    counts = rng.poisson(words_per_node, size=n).clip(min=1)
    for v in range(n):
        n_topic = rng.binomial(counts[v], topic_share)
        words = np.concatenate([
            rng.choice(vocab[labels[v]], n_topic),
            rng.integers(0, feature_dim, counts[v] - n_topic),
        ])
        features[v, words] = 1.0
    return DatasetBundle(
        name="cora-like",
        graph=Graph.from_edges(n, edges),
        features=features,
        labels=labels,
        splits=random_splits(n, fractions, seed + 1),
        num_classes=num_classes,
    )


def make_block_graph(class_sizes, probs, means, *, noise: float = 1.0,
                     fractions=(0.2, 0.4, 0.4), seed: int = 0, name: str = "blocks"
                     ) -> DatasetBundle:
    """Stochastic block model with an explicit C x C edge-probability matrix
    and given class mean vectors (features are mean + ``noise`` * N(0, 1)).

    Sharing ``means`` across calls gives several graphs (clients) drawn from
    one feature distribution but with different class skew and homophily.
    """
    rng = np.random.default_rng(seed)
    probs = np.asarray(probs, dtype=np.float64)
    means = np.asarray(means, dtype=np.float64)
    labels = np.repeat(np.arange(len(class_sizes)), class_sizes).astype(np.int64)
    labels = labels[rng.permutation(len(labels))]
    n = len(labels)
    edges = _sample_edges(labels, lambda i, j: probs[labels[i], labels[j]], rng)
    features = means[labels] + noise * rng.normal(size=(n, means.shape[1]))
    return DatasetBundle(
        name=name,
        graph=Graph.from_edges(n, edges),
        features=features.astype(np.float32),
        labels=labels,
        splits=random_splits(n, fractions, seed + 1),
        num_classes=len(class_sizes),
    )


def make_planted_blocks(n_block: int = 50, *, p_in: float = 0.3, bridges: int = 5,
                        labelled: float = 0.1, feature_dim: int = 4, seed: int = 0
                        ) -> DatasetBundle:
    """Two dense same-label blocks joined by ``bridges`` random cross edges.

    ``labelled`` of each block is TRAIN, the rest TEST; features are noise.
    """
    rng = np.random.default_rng(seed)
    n = 2 * n_block
    labels = np.repeat([0, 1], n_block).astype(np.int64)
    iu, ju = np.triu_indices(n, 1)
    keep = (labels[iu] == labels[ju]) & (rng.random(len(iu)) < p_in)
    bridge = np.stack([rng.integers(0, n_block, bridges),
                       rng.integers(n_block, n, bridges)], axis=1)
    edges = np.concatenate([np.stack([iu[keep], ju[keep]], axis=1), bridge])
    splits = np.full(n, TEST, dtype=np.int8)
    for c in (0, 1):
        idx = np.flatnonzero(labels == c)
        splits[rng.choice(idx, int(round(labelled * n_block)), replace=False)] = TRAIN
    return DatasetBundle(
        name="planted-blocks",
        graph=Graph.from_edges(n, edges),
        features=rng.normal(size=(n, feature_dim)).astype(np.float32),
        labels=labels,
        splits=splits,
        num_classes=2,
    )
