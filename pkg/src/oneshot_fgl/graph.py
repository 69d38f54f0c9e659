"""Graph storage, split masks, dataset bundles and client subgraphs.

Graphs are undirected, unweighted and stored in compressed row form with
strictly ascending neighbour lists.  Self-loops are never stored; the
augmented normalisation adds them implicitly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

TRAIN, VAL, TEST = 0, 1, 2
SPLIT_NAMES = ("train", "val", "test")
UNLABELED = -1


class GraphError(ValueError):
    """Raised for structurally invalid graphs or inconsistent arrays."""


@dataclass(frozen=True, eq=False)
class Graph:
    num_nodes: int
    indptr: np.ndarray
    indices: np.ndarray

    @classmethod
    def from_edges(cls, num_nodes: int, edges) -> "Graph":
        """Build a graph from (u, v) pairs, symmetrising and deduplicating.

        Raises GraphError on self-loops or ids outside ``[0, num_nodes)``.
        """
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if edges.size:
            if edges.min() < 0 or edges.max() >= num_nodes:
                raise GraphError("edge endpoint out of range")
            if np.any(edges[:, 0] == edges[:, 1]):
                bad = edges[edges[:, 0] == edges[:, 1]][0, 0]
                raise GraphError(f"self-loop on node {bad}")
        both = np.concatenate([edges, edges[:, ::-1]], axis=0)
        adj = sp.csr_matrix(
            (np.ones(len(both), dtype=np.int8), (both[:, 0], both[:, 1])),
            shape=(num_nodes, num_nodes),
        )
        adj.sum_duplicates()
        adj.sort_indices()
        return cls(
            num_nodes=int(num_nodes),
            indptr=adj.indptr.astype(np.int64),
            indices=adj.indices.astype(np.int64),
        )

    @classmethod
    def empty(cls, num_nodes: int) -> "Graph":
        return cls.from_edges(num_nodes, np.zeros((0, 2), dtype=np.int64))

    @property
    def num_edges(self) -> int:
        """Number of undirected edges."""
        return int(len(self.indices) // 2)

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def neighbors(self, node: int) -> np.ndarray:
        return self.indices[self.indptr[node] : self.indptr[node + 1]]

    def edge_list(self) -> np.ndarray:
        """Undirected edges as an (E, 2) array with u < v, sorted."""
        rows = np.repeat(np.arange(self.num_nodes), self.degrees)
        keep = rows < self.indices
        return np.stack([rows[keep], self.indices[keep]], axis=1)

    def adjacency(self) -> sp.csr_matrix:
        data = np.ones(len(self.indices), dtype=np.float64)
        return sp.csr_matrix(
            (data, self.indices, self.indptr), shape=(self.num_nodes, self.num_nodes)
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, Graph):
            return NotImplemented
        return (
            self.num_nodes == other.num_nodes
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.indices, other.indices)
        )


def normalized_adjacency(g: Graph) -> sp.csr_matrix:
    """Return D^-1/2 (A + I) D^-1/2 where D is the degree matrix of A + I."""
    a_hat = g.adjacency() + sp.identity(g.num_nodes, format="csr")
    d_inv_sqrt = 1.0 / np.sqrt(np.asarray(a_hat.sum(axis=1)).ravel())
    scale = sp.diags(d_inv_sqrt)
    return (scale @ a_hat @ scale).tocsr()


def _check_arrays(num_nodes, features, labels, splits, num_classes) -> None:
    if features.ndim != 2 or features.shape[0] != num_nodes:
        raise GraphError(
            f"features have shape {features.shape}, expected ({num_nodes}, f)"
        )
    if labels.shape != (num_nodes,) or splits.shape != (num_nodes,):
        raise GraphError("labels/splits length does not match num_nodes")
    if not np.all(np.isfinite(features)):
        raise GraphError("non-finite feature value")
    if np.any((labels < UNLABELED) | (labels >= num_classes)):
        raise GraphError(f"label out of range [0, {num_classes})")
    if np.any((splits < TRAIN) | (splits > TEST)):
        raise GraphError("unknown split tag")
    if np.any((splits == TRAIN) & (labels == UNLABELED)):
        raise GraphError("train node without a label")


@dataclass(frozen=True, eq=False)
class DatasetBundle:
    name: str
    graph: Graph
    features: np.ndarray
    labels: np.ndarray
    splits: np.ndarray
    num_classes: int

    def __post_init__(self):
        _check_arrays(
            self.graph.num_nodes, self.features, self.labels, self.splits, self.num_classes
        )

    @property
    def num_nodes(self) -> int:
        return self.graph.num_nodes

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def mask(self, split: int) -> np.ndarray:
        return self.splits == split


@dataclass(frozen=True, eq=False)
class ClientGraph:
    client_id: int
    graph: Graph
    features: np.ndarray
    labels: np.ndarray
    splits: np.ndarray
    num_classes: int
    global_node_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        _check_arrays(
            self.graph.num_nodes, self.features, self.labels, self.splits, self.num_classes
        )
        if self.global_node_ids is None:
            object.__setattr__(
                self, "global_node_ids", np.arange(self.graph.num_nodes, dtype=np.int64)
            )
        if self.global_node_ids.shape != (self.graph.num_nodes,):
            raise GraphError("global_node_ids length does not match num_nodes")

    @property
    def num_nodes(self) -> int:
        return self.graph.num_nodes

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def train_mask(self) -> np.ndarray:
        return self.splits == TRAIN

    @property
    def val_mask(self) -> np.ndarray:
        return self.splits == VAL

    @property
    def test_mask(self) -> np.ndarray:
        return self.splits == TEST

    def to_bundle(self, name: str | None = None) -> DatasetBundle:
        return DatasetBundle(
            name=name or f"client_{self.client_id}",
            graph=self.graph,
            features=self.features,
            labels=self.labels,
            splits=self.splits,
            num_classes=self.num_classes,
        )

    @classmethod
    def from_bundle(cls, bundle: DatasetBundle, client_id: int = 0, global_node_ids=None):
        return cls(
            client_id=client_id,
            graph=bundle.graph,
            features=bundle.features,
            labels=bundle.labels,
            splits=bundle.splits,
            num_classes=bundle.num_classes,
            global_node_ids=global_node_ids,
        )


def induced_subgraph(g: Graph, features, labels, splits, node_set, *, num_classes: int,
                     client_id: int = 0) -> ClientGraph:
    """Restrict a graph and its node arrays to ``node_set`` (ids remapped densely).

    The relative order of the kept nodes is preserved, so local id ``i``
    corresponds to ``sorted(node_set)[i]``.
    """
    nodes = np.unique(np.asarray(node_set, dtype=np.int64))
    if nodes.size and (nodes[0] < 0 or nodes[-1] >= g.num_nodes):
        raise GraphError("node id out of range")
    local = np.full(g.num_nodes, -1, dtype=np.int64)
    local[nodes] = np.arange(len(nodes))
    edges = g.edge_list()
    keep = (local[edges[:, 0]] >= 0) & (local[edges[:, 1]] >= 0)
    sub = Graph.from_edges(len(nodes), local[edges[keep]])
    return ClientGraph(
        client_id=client_id,
        graph=sub,
        features=features[nodes],
        labels=labels[nodes],
        splits=splits[nodes],
        num_classes=num_classes,
        global_node_ids=nodes,
    )
