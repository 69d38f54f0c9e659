"""Louvain community detection and community-based client partitioning."""

from __future__ import annotations

from collections import deque

import numpy as np

from .graph import ClientGraph, DatasetBundle, Graph, induced_subgraph


def modularity(g: Graph, communities) -> float:
    """Newman modularity of a node -> community assignment (resolution 1)."""
    communities = np.asarray(communities)
    m2 = float(len(g.indices))
    if m2 == 0:
        return 0.0
    deg = g.degrees.astype(np.float64)
    rows = np.repeat(np.arange(g.num_nodes), g.degrees)
    internal = np.bincount(
        communities[rows][communities[rows] == communities[g.indices]],
        minlength=communities.max() + 1,
    ).astype(np.float64)
    total = np.bincount(communities, weights=deg, minlength=communities.max() + 1)
    return float(np.sum(internal / m2 - (total / m2) ** 2))


def _one_level(adj: list[dict], loops: list[int], rng: np.random.Generator):
    """Local-move phase on a weighted graph; returns (community, moved_any).

    Gains are compared as exact integers: w_in * 2m - tot * k_i is the
    modularity gain scaled by (2m)^2 / 2.
    """
    n = len(adj)
    k = [loops[i] + sum(adj[i].values()) for i in range(n)]
    m2 = sum(k)
    comm = list(range(n))
    tot = list(k)
    moved_any = False
    while True:
        moved = False
        for i in range(n):
            old = comm[i]
            tot[old] -= k[i]
            weights: dict[int, int] = {}
            for j, w in adj[i].items():
                c = comm[j]
                weights[c] = weights.get(c, 0) + w
            stay = weights.get(old, 0) * m2 - tot[old] * k[i]
            best, best_gain = [old], stay
            for c, w in weights.items():
                if c == old:
                    continue
                gain = w * m2 - tot[c] * k[i]
                if gain > best_gain:
                    best, best_gain = [c], gain
                elif gain == best_gain and best_gain > stay:
                    best.append(c)
            if best_gain > stay:
                new = best[0] if len(best) == 1 else best[int(rng.integers(len(best)))]
                moved = moved_any = True
            else:
                new = old
            comm[i] = new
            tot[new] += k[i]
        if not moved:
            return comm, moved_any


def _aggregate(adj, loops, comm):
    labels = {c: idx for idx, c in enumerate(dict.fromkeys(comm))}
    size = len(labels)
    new_adj: list[dict] = [dict() for _ in range(size)]
    new_loops = [0] * size
    for i, nbrs in enumerate(adj):
        ci = labels[comm[i]]
        new_loops[ci] += loops[i]
        for j, w in nbrs.items():
            cj = labels[comm[j]]
            if ci == cj:
                new_loops[ci] += w
            else:
                new_adj[ci][cj] = new_adj[ci].get(cj, 0) + w
    return new_adj, new_loops, np.array([labels[c] for c in comm], dtype=np.int64)


def louvain_partition(g: Graph, seed: int = 0) -> np.ndarray:
    """Multi-level Louvain; returns a community id per node.

    Nodes are swept in ascending order and ties between equally good target
    communities are broken by a generator seeded with ``seed``.  Community ids
    are numbered by first appearance in node order.
    """
    rng = np.random.default_rng(seed)
    adj = [
        {int(j): 1 for j in g.neighbors(i)} for i in range(g.num_nodes)
    ]
    loops = [0] * g.num_nodes
    membership = np.arange(g.num_nodes, dtype=np.int64)
    while True:
        comm, moved = _one_level(adj, loops, rng)
        if not moved:
            break
        adj, loops, relabel = _aggregate(adj, loops, comm)
        membership = relabel[membership]
    _, first = np.unique(membership, return_index=True)
    order = np.argsort(np.argsort(first))
    remap = dict(zip(np.unique(membership).tolist(), order.tolist()))
    return np.array([remap[c] for c in membership.tolist()], dtype=np.int64)


def _region_grow_split(g: Graph, nodes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split ``nodes`` in two by breadth-first growth from the smallest id."""
    target = (len(nodes) + 1) // 2
    inside = set(nodes.tolist())
    taken: list[int] = []
    seen: set[int] = set()
    for start in sorted(inside):
        if len(taken) >= target:
            break
        if start in seen:
            continue
        queue = deque([start])
        seen.add(start)
        while queue and len(taken) < target:
            u = queue.popleft()
            taken.append(u)
            for v in g.neighbors(u).tolist():
                if v in inside and v not in seen:
                    seen.add(v)
                    queue.append(v)
    first = np.array(sorted(taken), dtype=np.int64)
    second = np.array(sorted(inside.difference(taken)), dtype=np.int64)
    return first, second


def label_imbalance_split(bundle: DatasetBundle, num_clients: int, seed: int = 0
                          ) -> list[ClientGraph]:
    """Partition a dataset into ``num_clients`` non-overlapping subgraphs.

    Louvain communities are kept intact and dealt, largest first, to the client
    that currently holds the fewest nodes.  When there are fewer communities
    than clients the largest ones are halved by region growing first.
    """
    if num_clients < 1:
        raise ValueError("num_clients must be >= 1")
    if num_clients > bundle.num_nodes:
        raise ValueError("more clients than nodes")
    comm = louvain_partition(bundle.graph, seed)
    groups = [np.flatnonzero(comm == c) for c in range(int(comm.max()) + 1)]
    while len(groups) < num_clients:
        largest = max(range(len(groups)), key=lambda i: (len(groups[i]), -i))
        a, b = _region_grow_split(bundle.graph, groups.pop(largest))
        groups.extend([a, b])
    groups.sort(key=lambda grp: (-len(grp), int(grp[0])))
    members: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
    sizes = np.zeros(num_clients, dtype=np.int64)
    for grp in groups:
        k = int(np.argmin(sizes))
        members[k].append(grp)
        sizes[k] += len(grp)
    return [
        induced_subgraph(
            bundle.graph, bundle.features, bundle.labels, bundle.splits,
            np.concatenate(parts), num_classes=bundle.num_classes, client_id=k,
        )
        for k, parts in enumerate(members)
    ]
