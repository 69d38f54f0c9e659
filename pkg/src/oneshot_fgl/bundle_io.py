"""Dataset bundle directories and converters from common raw formats.

A bundle directory holds five files::

    meta.json     {"name", "num_nodes", "num_edges", "feature_dim", "num_classes"}
    edges.tsv     one undirected edge per line, "u<TAB>v"
    features.bin  little-endian float32, row-major num_nodes x feature_dim
    labels.tsv    one integer per line, -1 for unlabeled
    splits.tsv    one of train/val/test per line
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .graph import SPLIT_NAMES, TEST, TRAIN, VAL, DatasetBundle, Graph, GraphError

BUNDLE_FILES = ("meta.json", "edges.tsv", "features.bin", "labels.tsv", "splits.tsv")


class BundleFormatError(GraphError):
    """A bundle directory is missing files or disagrees with its metadata."""


def bundle_files(bundle: DatasetBundle) -> dict[str, bytes]:
    """Serialise a bundle to the exact bytes ``save_bundle`` writes."""
    meta = {
        "name": bundle.name,
        "num_nodes": bundle.num_nodes,
        "num_edges": bundle.graph.num_edges,
        "feature_dim": bundle.feature_dim,
        "num_classes": bundle.num_classes,
    }
    edges = bundle.graph.edge_list()
    return {
        "meta.json": (json.dumps(meta, indent=2) + "\n").encode("utf-8"),
        "edges.tsv": "".join(f"{u}\t{v}\n" for u, v in edges).encode("ascii"),
        "features.bin": np.ascontiguousarray(bundle.features, dtype="<f4").tobytes(),
        "labels.tsv": "".join(f"{int(y)}\n" for y in bundle.labels).encode("ascii"),
        "splits.tsv": "".join(f"{SPLIT_NAMES[s]}\n" for s in bundle.splits).encode("ascii"),
    }


def bundle_nbytes(bundle: DatasetBundle) -> int:
    return sum(len(b) for b in bundle_files(bundle).values())


def save_bundle(bundle: DatasetBundle, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for name, payload in bundle_files(bundle).items():
        (path / name).write_bytes(payload)


def _read_lines(path: Path) -> list[str]:
    return _lines(path.read_bytes())


def _lines(payload: bytes) -> list[str]:
    return [ln for ln in payload.decode("utf-8").splitlines() if ln.strip()]


def load_bundle(path) -> DatasetBundle:
    path = Path(path)
    files = {}
    for name in BUNDLE_FILES:
        if not (path / name).is_file():
            raise BundleFormatError(f"missing bundle file {path / name}")
        files[name] = (path / name).read_bytes()
    return bundle_from_files(files)


def bundle_from_files(files: dict[str, bytes]) -> DatasetBundle:
    """Inverse of ``bundle_files``: parse and validate the five payloads."""
    for name in BUNDLE_FILES:
        if name not in files:
            raise BundleFormatError(f"missing bundle file {name}")
    meta = json.loads(files["meta.json"].decode("utf-8"))
    try:
        n = int(meta["num_nodes"])
        f = int(meta["feature_dim"])
        num_classes = int(meta["num_classes"])
        name = str(meta["name"])
    except KeyError as exc:
        raise BundleFormatError(f"meta.json lacks key {exc}") from None

    raw = files["features.bin"]
    if len(raw) != n * f * 4:
        raise BundleFormatError(
            f"feature byte-length mismatch: {len(raw)} bytes for {n}x{f} float32"
        )
    features = np.frombuffer(raw, dtype="<f4").reshape(n, f).astype(np.float32)

    edge_lines = _lines(files["edges.tsv"])
    try:
        edges = np.array([ln.split("\t") for ln in edge_lines], dtype=np.int64).reshape(-1, 2)
    except ValueError:
        raise BundleFormatError("edges.tsv must hold two tab-separated ids per line") from None
    graph = Graph.from_edges(n, edges)
    if "num_edges" in meta and int(meta["num_edges"]) != graph.num_edges:
        raise BundleFormatError(
            f"meta num_edges={meta['num_edges']} but edges.tsv holds {graph.num_edges}"
        )

    labels = np.array([int(x) for x in _lines(files["labels.tsv"])], dtype=np.int64)
    lookup = {s: i for i, s in enumerate(SPLIT_NAMES)}
    try:
        splits = np.array([lookup[t.strip()] for t in _lines(files["splits.tsv"])], dtype=np.int8)
    except KeyError as exc:
        raise BundleFormatError(f"unknown split token {exc}") from None
    if len(labels) != n or len(splits) != n:
        raise BundleFormatError("labels.tsv/splits.tsv line count differs from num_nodes")
    return DatasetBundle(
        name=name,
        graph=graph,
        features=features,
        labels=labels,
        splits=splits,
        num_classes=num_classes,
    )


def random_splits(num_nodes: int, fractions=(0.2, 0.4, 0.4), seed: int = 0) -> np.ndarray:
    """Random train/val/test tags; sizes are floor(frac * n), rest goes to test."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(num_nodes)
    n_train = int(np.floor(fractions[0] * num_nodes))
    n_val = int(np.floor(fractions[1] * num_nodes))
    splits = np.full(num_nodes, TEST, dtype=np.int8)
    splits[order[:n_train]] = TRAIN
    splits[order[n_train : n_train + n_val]] = VAL
    return splits


def _labels_to_ids(raw_labels: list[str]) -> tuple[np.ndarray, list[str]]:
    try:
        ints = [int(x) for x in raw_labels]
        return np.array(ints, dtype=np.int64), sorted({str(i) for i in ints if i >= 0})
    except ValueError:
        names = sorted(set(raw_labels))
        index = {s: i for i, s in enumerate(names)}
        return np.array([index[s] for s in raw_labels], dtype=np.int64), names


def convert_edge_list(edges_path, features_path, labels_path, *, name: str,
                      splits_path=None, fractions=(0.2, 0.4, 0.4), seed: int = 0,
                      num_classes: int | None = None) -> DatasetBundle:
    """Build a bundle from a whitespace/comma edge list, a headerless feature CSV
    (one row per node) and a label file (one label per line).

    Self-loops in the edge list are dropped.  Without ``splits_path`` a random
    split with the given fractions is drawn from ``seed``.
    """
    with open(features_path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    features = np.array(rows, dtype=np.float64).astype(np.float32)
    n = features.shape[0]
    labels, _ = _labels_to_ids(_read_lines(Path(labels_path)))
    edges = []
    for ln in _read_lines(Path(edges_path)):
        u, v = ln.replace(",", " ").split()[:2]
        if int(u) != int(v):
            edges.append((int(u), int(v)))
    if splits_path is not None:
        lookup = {s: i for i, s in enumerate(SPLIT_NAMES)}
        splits = np.array([lookup[t] for t in _read_lines(Path(splits_path))], dtype=np.int8)
    else:
        splits = random_splits(n, fractions, seed)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    return DatasetBundle(
        name=name,
        graph=Graph.from_edges(n, np.array(edges, dtype=np.int64).reshape(-1, 2)),
        features=features,
        labels=labels,
        splits=splits,
        num_classes=num_classes,
    )


def convert_linqs(content_path, cites_path, *, name: str = "cora",
                  fractions=(0.2, 0.4, 0.4), seed: int = 0) -> DatasetBundle:
    """Convert the LINQS ``.content`` / ``.cites`` pair (e.g. Cora, CiteSeer).

    Content lines are ``<id> <feature>* <label>``.  Citations whose endpoints
    are not in the content file are ignored; class ids follow sorted label names.
    """
    ids, feats, raw_labels = [], [], []
    for ln in _read_lines(Path(content_path)):
        parts = ln.split()
        ids.append(parts[0])
        feats.append([float(x) for x in parts[1:-1]])
        raw_labels.append(parts[-1])
    index = {pid: i for i, pid in enumerate(ids)}
    names = sorted(set(raw_labels))
    label_index = {s: i for i, s in enumerate(names)}
    edges = []
    for ln in _read_lines(Path(cites_path)):
        a, b = ln.split()[:2]
        if a in index and b in index and a != b:
            edges.append((index[a], index[b]))
    n = len(ids)
    return DatasetBundle(
        name=name,
        graph=Graph.from_edges(n, np.array(edges, dtype=np.int64).reshape(-1, 2)),
        features=np.array(feats, dtype=np.float32),
        labels=np.array([label_index[s] for s in raw_labels], dtype=np.int64),
        splits=random_splits(n, fractions, seed),
        num_classes=len(names),
    )
