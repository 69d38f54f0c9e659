"""End-to-end one-shot protocol: partition, local statistics, masked upload,
secure aggregation, surrogate generation, download, two-stage training and
evaluation.

The server side is confined to :class:`Server`, whose methods accept only
masked uploads, personal masks and global statistics.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bundle_io import bundle_files, bundle_from_files, load_bundle
from .client_stats import ClientSummary, summarize_client
from .config import FederationConfig, to_dict
from .gnn import GnnModel, predict
from .graph import ClientGraph, DatasetBundle, normalized_adjacency
from .partition import label_imbalance_split
from .personalize import PersonalizedResult, personalize_client
from .secure_agg import (
    FixedPointCodec, GlobalStats, MaskedUpload, aggregate_unmask, build_masked_upload,
    deal_seeds, layout_size, pooled_stats, stats_vector,
)
from .surrogate import generate_surrogate

SEED_TAGS = {"masks": 1, "gen": 2, "stage1": 3, "stage2": 4}
SEED_SCHEME = (
    "stage seed = SeedSequence([master, tag, client]).generate_state(1, uint64) >> 1 "
    "with tags masks=1, gen=2, stage1=3, stage2=4 (client=0 for server stages); "
    "the partition uses partition_seed directly"
)


class StageError(RuntimeError):
    """A pipeline failure tagged with the stage that raised it."""

    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"[{stage}] {type(exc).__name__}: {exc}")
        self.stage = stage


def derive_seed(master: int, tag: str, client: int = 0) -> int:
    state = np.random.SeedSequence([int(master), SEED_TAGS[tag], int(client)]).generate_state(
        1, dtype=np.uint64
    )
    return int(state[0] >> np.uint64(1))


def evaluate_metrics(predictions, labels, test_mask, num_classes: int) -> dict:
    """Accuracy and F1-macro (percent) on labelled test nodes.

    ``f1_macro`` averages per-class F1 over all ``num_classes`` classes (a
    class absent from both truth and prediction scores 0).  ``f1_macro_local``
    averages over classes present in truth or prediction only.
    """
    labels = np.asarray(labels)
    idx = np.flatnonzero(np.asarray(test_mask) & (labels >= 0))
    if idx.size == 0:
        raise ValueError("no labelled test nodes")
    y, p = labels[idx], np.asarray(predictions)[idx]
    tp = np.bincount(y[p == y], minlength=num_classes).astype(np.float64)
    n_true = np.bincount(y, minlength=num_classes)
    n_pred = np.bincount(p, minlength=num_classes)
    denom = (n_true + n_pred).astype(np.float64)
    f1 = np.divide(2 * tp, denom, out=np.zeros(num_classes), where=denom > 0)
    seen = denom > 0
    return {
        "accuracy": 100.0 * float(np.mean(p == y)),
        "f1_macro": 100.0 * float(f1.mean()),
        "f1_macro_local": 100.0 * float(f1[seen].mean()),
        "num_test": int(idx.size),
    }


@dataclass
class TransferLog:
    uploads: dict[int, list[int]] = field(default_factory=dict)
    downloads: dict[int, list[int]] = field(default_factory=dict)

    def upload(self, client: int, nbytes: int) -> None:
        self.uploads.setdefault(client, []).append(nbytes)

    def download(self, client: int, nbytes: int) -> None:
        self.downloads.setdefault(client, []).append(nbytes)

    def check_one_round(self, clients) -> None:
        for k in clients:
            if len(self.uploads.get(k, [])) != 1 or len(self.downloads.get(k, [])) != 1:
                raise RuntimeError(f"client {k} did not make exactly one upload and one download")


class Server:
    """Sees masked uploads and personal masks only; never a client graph."""

    def __init__(self, codec: FixedPointCodec, num_classes: int, dim: int, pooling: str):
        self.codec = codec
        self.num_classes = num_classes
        self.dim = dim
        self.pooling = pooling
        self._uploads: list[MaskedUpload] = []
        self._masks: list[np.ndarray | None] = []

    def receive(self, payload: bytes, personal_mask: np.ndarray | None) -> None:
        self._uploads.append(MaskedUpload.from_bytes(payload))
        self._masks.append(personal_mask)

    def aggregate(self) -> GlobalStats:
        summed = aggregate_unmask(self._uploads, self._masks, self.codec)
        return pooled_stats(summed, self.num_classes, self.dim, self.pooling)

    @staticmethod
    def generate(gs: GlobalStats, cfg: FederationConfig, seed: int) -> dict[str, bytes]:
        return surrogate_payload(gs, cfg, seed)


def surrogate_payload(gs: GlobalStats, cfg: FederationConfig, seed: int) -> dict[str, bytes]:
    gen_cfg = dataclasses.replace(cfg.gen, seed=seed)
    sg = generate_surrogate(gs, gen_cfg)
    return bundle_files(sg.to_bundle())


@dataclass
class ClientOutcome:
    client_id: int
    metrics: dict
    model: GnnModel
    result: PersonalizedResult
    predictions: np.ndarray


def client_summary(cg: ClientGraph, cfg: FederationConfig) -> ClientSummary:
    return summarize_client(cg, cfg.stats, cfg.hre)


def client_train(cg: ClientGraph, surrogate: DatasetBundle | None, summary: ClientSummary,
                 cfg: FederationConfig, master_seed: int) -> ClientOutcome:
    k = cg.client_id
    pcfg = dataclasses.replace(
        cfg.personalize,
        stage1=dataclasses.replace(cfg.personalize.stage1, seed=derive_seed(master_seed, "stage1", k)),
        stage2=dataclasses.replace(cfg.personalize.stage2, seed=derive_seed(master_seed, "stage2", k)),
    )
    result = personalize_client(cg, surrogate, cfg.model_for(k), pcfg, summary.profile,
                                summary.soft_labels)
    preds = predict(result.model, normalized_adjacency(cg.graph), cg.features)
    metrics = evaluate_metrics(preds, cg.labels, cg.test_mask, cg.num_classes)
    return ClientOutcome(k, metrics, result.model, result, preds)


def _pmap(fn, items, threads: int):
    workers = threads or os.cpu_count() or 1
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _stage(name, fn, *args):
    try:
        return fn(*args)
    except StageError:
        raise
    except Exception as exc:  # tag and re-raise
        raise StageError(name, exc) from exc


def run_seed(clients: list[ClientGraph], cfg: FederationConfig, master_seed: int) -> dict:
    """One complete federation for one master seed; returns the per-seed record."""
    t0 = time.perf_counter()
    num_classes = clients[0].num_classes
    dim = clients[0].feature_dim * (cfg.stats.prop_depth + 1)
    log = TransferLog()
    ids = [cg.client_id for cg in clients]
    summaries = _pmap(lambda cg: _stage("stats", client_summary, cg, cfg), clients, cfg.threads)

    surrogate = None
    surrogate_info = {}
    if cfg.method == "opfgl":
        codec = FixedPointCodec(cfg.codec.scale_bits, cfg.codec.modulus_bits, len(clients))
        seeds = deal_seeds(len(clients), derive_seed(master_seed, "masks"))
        server = Server(codec, num_classes, dim, cfg.pooling)
        for cg, summ in zip(clients, summaries):
            upload, personal = _stage(
                "upload", build_masked_upload, stats_vector(summ.stats), cg.client_id, seeds, codec
            )
            payload = upload.to_bytes()
            log.upload(cg.client_id, len(payload))
            server.receive(payload, personal)
        gs = _stage("aggregate", server.aggregate)
        gen_seed = derive_seed(master_seed, "gen")
        if cfg.mode == "server_gen":
            files = _stage("generate", server.generate, gs, cfg, gen_seed)
            size = sum(len(b) for b in files.values())
            for k in ids:
                log.download(k, size)
            surrogate = bundle_from_files(files)
        else:
            payload = gs.to_bytes()
            for k in ids:
                log.download(k, len(payload))
            # every client would run this locally; with shared seeds the result
            # is the same on each, so it is computed once here
            received = GlobalStats.from_bytes(payload)
            surrogate = bundle_from_files(
                _stage("generate", surrogate_payload, received, cfg, gen_seed)
            )
        log.check_one_round(ids)
        surrogate_info = {
            "num_nodes": surrogate.num_nodes,
            "num_edges": surrogate.graph.num_edges,
            "class_nodes": np.bincount(surrogate.labels, minlength=num_classes).tolist(),
            "present_classes": int(np.sum(gs.present)),
        }

    outcomes = _pmap(
        lambda pair: _stage("train", client_train, pair[0], surrogate, pair[1], cfg, master_seed),
        list(zip(clients, summaries)),
        cfg.threads,
    )
    client_rows = []
    for cg, summ, out in zip(clients, summaries, outcomes):
        client_rows.append({
            "client_id": cg.client_id,
            "num_nodes": cg.num_nodes,
            "num_train": int(cg.train_mask.sum()),
            "hre_nodes": len(summ.hre_nodes),
            **out.metrics,
            "upload_bytes": sum(log.uploads.get(cg.client_id, [])),
            "download_bytes": sum(log.downloads.get(cg.client_id, [])),
            "stage1_loss": [r["loss"] for r in out.result.stage1_history],
            "stage2_loss": [r["loss"] for r in out.result.stage2_history],
        })
    weights = np.array([r["num_test"] for r in client_rows], dtype=np.float64)
    record = {
        "seed": master_seed,
        "derived_seeds": {
            "masks": derive_seed(master_seed, "masks"),
            "gen": derive_seed(master_seed, "gen"),
        },
        "clients": client_rows,
        "surrogate": surrogate_info,
        "seconds": time.perf_counter() - t0,
    }
    for key in ("accuracy", "f1_macro", "f1_macro_local"):
        record[key] = float(np.average([r[key] for r in client_rows], weights=weights))
    record["_outcomes"] = outcomes
    record["_summaries"] = summaries
    return record


@dataclass
class RunReport:
    config: dict
    runs: list[dict]
    summary: dict
    communication: dict
    seed_scheme: str = SEED_SCHEME

    def to_dict(self) -> dict:
        runs = [{k: v for k, v in r.items() if not k.startswith("_")} for r in self.runs]
        return {
            "config": self.config,
            "seed_scheme": self.seed_scheme,
            "summary": self.summary,
            "communication": self.communication,
            "runs": runs,
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    def write_csv(self, path) -> None:
        fields = ["seed", "client_id", "num_nodes", "num_test", "accuracy", "f1_macro",
                  "f1_macro_local", "upload_bytes", "download_bytes"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            for run in self.runs:
                for row in run["clients"]:
                    writer.writerow({"seed": run["seed"], **{k: row[k] for k in fields[1:]}})

    def metrics(self) -> dict:
        """Metric fields only (used to compare runs for equality)."""
        return {
            "summary": self.summary,
            "runs": [
                [{k: r[k] for k in ("client_id", "accuracy", "f1_macro", "f1_macro_local")}
                 for r in run["clients"]]
                for run in self.runs
            ],
        }


def partition_dataset(bundle: DatasetBundle, cfg: FederationConfig) -> list[ClientGraph]:
    return _stage("partition", label_imbalance_split, bundle, cfg.num_clients, cfg.partition_seed)


def run_one_shot(cfg: FederationConfig, bundle: DatasetBundle | None = None,
                 clients: list[ClientGraph] | None = None) -> RunReport:
    if clients is None:
        if bundle is None:
            bundle = _stage("load", load_bundle, cfg.dataset)
        clients = partition_dataset(bundle, cfg)
    runs = [run_seed(clients, cfg, s) for s in cfg.seeds]
    summary = {}
    for key in ("accuracy", "f1_macro", "f1_macro_local"):
        vals = np.array([r[key] for r in runs])
        summary[f"{key}_mean"] = float(vals.mean())
        summary[f"{key}_std"] = float(vals.std())
    f = clients[0].feature_dim
    layout = layout_size(clients[0].num_classes, f * (cfg.stats.prop_depth + 1))
    first = runs[0]["clients"]
    communication = {
        "layout_length": layout,
        "upload_bytes_per_client": (16 + 8 * layout) if cfg.method == "opfgl" else 0,
        "download_bytes_per_client": first[0]["download_bytes"],
        "rounds": 1 if cfg.method == "opfgl" else 0,
    }
    return RunReport(config=to_dict(cfg), runs=runs, summary=summary, communication=communication)
