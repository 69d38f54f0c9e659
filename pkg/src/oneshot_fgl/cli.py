"""Command-line front end.

Every subcommand writes ``manifest.json`` into its output directory holding the
resolved configuration and git-style blob hashes of its inputs.  Exit status is
0 on success, 2 for configuration errors and 1 for runtime failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bundle_io import (
    bundle_from_files, convert_edge_list, convert_linqs, load_bundle, save_bundle,
)
from .config import ConfigError, FederationConfig, load_config, to_dict
from .federation import (
    StageError, client_summary, client_train, derive_seed, evaluate_metrics,
    partition_dataset, run_one_shot, surrogate_payload,
)
from .gnn import load_checkpoint, predict, save_checkpoint
from .graph import ClientGraph, normalized_adjacency
from .secure_agg import (
    FixedPointCodec, GlobalStats, MaskedUpload, aggregate_unmask, build_masked_upload,
    deal_seeds, pooled_stats, stats_vector,
)


def git_blob_sha1(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def hash_inputs(paths) -> dict[str, str]:
    out = {}
    for p in paths:
        if p is None:
            continue
        p = Path(p)
        files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
        for q in files:
            out[str(q)] = git_blob_sha1(q.read_bytes())
    return out


def write_manifest(out: Path, command: str, cfg: FederationConfig | None, inputs) -> None:
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "version": __version__,
        "config": to_dict(cfg) if cfg is not None else None,
        "inputs": hash_inputs(inputs),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def _resolve_config(args) -> FederationConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seeds=[{args.seed}]")
    if getattr(args, "threads", None) is not None:
        overrides.append(f"threads={args.threads}")
    if getattr(args, "mode", None):
        overrides.append(f"mode={args.mode.replace('-', '_')}")
    if getattr(args, "ablation", None):
        ablation = {"ft": "ft_only", "fixed-gamma": "fixed_gamma"}.get(args.ablation, args.ablation)
        overrides.append(f"personalize.ablation={ablation}")
    if getattr(args, "method", None):
        overrides.append(f"method={args.method}")
    if getattr(args, "clients", None) is not None:
        overrides.append(f"num_clients={args.clients}")
    if getattr(args, "dataset", None):
        overrides.append(f"dataset={json.dumps(str(Path(args.dataset).resolve()))}")
    return load_config(args.config, overrides)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _client_dirs(root) -> list[Path]:
    dirs = sorted(Path(root).glob("client_*"), key=lambda p: int(p.name.split("_")[1]))
    if not dirs:
        raise FileNotFoundError(f"no client_* directories under {root}")
    return dirs


def _load_client(path: Path) -> ClientGraph:
    bundle = load_bundle(path)
    ids_file = path / "global_ids.tsv"
    ids = None
    if ids_file.is_file():
        ids = np.array(ids_file.read_text().split(), dtype=np.int64)
    return ClientGraph.from_bundle(bundle, int(path.name.split("_")[1]), ids)


def _single_seed(cfg: FederationConfig) -> int:
    return int(cfg.seeds[0])


# -- subcommands --------------------------------------------------------------


def cmd_partition(args) -> None:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    clients = partition_dataset(load_bundle(cfg.dataset), cfg)
    for cg in clients:
        d = out / f"client_{cg.client_id}"
        save_bundle(cg.to_bundle(), d)
        (d / "global_ids.tsv").write_text("".join(f"{i}\n" for i in cg.global_node_ids))
    write_manifest(out, "partition", cfg, [cfg.dataset])
    print(f"wrote {len(clients)} client bundles to {out}")


def cmd_stats(args) -> None:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    clients = [_load_client(d) for d in _client_dirs(args.clients_dir)]
    seed = _single_seed(cfg)
    codec = FixedPointCodec(cfg.codec.scale_bits, cfg.codec.modulus_bits, len(clients))
    seeds = deal_seeds(len(clients), derive_seed(seed, "masks"))
    for cg in clients:
        summ = client_summary(cg, cfg)
        upload, personal = build_masked_upload(stats_vector(summ.stats), cg.client_id, seeds, codec)
        upload.save(out / f"upload_{cg.client_id}.bin")
        (out / f"mask_{cg.client_id}.bin").write_bytes(personal.astype("<u8").tobytes())
    layout = {"num_classes": clients[0].num_classes,
              "dim": clients[0].feature_dim * (cfg.stats.prop_depth + 1)}
    (out / "layout.json").write_text(json.dumps(layout) + "\n", encoding="utf-8")
    write_manifest(out, "stats", cfg, [args.clients_dir])
    print(f"wrote {len(clients)} masked uploads to {out}")


def cmd_aggregate(args) -> None:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    up_dir = Path(args.uploads)
    files = sorted(up_dir.glob("upload_*.bin"), key=lambda p: int(p.stem.split("_")[1]))
    if not files:
        raise FileNotFoundError(f"no upload_*.bin under {up_dir}")
    uploads = [MaskedUpload.load(p) for p in files]
    masks = []
    for up in uploads:
        mp = up_dir / f"mask_{up.client_id}.bin"
        masks.append(np.frombuffer(mp.read_bytes(), dtype="<u8").astype(np.uint64)
                     if mp.is_file() else None)
    codec = FixedPointCodec(cfg.codec.scale_bits, cfg.codec.modulus_bits, len(uploads))
    summed = aggregate_unmask(uploads, masks, codec)
    layout_file = up_dir / "layout.json"
    layout = json.loads(layout_file.read_text()) if layout_file.is_file() else {}
    num_classes = args.num_classes or layout.get("num_classes")
    dim = args.dim or layout.get("dim")
    if num_classes is None or dim is None:
        raise ConfigError("aggregate needs layout.json beside the uploads or --num-classes/--dim")
    gs = pooled_stats(summed, num_classes, dim, cfg.pooling)
    (out / "global_stats.bin").write_bytes(gs.to_bytes())
    (out / "global_stats.json").write_text(json.dumps(gs.to_dict(), indent=2) + "\n")
    write_manifest(out, "aggregate", cfg, [up_dir])
    print(f"aggregated {len(uploads)} uploads into {out / 'global_stats.bin'}")


def cmd_gen_surrogate(args) -> None:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    gs = GlobalStats.from_bytes(Path(args.stats).read_bytes())
    files = surrogate_payload(gs, cfg, derive_seed(_single_seed(cfg), "gen"))
    for name, payload in files.items():
        (out / name).write_bytes(payload)
    write_manifest(out, "gen-surrogate", cfg, [args.stats])
    print(f"wrote surrogate bundle to {out}")


def _surrogate_bundle(path):
    if path is None:
        return None
    path = Path(path)
    return bundle_from_files({p.name: p.read_bytes() for p in path.iterdir() if p.is_file()})


def cmd_train(args) -> None:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    seed = _single_seed(cfg)
    surrogate = _surrogate_bundle(args.surrogate) if cfg.method == "opfgl" else None
    if cfg.method == "opfgl" and surrogate is None:
        raise ConfigError("train with method opfgl needs --surrogate")
    rows = []
    for d in _client_dirs(args.clients_dir):
        cg = _load_client(d)
        outcome = client_train(cg, surrogate, client_summary(cg, cfg), cfg, seed)
        save_checkpoint(outcome.model, out / f"model_{cg.client_id}")
        rows.append({"client_id": cg.client_id, **outcome.metrics})
    _write_metrics(out, rows)
    write_manifest(out, "train", cfg, [args.clients_dir, args.surrogate])
    print(json.dumps(_weighted(rows), indent=2))


def cmd_eval(args) -> None:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    rows = []
    for d in _client_dirs(args.clients_dir):
        cg = _load_client(d)
        model = load_checkpoint(Path(args.checkpoints) / f"model_{cg.client_id}")
        preds = predict(model, normalized_adjacency(cg.graph), cg.features)
        rows.append({"client_id": cg.client_id,
                     **evaluate_metrics(preds, cg.labels, cg.test_mask, cg.num_classes)})
    _write_metrics(out, rows)
    write_manifest(out, "eval", cfg, [args.clients_dir, args.checkpoints])
    print(json.dumps(_weighted(rows), indent=2))


def _weighted(rows) -> dict:
    w = np.array([r["num_test"] for r in rows], dtype=np.float64)
    return {k: float(np.average([r[k] for r in rows], weights=w))
            for k in ("accuracy", "f1_macro", "f1_macro_local")}


def _write_metrics(out: Path, rows) -> None:
    payload = {"clients": rows, **_weighted(rows)}
    (out / "metrics.json").write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def cmd_run(args) -> None:
    cfg = _resolve_config(args)
    if not cfg.dataset:
        raise ConfigError("config must name a dataset", "dataset")
    out = _out_dir(args)
    report = run_one_shot(cfg)
    report.write_json(out / "report.json")
    report.write_csv(out / "report.csv")
    write_manifest(out, "run", cfg, [cfg.dataset, args.config])
    print(json.dumps(report.summary, indent=2))


def cmd_convert(args) -> None:
    out = _out_dir(args)
    if args.linqs_content:
        bundle = convert_linqs(args.linqs_content, args.linqs_cites, name=args.name,
                               seed=args.split_seed)
        inputs = [args.linqs_content, args.linqs_cites]
    else:
        if not (args.edges and args.features and args.labels):
            raise ConfigError("convert needs --edges, --features and --labels (or --linqs-*)")
        bundle = convert_edge_list(args.edges, args.features, args.labels, name=args.name,
                                   splits_path=args.splits, seed=args.split_seed)
        inputs = [args.edges, args.features, args.labels, args.splits]
    save_bundle(bundle, out)
    write_manifest(out, "convert", None, inputs)
    print(f"wrote bundle {bundle.name!r} ({bundle.num_nodes} nodes, "
          f"{bundle.graph.num_edges} edges) to {out}")


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ofgl", description="One-shot personalised federated graph learning")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=False):
        p.add_argument("--config", required=config_required, help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted config override, repeatable")
        p.add_argument("--seed", type=int, help="master seed (replaces config seeds)")
        p.add_argument("--threads", type=int, help="worker threads (0 = all cores)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--mode", choices=["server-gen", "client-gen"])
        p.add_argument("--ablation", choices=["full", "ft", "fixed-gamma"])
        p.add_argument("--method", choices=["opfgl", "standalone"])

    p = sub.add_parser("partition", help="split a dataset bundle into client bundles")
    common(p)
    p.add_argument("--dataset")
    p.add_argument("--clients", type=int)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("stats", help="client statistics and masked uploads")
    common(p)
    p.add_argument("--clients-dir", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("aggregate", help="unmask uploads and pool global statistics")
    common(p)
    p.add_argument("--uploads", required=True)
    p.add_argument("--num-classes", type=int)
    p.add_argument("--dim", type=int, help="propagated feature dimension (h+1)*f")
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("gen-surrogate", help="generate the surrogate bundle")
    common(p)
    p.add_argument("--stats", required=True, help="global_stats.bin")
    p.set_defaults(func=cmd_gen_surrogate)

    p = sub.add_parser("train", help="two-stage personalised training per client")
    common(p)
    p.add_argument("--clients-dir", required=True)
    p.add_argument("--surrogate")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="recompute metrics from checkpoints")
    common(p)
    p.add_argument("--clients-dir", required=True)
    p.add_argument("--checkpoints", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run", help="complete one-shot federation")
    common(p, config_required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("convert", help="build a dataset bundle from raw files")
    p.add_argument("--out", required=True)
    p.add_argument("--name", default="dataset")
    p.add_argument("--edges")
    p.add_argument("--features")
    p.add_argument("--labels")
    p.add_argument("--splits")
    p.add_argument("--linqs-content")
    p.add_argument("--linqs-cites")
    p.add_argument("--split-seed", type=int, default=0)
    p.set_defaults(func=cmd_convert)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: [{args.command}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
