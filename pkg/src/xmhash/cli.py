"""Command-line pipeline: anchor graph -> joint codes -> hash functions -> evaluation.

Each stage writes its artifacts under ``--out`` together with a ``stage.json``
holding a content hash of the config sections it depends on.  A downstream
stage refuses to run when that file is missing or belongs to a different
config, so re-running one stage invalidates everything after it.

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from importlib import resources
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .anchor_graph import build_graph, learn_joint_anchors
from .config import ConfigError, PipelineConfig, load_config, validate
from .dataset import (load_dataset, read_codes, read_labels, save_dataset, split_query_database,
                      synthesize_clustered, unit_variance_normalize, write_codes, write_raw_f32)
from .hashfn import load_model, save_model, train_hash_models
from .mccsh import run_mccsh
from .retrieval import evaluate_all_tasks, evaluate_codes, relevance_from_labels

log = logging.getLogger("xmhash")

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3
STAGES = ("graph", "codes", "train", "eval")
# config sections each stage's output depends on
_DEPENDS = {
    "graph": ("data", "split", "graph"),
    "codes": ("data", "split", "graph", "mccsh"),
    "train": ("data", "split", "graph", "mccsh", "stage2", "model"),
}
_DIRS = {"graph": "graph", "codes": "codes", "train": "models"}


class StageError(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage


# ------------------------------------------------------------------ helpers


def bundled_config(name="synthetic") -> Path:
    return Path(str(resources.files("xmhash") / "configs" / f"{name}.toml"))


def _resolve_config_path(arg):
    if arg is None:
        return None
    p = Path(arg)
    if p.exists():
        return p
    bundled = bundled_config(arg)
    if bundled.exists():
        return bundled
    raise ConfigError(f"config file not found: {arg}")


def _stage_key(cfg: PipelineConfig, stage) -> str:
    return cfg.section_hash(*_DEPENDS[stage])


def _mark(out: Path, stage, cfg):
    (out / _DIRS[stage] / "stage.json").write_text(json.dumps({"stage": stage, "key": _stage_key(cfg, stage)}))


def _require(out: Path, stage, cfg, needed_by):
    marker = out / _DIRS[stage] / "stage.json"
    if not marker.exists():
        raise StageError(needed_by, f"missing {stage} artifacts in {out}; run {stage} first")
    if json.loads(marker.read_text()).get("key") != _stage_key(cfg, stage):
        raise StageError(needed_by, f"{stage} artifacts in {out} were made with a different config; "
                                    f"run {stage} first")


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_manifest(out: Path, cfg: PipelineConfig, command):
    _write_json(out / "run_manifest.json", {
        "command": command, "version": __version__, "seed": cfg.seed, "config": cfg.to_dict(),
    })


def prepare_data(cfg: PipelineConfig):
    """Load or synthesize, normalize, and split into (query, database) datasets."""
    d = cfg.data
    if d.paths:
        ds = load_dataset(d.paths, d.format, d.labels)
        validate(cfg, n_instances=ds.n_instances)
    else:
        s = d.synth
        ds = synthesize_clustered(s.n_clusters, s.per_cluster, s.dims, s.spread, cfg.seed,
                                  separation=s.separation, elongation=s.elongation)
    if d.normalize:
        ds = unit_variance_normalize(ds)
    q, db = split_query_database(ds.n_instances, cfg.split.query_fraction, cfg.seed)
    return ds.subset(q), ds.subset(db)


# ------------------------------------------------------------------- stages


def stage_graph(cfg: PipelineConfig, out: Path, data=None):
    _, db = data or prepare_data(cfg)
    g = cfg.graph
    anchors = learn_joint_anchors(db, g.P, seed=cfg.seed, max_iters=g.kmeans_iters)
    graph = build_graph(db, anchors, g.k, g.k_a, g.sigma, g.sigma_anchor)
    d = out / "graph"
    d.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for m, mg in enumerate(graph.modalities):
        arrays[f"lap_{m}"] = mg.Lap
        arrays[f"Z_{m}"] = mg.Z
        arrays[f"S_{m}"] = mg.S
        arrays[f"anchors_{m}"] = anchors.anchors[m]
    np.savez(d / "graph.npz", **arrays)
    _mark(out, "graph", cfg)
    return graph


def load_laplacians(out: Path) -> list:
    with np.load(out / "graph" / "graph.npz") as f:
        n = sum(1 for k in f.files if k.startswith("lap_"))
        return [f[f"lap_{m}"] for m in range(n)]


def stage_codes(cfg: PipelineConfig, out: Path):
    _require(out, "graph", cfg, "codes")
    codes, Ys = run_mccsh(load_laplacians(out), cfg.mccsh)
    d = out / "codes"
    d.mkdir(parents=True, exist_ok=True)
    write_codes(d / "codes.txt", codes.B)
    write_raw_f32(d / "B_relaxed.f32", codes.B_relaxed)
    np.savez(d / "embeddings.npz", **{f"Y_{m}": Y for m, Y in enumerate(Ys)})
    M = len(Ys)
    with open(d / "objective_trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "J_total", *[f"J_{m}" for m in range(M)], "epm_iters",
                    "al_residual_max", "surrogate"])
        for i, (jt, per, ep, res, sur) in enumerate(zip(codes.objective_trace, codes.per_modality_trace,
                                                         codes.epm_iterations, codes.al_residuals,
                                                         codes.surrogate_trace)):
            w.writerow([i, repr(jt), *[repr(j) for j in per], ep, repr(max(res)), repr(sur)])
    for msg in codes.warnings:
        log.warning("codes: %s", msg)
    _mark(out, "codes", cfg)
    return codes


def stage_train(cfg: PipelineConfig, out: Path, data=None):
    _require(out, "codes", cfg, "train")
    _, db = data or prepare_data(cfg)
    B = read_codes(out / "codes" / "codes.txt")
    if B.shape[0] != db.n_instances:
        raise StageError("train", f"codes have {B.shape[0]} rows but the database has {db.n_instances}")
    result = train_hash_models(db.modalities, B, cfg.hidden, cfg.stage2)
    d = out / "models"
    d.mkdir(parents=True, exist_ok=True)
    for m, model in enumerate(result.models):
        # evaluation always goes through the saved float32 parameters
        model.round_to_f32()
        save_model(d / f"model_{m}.bin", model)
    with open(d / "loss_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(result.loss_curve):
            w.writerow([i, repr(v)])
    _mark(out, "train", cfg)
    return result


def _write_metrics(out: Path, results, L):
    d = out / "eval"
    d.mkdir(parents=True, exist_ok=True)
    _write_json(d / "metrics.json", [r.to_dict() for r in results])
    with open(d / "plot_data.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["code_length", "task", "map", "prec_at_r2"])
        for r in results:
            w.writerow([L, r.task, repr(r.map), repr(r.prec_at_r2)])


def stage_eval(cfg: PipelineConfig, out: Path, data=None):
    _require(out, "train", cfg, "eval")
    dq, db = data or prepare_data(cfg)
    models = [load_model(out / "models" / f"model_{m}.bin") for m in range(db.n_modalities)]
    names = tuple(f"m{m}" for m in range(db.n_modalities))
    dq = type(dq)(dq.modalities, dq.labels, names)
    results = evaluate_all_tasks(models, dq, db, cfg.eval.radius, cfg.eval.top_k)
    _write_metrics(out, results, cfg.mccsh.L)
    return results


def eval_code_files(query_codes, db_codes, query_labels, db_labels, out: Path, radius=2, top_k=None):
    """Evaluate precomputed code files (e.g. hand-crafted) against label files."""
    qc, dc = read_codes(query_codes), read_codes(db_codes)
    ql, dl = read_labels(query_labels), read_labels(db_labels)
    C = max(ql.shape[1], dl.shape[1])
    ql = np.pad(ql, ((0, 0), (0, C - ql.shape[1])))
    dl = np.pad(dl, ((0, 0), (0, C - dl.shape[1])))
    if len(qc) != len(ql) or len(dc) != len(dl):
        raise StageError("eval", "code and label files differ in row count")
    res = evaluate_codes(qc, dc, relevance_from_labels(ql, dl), radius, top_k, names=("query", "database"))
    _write_metrics(out, [res], qc.shape[1])
    return [res]


def run_pipeline(cfg: PipelineConfig, out) -> list:
    """Run all stages in order; returns the retrieval results."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, cfg, "run")
    data = _guard("data", prepare_data, cfg)
    _guard("graph", stage_graph, cfg, out, data)
    _guard("codes", stage_codes, cfg, out)
    _guard("train", stage_train, cfg, out, data)
    return _guard("eval", stage_eval, cfg, out, data)


def _guard(stage, fn, *args):
    try:
        return fn(*args)
    except (StageError, ConfigError):
        raise
    except (ValueError, RuntimeError, OSError, KeyError) as exc:
        raise StageError(stage, str(exc)) from exc


# ---------------------------------------------------------------------- CLI


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file, or the name of a bundled config (e.g. 'synthetic')")
    common.add_argument("--out", default="xmhash_out", help="output directory (default: %(default)s)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--threads", type=int, help="cap BLAS/OpenMP threads")
    common.add_argument("--desk-scale", action="store_true", help="small-N preset (P=32 anchors)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="xmhash", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="run every stage")
    sp = sub.add_parser("synth", parents=[common], help="write the configured synthetic fixture")
    sp.add_argument("--format", choices=("csv", "raw-f32"), default="csv")
    sub.add_parser("graph", parents=[common], help="build anchor graphs")
    sub.add_parser("codes", parents=[common], help="learn joint binary codes from the graph")
    sub.add_parser("train", parents=[common], help="train hash functions on the codes")
    ep = sub.add_parser("eval", parents=[common], help="evaluate trained models or code files")
    ep.add_argument("--query-codes")
    ep.add_argument("--db-codes")
    ep.add_argument("--query-labels")
    ep.add_argument("--db-labels")
    return p


def _dispatch(args, cfg, out):
    if args.command == "run":
        results = run_pipeline(cfg, out)
        for r in results:
            print(f"{r.task}\tmAP={r.map:.4f}\tPrec@R<={cfg.eval.radius}={r.prec_at_r2:.4f}")
        return
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, cfg, args.command)
    if args.command == "synth":
        s = cfg.data.synth
        ds = _guard("synth", lambda: synthesize_clustered(
            s.n_clusters, s.per_cluster, s.dims, s.spread, cfg.seed,
            separation=s.separation, elongation=s.elongation))
        paths = save_dataset(ds, out / "data", args.format)
        print("\n".join(str(p) for p in paths + [out / "data" / "labels.csv"]))
    elif args.command == "graph":
        _guard("graph", stage_graph, cfg, out)
    elif args.command == "codes":
        _guard("codes", stage_codes, cfg, out)
    elif args.command == "train":
        _guard("train", stage_train, cfg, out)
    elif args.command == "eval":
        files = [args.query_codes, args.db_codes, args.query_labels, args.db_labels]
        if any(files):
            if not all(files):
                raise ConfigError("--query-codes, --db-codes, --query-labels and --db-labels go together")
            results = _guard("eval", eval_code_files, *files, out, cfg.eval.radius, cfg.eval.top_k)
        else:
            results = _guard("eval", stage_eval, cfg, out)
        for r in results:
            print(f"{r.task}\tmAP={r.map:.4f}\tPrec@R<={cfg.eval.radius}={r.prec_at_r2:.4f}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(_resolve_config_path(args.config), desk_scale=args.desk_scale, seed=args.seed)
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be >= 1")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    try:
        with threadpool_limits(limits=args.threads):
            _dispatch(args, cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
