"""Run directories: training, multi-seed aggregation, re-evaluation and exports.

A run directory holds ``config.txt``, ``split.json``, ``params.bin``,
``history.csv`` and ``report.json``.  Multi-seed runs put one such directory
per seed under ``seed_<k>/`` and write ``aggregate.json`` at the top.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import io
from .config import RunConfig
from .data import Dataset, SplitMask, load_csv, metric_name, random_split, scaffold_split
from .fingerprint import ecfp, fingerprint_matrix
from .gsl import anchor_dense_adjacency, build_msg_sparse
from .training import FitResult, evaluate_model, fit, restore

log = logging.getLogger(__name__)

CONFIG_FILE = "config.txt"
SPLIT_FILE = "split.json"
PARAMS_FILE = "params.bin"
HISTORY_FILE = "history.csv"
REPORT_FILE = "report.json"
AGGREGATE_FILE = "aggregate.json"


def load_dataset(cfg: RunConfig) -> Dataset:
    return load_csv(cfg.data, cfg.smiles_column, cfg.label_columns or None, cfg.task or None,
                    cfg.ignore_stereo, cfg.name or None)


def make_split(dataset: Dataset, cfg: RunConfig, seed: int) -> SplitMask:
    if cfg.split == "random":
        return random_split(len(dataset), seed=seed)
    return scaffold_split(dataset, seed=seed)


def effective_mu(cfg: RunConfig) -> float:
    return 0.0 if cfg.variant in ("no-gsl-loss", "not-any", "only-a0") else cfg.gsl_coff


def build_report(result: FitResult, cfg: RunConfig, seconds: float) -> dict:
    ds = result.context.dataset
    split = result.context.split
    return {
        "dataset": ds.name,
        "task": ds.task,
        "metric": metric_name(ds.task),
        "seed": result.seed,
        "variant": cfg.variant,
        "gsl_coff_effective": effective_mu(cfg),
        "anchors": cfg.anchors,
        "n_molecules": len(ds),
        "n_dropped": ds.n_dropped,
        "split_sizes": {"train": len(split.train), "valid": len(split.valid), "test": len(split.test)},
        "best_epoch": result.best_epoch,
        "epochs": len(result.history),
        "metrics": result.evaluation.metrics,
        "test_metric": result.evaluation.metrics["test"],
        "seconds": seconds,
    }


def train_one(cfg: RunConfig, seed: int, out_dir, dataset: Dataset | None = None,
              split: SplitMask | None = None) -> dict:
    """Train with one seed and write a complete run directory; returns the report."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = dataset if dataset is not None else load_dataset(cfg)
    split = split if split is not None else make_split(dataset, cfg, seed)
    cfg = cfg.replace(seeds=[seed])
    cfg.save(out / CONFIG_FILE)
    split.save(out / SPLIT_FILE)
    t0 = time.perf_counter()
    result = fit(dataset, cfg, split, seed)
    seconds = time.perf_counter() - t0
    io.save_params(out / PARAMS_FILE, {**result.model.state_dict(), **result.buffers()})
    io.write_history(out / HISTORY_FILE, result.history)
    report = build_report(result, cfg, seconds)
    io.write_json(out / REPORT_FILE, report)
    return report


def _train_job(args):
    cfg, seed, out_dir, split_path = args
    split = SplitMask.load(split_path) if split_path else None
    return train_one(cfg, seed, out_dir, split=split)


def aggregate(reports: list[dict]) -> dict:
    """Mean and population standard deviation of every metric across seeds."""
    out = {"seeds": [r["seed"] for r in reports], "metric": reports[0]["metric"],
           "variant": reports[0]["variant"], "dataset": reports[0]["dataset"]}
    for part in ("train", "valid", "test"):
        vals = np.array([r["metrics"][part] for r in reports], dtype=np.float64)
        out[part] = {"mean": float(vals.mean()), "std": float(vals.std()), "values": vals.tolist()}
    return out


def train(cfg: RunConfig, out_dir, split_path=None, parallel: bool = False) -> dict:
    """Train every seed in ``cfg.seeds``.  Returns the single report or the aggregate."""
    out = Path(out_dir)
    seeds = list(cfg.seeds)
    if len(seeds) == 1:
        split = SplitMask.load(split_path) if split_path else None
        return train_one(cfg, seeds[0], out, split=split)
    jobs = [(cfg, s, out / f"seed_{s}", split_path) for s in seeds]
    if parallel:
        with ProcessPoolExecutor(max_workers=len(jobs)) as pool:
            reports = list(pool.map(_train_job, jobs))
    else:
        reports = [_train_job(j) for j in jobs]
    agg = aggregate(reports)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / CONFIG_FILE)
    io.write_json(out / AGGREGATE_FILE, agg)
    return agg


# ---------------------------------------------------------------- re-loading

def run_dirs(path) -> list[Path]:
    """The run directory itself, or its ``seed_*`` children for multi-seed runs."""
    path = Path(path)
    if (path / PARAMS_FILE).exists():
        return [path]
    subs = sorted(p for p in path.glob("seed_*") if (p / PARAMS_FILE).exists())
    if not subs:
        raise FileNotFoundError(f"no {PARAMS_FILE} under {path}")
    return subs


def load_run(run_dir, params_path=None, split_path=None, data_path=None, cfg: RunConfig | None = None):
    run_dir = Path(run_dir) if run_dir else None
    params_path = Path(params_path) if params_path else run_dir / PARAMS_FILE
    base = params_path.parent
    if cfg is None:
        cfg = RunConfig.from_file(base / CONFIG_FILE)
    if data_path:
        cfg = cfg.replace(data=str(data_path))
    split_path = Path(split_path) if split_path else base / SPLIT_FILE
    split = SplitMask.load(split_path)
    dataset = load_dataset(cfg)
    state = io.load_params(params_path)
    model, ctx = restore(dataset, cfg, split, state)
    return cfg, model, ctx


def evaluate(run_dir=None, params_path=None, split_path=None, data_path=None,
             cfg: RunConfig | None = None) -> dict:
    cfg, model, ctx = load_run(run_dir, params_path, split_path, data_path, cfg)
    ev = evaluate_model(model, ctx, cfg)
    return {"dataset": ctx.dataset.name, "task": ctx.dataset.task, "metric": metric_name(ctx.dataset.task),
            "metrics": ev.metrics, "test_metric": ev.metrics["test"]}


def export_embeddings(run_dir, out_path):
    cfg, model, ctx = load_run(run_dir)
    ev = evaluate_model(model, ctx, cfg)
    io.write_matrix(out_path, ev.embeddings)
    return ev.embeddings.shape


def export_graph(run_dir, out_path, min_weight: float = 0.0):
    """Upper-triangle edges of the final fused adjacency with weight > ``min_weight``."""
    cfg, model, ctx = load_run(run_dir)
    ev = evaluate_model(model, ctx, cfg, keep_graph=True)
    if ev.a_tilde is not None:
        a = ev.a_tilde
    elif ev.anchor_state is not None:
        a = anchor_dense_adjacency(ev.anchor_state, ctx.a0, model.gsl)
    elif cfg.variant == "only-a0":
        a = ctx.a0.toarray() if sp.issparse(ctx.a0) else ctx.a0
    else:
        raise ValueError(f"variant {cfg.variant!r} has no molecule graph to export")
    i, j = np.triu_indices(a.shape[0], k=1)
    w = a[i, j]
    keep = w > min_weight
    io.write_edges(out_path, i[keep], j[keep], w[keep])
    return int(keep.sum())


def fingerprint_edges(dataset: Dataset, tc_epsilon: float, radius: int = 2, n_bits: int = 2048):
    """Pairs i < j with Tanimoto similarity > 0 and >= ``tc_epsilon``."""
    fps = fingerprint_matrix([ecfp(g, radius, n_bits) for g in dataset.graphs])
    a = sp.triu(build_msg_sparse(fps, tc_epsilon), k=1).tocoo()
    order = np.lexsort((a.col, a.row))
    return a.row[order], a.col[order], a.data[order]
