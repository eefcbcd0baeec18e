"""Run orchestration: single runs, multi-seed execution, sweeps, CSV output.

Output bytes are a pure function of the config and seed list: rows are
assembled in (value, seed, step) order regardless of worker scheduling, and
floats print with 6 significant digits. Checkpoints land next to the CSV.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from ._runtime import enable_arena_reuse
from .config import (RunConfig, config_with, default_run_id, resolve_beta,
                     resolve_delta_t, resolve_growth, resolve_t_end)
from .data import BiasedDatasetSpec, build_dataset
from .losses import GroupWeights
from .metrics import count_flops
from .models import build_simple_cnn, save_checkpoint, simple_cnn_spec
from .optim import TrainingAborted
from .sparsity import TopologySchedule, allocate_density
from .trainers import (MrmConfig, TrainLoopConfig, train_erm, train_mrm,
                       train_rest, train_sparse_unweighted)

CSV_COLUMNS = ["run_id", "method", "seed", "step", "density", "conflict_ratio",
               "beta", "train_loss", "overall_acc", "unbiased_acc",
               "conflicting_acc", "worst_group_acc", "params_active",
               "cumulative_train_flops"]

SWEEP_COLUMNS = ["method", "axis", "value", "n_seeds",
                 "unbiased_mean", "unbiased_std",
                 "conflicting_mean", "conflicting_std",
                 "worst_group_mean", "worst_group_std",
                 "train_loss_mean", "params_active", "cumulative_train_flops"]


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def write_csv(path, columns, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(",".join(columns) + "\n")
        for row in rows:
            f.write(",".join(_fmt(row[c]) for c in columns) + "\n")


def dataset_spec(cfg: RunConfig) -> BiasedDatasetSpec:
    return BiasedDatasetSpec(source=cfg.source, n_train=cfg.n_train,
                             n_test=cfg.n_test, conflict_ratio=cfg.conflict_ratio,
                             seed=cfg.data_seed, idx_dir=cfg.idx_dir or None)


@dataclass
class SeedResult:
    seed: int
    rows: list
    model: object
    masks: dict


def execute_seed(cfg: RunConfig, seed: int, data=None) -> SeedResult:
    """Train one seed of a configured run and return its metric rows."""
    enable_arena_reuse()
    if data is None:
        data = build_dataset(dataset_spec(cfg))
    train_set, test_set = data

    loop = TrainLoopConfig(total_steps=cfg.steps, batch_size=cfg.batch,
                           lr=cfg.lr, weight_decay=cfg.wd,
                           eval_every=cfg.eval_every or None, seed=seed)
    model = build_simple_cnn(num_classes=10, seed=seed)
    beta = resolve_beta(cfg)
    states = None

    if cfg.method in ("erm", "erm_rw"):
        weights = GroupWeights(beta) if cfg.method == "erm_rw" else None
        model, records = train_erm(model, train_set, test_set, loop, weights)
    elif cfg.method in ("set", "rigl", "rest"):
        alloc = allocate_density(
            [(n, p.data.shape) for n, p in model.sparsifiable()],
            cfg.allocation, cfg.density)
        sched = TopologySchedule(r0=cfg.r0, delta_t=resolve_delta_t(cfg),
                                 t_end=resolve_t_end(cfg),
                                 growth=resolve_growth(cfg))
        if cfg.method == "rest":
            model, records, states = train_rest(
                model, train_set, test_set, loop, alloc, sched, GroupWeights(beta))
        else:
            model, records, states = train_sparse_unweighted(
                model, train_set, test_set, loop, alloc, sched)
    elif cfg.method == "mrm":
        mrm = MrmConfig(n1_pretrain_steps=cfg.mrm_pretrain_steps,
                        n2_probe_steps=cfg.mrm_probe_steps,
                        alpha=cfg.mrm_alpha, rounds=cfg.mrm_rounds)
        model, records, states = train_mrm(model, train_set, test_set, loop, mrm)
    else:
        raise ValueError(f"unknown method {cfg.method!r}")

    spec = simple_cnn_spec()
    weights_total = sum(int(np.prod(p.data.shape)) for _, p in model.sparsifiable())
    params_total = count_flops(spec, train_set.images.shape[1:]).params_total
    other_params = params_total - weights_total

    run_id = default_run_id(cfg)
    rows = []
    for rec in records:
        sparse_active = rec.params_active - other_params
        density = sparse_active / weights_total if cfg.method != "erm" else 1.0
        rows.append({
            "run_id": run_id, "method": cfg.method, "seed": seed,
            "step": rec.step,
            "density": density if cfg.method in ("set", "rigl", "rest", "mrm") else 1.0,
            "conflict_ratio": cfg.conflict_ratio, "beta": beta,
            "train_loss": rec.train_loss,
            "overall_acc": rec.report.overall_acc,
            "unbiased_acc": rec.report.unbiased_acc,
            "conflicting_acc": rec.report.conflicting_acc,
            "worst_group_acc": rec.report.worst_group_acc,
            "params_active": rec.params_active,
            "cumulative_train_flops": rec.cumulative_train_flops,
        })
    masks = {st.name: st.mask for st in states} if states else {}
    return SeedResult(seed=seed, rows=rows, model=model, masks=masks)


def _seed_job(args):
    cfg, seed = args
    res = execute_seed(cfg, seed)
    # models do not cross process boundaries; persist checkpoints in-worker
    if cfg.out:
        _save_seed_checkpoint(cfg, res)
    return res.seed, res.rows


def _save_seed_checkpoint(cfg, res):
    stem, _ = os.path.splitext(cfg.out)
    save_checkpoint(res.model, f"{stem}_seed{res.seed}.ckpt", masks=res.masks)


def run(cfg: RunConfig, out_path=None, seeds=None, workers=None, plot=True):
    """Execute all seeds of a run; write CSV, checkpoints and figure.

    Returns the list of CSV row dicts. On a training abort the rows completed
    so far are written to ``<out>.partial`` and the exception propagates.
    """
    out_path = out_path or cfg.out
    if not out_path:
        raise ValueError("run needs an output path (config 'out' or --out)")
    cfg = config_with(cfg, out=out_path)
    seeds = list(seeds if seeds is not None else cfg.seeds)
    workers = _effective_workers(workers, len(seeds))

    data = None
    results = {}
    try:
        if workers <= 1:
            data = build_dataset(dataset_spec(cfg))
            for seed in seeds:
                res = execute_seed(cfg, seed, data)
                _save_seed_checkpoint(cfg, res)
                results[seed] = res.rows
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                for seed, rows in pool.map(_seed_job,
                                           [(cfg, s) for s in seeds]):
                    results[seed] = rows
    except TrainingAborted:
        rows = [r for s in sorted(results) for r in results[s]]
        write_csv(out_path + ".partial", CSV_COLUMNS, rows)
        raise

    rows = [r for s in seeds for r in results[s]]
    write_csv(out_path, CSV_COLUMNS, rows)
    if plot:
        from .plots import plot_run
        plot_run(rows, _fig_path(out_path))
    return rows


def _fig_path(csv_path):
    stem, _ = os.path.splitext(csv_path)
    return stem + ".png"


def _effective_workers(workers, n_jobs):
    if workers is None:
        workers = min(n_jobs, os.cpu_count() or 1)
    return max(1, workers)


def sweep(cfg: RunConfig, axis=None, values=None, out_path=None, seeds=None,
          workers=None, plot=True):
    """Run the config across an axis (density or conflict ratio), aggregate
    final metrics over seeds (mean and sample standard deviation), and write
    the aggregated CSV plus a per-seed series CSV and a figure."""
    axis = axis or cfg.sweep_axis
    values = values if values is not None else cfg.sweep_values
    if axis not in ("density", "ratio"):
        raise ValueError(f"sweep axis must be 'density' or 'ratio', got {axis!r}")
    if not values:
        raise ValueError("sweep needs at least one value")
    out_path = out_path or cfg.out
    if not out_path:
        raise ValueError("sweep needs an output path (config 'out' or --out)")
    seeds = list(seeds if seeds is not None else cfg.seeds)
    workers = _effective_workers(workers, len(values) * len(seeds))

    jobs = []
    for value in values:
        if axis == "density":
            sub = config_with(cfg, density=float(value), out="")
        else:
            sub = config_with(cfg, conflict_ratio=float(value), out="")
        for seed in seeds:
            jobs.append((sub, seed, value))

    results = {}
    if workers <= 1:
        cache = {}
        for sub, seed, value in jobs:
            key = (sub.conflict_ratio, sub.data_seed)
            if key not in cache:
                cache[key] = build_dataset(dataset_spec(sub))
            res = execute_seed(sub, seed, cache[key])
            results[(value, seed)] = res.rows
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            mapped = pool.map(_seed_job, [(sub, seed) for sub, seed, _ in jobs])
            for (sub, seed, value), (_, rows) in zip(jobs, mapped):
                results[(value, seed)] = rows

    all_rows = [r for (value, seed) in sorted(results) for r in results[(value, seed)]]
    agg_rows = []
    for value in values:
        finals = [results[(value, seed)][-1] for seed in seeds]
        def col(name):
            return np.array([f[name] for f in finals], dtype=float)
        agg_rows.append({
            "method": cfg.method, "axis": axis, "value": float(value),
            "n_seeds": len(seeds),
            "unbiased_mean": float(col("unbiased_acc").mean()),
            "unbiased_std": float(col("unbiased_acc").std(ddof=1)) if len(seeds) > 1 else 0.0,
            "conflicting_mean": float(col("conflicting_acc").mean()),
            "conflicting_std": float(col("conflicting_acc").std(ddof=1)) if len(seeds) > 1 else 0.0,
            "worst_group_mean": float(col("worst_group_acc").mean()),
            "worst_group_std": float(col("worst_group_acc").std(ddof=1)) if len(seeds) > 1 else 0.0,
            "train_loss_mean": float(col("train_loss").mean()),
            "params_active": int(finals[0]["params_active"]),
            "cumulative_train_flops": int(finals[0]["cumulative_train_flops"]),
        })

    write_csv(out_path, SWEEP_COLUMNS, agg_rows)
    stem, ext = os.path.splitext(out_path)
    write_csv(f"{stem}_runs{ext or '.csv'}", CSV_COLUMNS, all_rows)
    if plot:
        from .plots import plot_sweep
        plot_sweep(agg_rows, _fig_path(out_path), axis=axis)
    return agg_rows
