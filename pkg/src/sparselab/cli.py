"""Command-line front end.

Verbs:
  run       train every seed of a configured experiment, write metrics CSV,
            final checkpoints and a training-curve figure
  sweep     run the config across densities or bias ratios and write the
            aggregated CSV (mean +- stdev over seeds) plus figure
  flops     print the analytic parameter / FLOP report for the configured
            model and density
  gen-data  materialize the configured dataset to binary blobs

Exit status: 0 on success, 2 on configuration errors, 3 on training aborts.
"""

from __future__ import annotations

import argparse
import sys

from .config import ConfigError, default_run_id, describe_defaults, parse_config
from .optim import TrainingAborted


def _load_config(args):
    try:
        with open(args.config, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {args.config}: {e}")
    cfg = parse_config(text, strict=args.strict)
    if args.seeds:
        cfg.seeds = [int(tok) for tok in args.seeds.split(",") if tok.strip()]
        if not cfg.seeds:
            raise ConfigError("--seeds must list at least one integer")
    return cfg


def _cmd_run(args):
    from .runner import run
    cfg = _load_config(args)
    rows = run(cfg, out_path=args.out or cfg.out, workers=args.workers,
               plot=not args.no_plot)
    final = rows[-1]
    print(f"{default_run_id(cfg)}: {len(rows)} rows -> {args.out or cfg.out}")
    print(f"final unbiased_acc {final['unbiased_acc']:.4f}, "
          f"conflicting_acc {final['conflicting_acc']:.4f}")
    return 0


def _cmd_sweep(args):
    from .runner import sweep
    cfg = _load_config(args)
    values = None
    if args.values:
        values = [float(tok) for tok in args.values.split(",") if tok.strip()]
    agg = sweep(cfg, axis=args.axis or None, values=values,
                out_path=args.out or cfg.out, workers=args.workers,
                plot=not args.no_plot)
    print(f"{cfg.method}: {len(agg)} sweep points -> {args.out or cfg.out}")
    for row in agg:
        print(f"  {row['axis']} = {row['value']:g}: unbiased "
              f"{row['unbiased_mean']:.4f} +- {row['unbiased_std']:.4f}, "
              f"conflicting {row['conflicting_mean']:.4f}")
    return 0


def _cmd_flops(args):
    from .metrics import count_flops
    from .models import simple_cnn_spec
    from .runner import write_csv
    from .sparsity import allocate_density

    cfg = _load_config(args)
    spec = simple_cnn_spec()
    shapes = [("conv2d1.weight", (64, 3, 3, 3)), ("conv2d2.weight", (128, 64, 3, 3)),
              ("conv2d3.weight", (256, 128, 3, 3)), ("linear1.weight", (256, 10))]
    dense = count_flops(spec, (3, 28, 28), batch_size=cfg.batch, phase="train")
    rows = [{"variant": "dense", "density": 1.0,
             "params_total": dense.params_total,
             "params_active": dense.params_active,
             "train_flops_per_step": dense.train_flops_per_step,
             "infer_flops_per_example": dense.infer_flops_per_example}]
    if cfg.method in ("set", "rigl", "rest"):
        alloc = allocate_density(shapes, cfg.allocation, cfg.density)
        sparse = count_flops(spec, (3, 28, 28), allocation=alloc,
                             batch_size=cfg.batch, phase="train")
        rows.append({"variant": cfg.method, "density": cfg.density,
                     "params_total": sparse.params_total,
                     "params_active": sparse.params_active,
                     "train_flops_per_step": sparse.train_flops_per_step,
                     "infer_flops_per_example": sparse.infer_flops_per_example})
    print(f"{'variant':<8} {'density':>8} {'params':>10} {'active':>10} "
          f"{'train FLOPs/step':>18} {'infer FLOPs/ex':>16}")
    for r in rows:
        print(f"{r['variant']:<8} {r['density']:>8g} {r['params_total']:>10} "
              f"{r['params_active']:>10} {r['train_flops_per_step']:>18} "
              f"{r['infer_flops_per_example']:>16}")
    if len(rows) == 2:
        d, s = rows
        print(f"ratios: params {s['params_active'] / d['params_total']:.4%}, "
              f"train FLOPs {s['train_flops_per_step'] / d['train_flops_per_step']:.4%}, "
              f"infer FLOPs {s['infer_flops_per_example'] / d['infer_flops_per_example']:.4%}")
    if args.out:
        write_csv(args.out, list(rows[0].keys()), rows)
        print(f"wrote {args.out}")
    return 0


def _cmd_gen_data(args):
    import os

    from .data import build_dataset, save_dataset
    from .runner import dataset_spec

    cfg = _load_config(args)
    out = args.out or cfg.out
    if not out:
        raise ConfigError("gen-data needs --out")
    train, test = build_dataset(dataset_spec(cfg))
    stem, _ = os.path.splitext(out)
    train_path, test_path = f"{stem}_train.bin", f"{stem}_test.bin"
    save_dataset(train, train_path)
    save_dataset(test, test_path)
    print(f"wrote {train_path} ({len(train)} examples, "
          f"{train.n_conflicting} conflicting) and {test_path} "
          f"({len(test)} examples, unbiased)")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sparselab",
        description="Sparse-training experiments on synthetically biased "
                    "image data.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="config keys (key = value per line, # comments):\n"
               + describe_defaults())
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, needs_out=False):
        p.add_argument("--config", required=True, help="path to key=value config")
        p.add_argument("--out", required=needs_out, default="",
                       help="output path (CSV or blob stem)")
        p.add_argument("--seeds", default="",
                       help="comma-separated seed list overriding the config")
        p.add_argument("--strict", action=argparse.BooleanOptionalAction,
                       default=True, help="reject unknown config keys")

    p_run = sub.add_parser("run", help="train all seeds, emit CSV + checkpoints")
    common(p_run)
    p_run.add_argument("--workers", type=int, default=None,
                       help="parallel seed workers (default: cpu count)")
    p_run.add_argument("--no-plot", action="store_true",
                       help="skip figure rendering")
    p_run.set_defaults(func=_cmd_run)

    p_sweep = sub.add_parser("sweep", help="sweep density or ratio, aggregate")
    common(p_sweep)
    p_sweep.add_argument("--axis", choices=["density", "ratio"], default="",
                         help="sweep axis (default: config sweep_axis)")
    p_sweep.add_argument("--values", default="",
                         help="comma-separated values (default: config)")
    p_sweep.add_argument("--workers", type=int, default=None)
    p_sweep.add_argument("--no-plot", action="store_true")
    p_sweep.set_defaults(func=_cmd_sweep)

    p_flops = sub.add_parser("flops", help="analytic cost report")
    common(p_flops)
    p_flops.set_defaults(func=_cmd_flops)

    p_gen = sub.add_parser("gen-data", help="write dataset blobs")
    common(p_gen)
    p_gen.set_defaults(func=_cmd_gen_data)
    return parser


def main(argv=None):
    from ._runtime import enable_arena_reuse
    enable_arena_reuse()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except TrainingAborted as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
