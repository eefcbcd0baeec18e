"""Figure rendering for run and sweep outputs.

Figures are written next to the delimited output. Sweep figures follow the
usual convention for these curves: solid lines for bias-conflicting
accuracy, dashed for unbiased accuracy.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def plot_run(rows, path):
    """Training curves: loss and accuracies vs step, one line per seed."""
    if not rows:
        return
    seeds = sorted({r["seed"] for r in rows})
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.6))
    for seed in seeds:
        series = [r for r in rows if r["seed"] == seed]
        steps = [r["step"] for r in series]
        ax_loss.plot(steps, [r["train_loss"] for r in series],
                     label=f"seed {seed}", alpha=0.9)
        ax_acc.plot(steps, [r["conflicting_acc"] for r in series],
                    linestyle="-", alpha=0.9, label=f"conflicting (seed {seed})")
        ax_acc.plot(steps, [r["unbiased_acc"] for r in series],
                    linestyle="--", alpha=0.9, label=f"unbiased (seed {seed})")
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("train loss")
    ax_loss.set_yscale("log")
    ax_loss.legend(fontsize=7)
    ax_acc.set_xlabel("step")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_ylim(0, 1)
    ax_acc.legend(fontsize=6)
    run_id = rows[0]["run_id"]
    fig.suptitle(run_id)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_sweep(agg_rows, path, axis="density"):
    """Aggregated accuracy vs the swept value with one-sigma error bars;
    solid = bias-conflicting accuracy, dashed = unbiased accuracy."""
    if not agg_rows:
        return
    values = [r["value"] for r in agg_rows]
    fig, ax = plt.subplots(figsize=(5.2, 3.8))
    ax.errorbar(values, [r["conflicting_mean"] for r in agg_rows],
                yerr=[r["conflicting_std"] for r in agg_rows],
                linestyle="-", marker="o", capsize=3, color="tab:red",
                label="bias-conflicting")
    ax.errorbar(values, [r["unbiased_mean"] for r in agg_rows],
                yerr=[r["unbiased_std"] for r in agg_rows],
                linestyle="--", marker="s", capsize=3, color="tab:blue",
                label="unbiased")
    if axis == "density" and min(values) > 0:
        ax.set_xscale("log")
    ax.set_xlabel(axis)
    ax.set_ylabel("final accuracy")
    ax.set_ylim(0, 1)
    ax.legend()
    ax.grid(alpha=0.3)
    method = agg_rows[0]["method"]
    ax.set_title(f"{method}: accuracy vs {axis}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
