"""Rendering of the four supported plot kinds."""

import warnings

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .jobs import PlotJob, load_compare_csv, load_metrics_csv

PLOT_KINDS = ("zero_std_ratio", "reward_std_log", "reward_curve", "budget_sweep")

# floor for plotting std values on a log axis; zeros are clamped here
LOG_FLOOR = 1e-4


def _curve_plot(job: PlotJob, column: str, ylabel: str, logy: bool) -> None:
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for path, label in job.inputs:
        cols = load_metrics_csv(path)
        xs = cols["iteration"]
        ys = cols[column]
        if not xs:
            warnings.warn(f"{path}: no iterations recorded, plotting empty axes")
        if logy:
            ys = [max(y, LOG_FLOOR) for y in ys]
        ax.plot(xs, ys, label=label, linewidth=1.5)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel(ylabel)
    ax.legend(loc="best")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(job.out_path, dpi=120)
    plt.close(fig)


def _budget_plot(job: PlotJob) -> None:
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for path, label in job.inputs:
        rows = load_compare_csv(path)
        groups = {}
        for row in rows:
            groups.setdefault((int(row["G"]), int(row["K"])), []).append(row["final_reward"])
        pairs = sorted(groups)
        ticks = list(range(len(pairs)))
        for i, gk in enumerate(pairs):
            vals = groups[gk]
            ax.scatter([i] * len(vals), vals, alpha=0.5, s=18)
        means = [sum(groups[gk]) / len(groups[gk]) for gk in pairs]
        ax.plot(ticks, means, marker="o", label=label)
        ax.set_xticks(ticks)
        ax.set_xticklabels([f"G={g},K={k}" for g, k in pairs])
    ax.set_xlabel("budget split")
    ax.set_ylabel("final reward")
    ax.legend(loc="best")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(job.out_path, dpi=120)
    plt.close(fig)


def render(job: PlotJob) -> None:
    """Render the job to its output path; raises SchemaError on bad input."""
    if job.kind == "zero_std_ratio":
        _curve_plot(job, "zero_std_ratio", "zero-std group ratio", logy=False)
    elif job.kind == "reward_std_log":
        _curve_plot(job, "reward_std", "reward std (log scale)", logy=True)
    elif job.kind == "reward_curve":
        _curve_plot(job, "reward_mean", "mean reward", logy=False)
    elif job.kind == "budget_sweep":
        _budget_plot(job)
    else:
        raise ValueError(f"unknown plot kind {job.kind!r}; "
                         f"expected one of {', '.join(PLOT_KINDS)}")
