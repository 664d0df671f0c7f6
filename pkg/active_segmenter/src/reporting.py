"""
Summary tables and figures built from aggregated results.
"""

import logging
from pathlib import Path
from typing import Optional, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from .al_loop import SUMMARY_METRICS, AggregateSummary  # noqa: E402

logger = logging.getLogger(__name__)

matplotlib.rcParams["svg.hashsalt"] = "active-segmenter"

METRIC_LABELS = {
    ("3D", "dsc"): "3D DSC (%)",
    ("2D", "dsc"): "2D DSC (%)",
    ("3D", "hd95"): "3D HD95 (mm)",
    ("2D", "hd95"): "2D HD95 (mm)",
    ("query", "distinct_volumes"): "Distinct volumes per batch",
}


def _mean_std(row) -> str:
    if pd.isna(row["mean"]):
        return "n/a"
    return f"{row['mean']:.2f} ({row['std']:.2f})"


def write_report(summary: AggregateSummary, out_dir: Union[str, Path]) -> list[Path]:
    """
    Write summary.tsv (mean (std) over runs, cycles >= 1), per_cycle.tsv,
    pvalues.tsv and timing.tsv.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    overall = summary.overall.copy()
    overall["cell"] = overall.apply(_mean_std, axis=1)
    overall["column"] = [METRIC_LABELS.get((s, m), f"{s} {m}") for s, m in zip(overall["scope"], overall["metric"])]

    index = ["tag", "strategy", "n_init", "budget", "pool_mode", "q"]
    table = overall.set_index(index + ["column"])["cell"].unstack("column")
    runs = overall.groupby(index, dropna=False)["n_runs"].max().rename("n_runs")
    table = table.join(runs)
    ordered = [METRIC_LABELS[k] for k in (*SUMMARY_METRICS, ("query", "distinct_volumes")) if METRIC_LABELS[k] in table]
    table = table[["n_runs", *ordered]].reset_index().sort_values(["tag", "strategy"], kind="mergesort")

    paths = [out_dir / "summary.tsv", out_dir / "per_cycle.tsv", out_dir / "pvalues.tsv", out_dir / "timing.tsv"]
    table.to_csv(paths[0], sep="\t", index=False, lineterminator="\n")
    summary.per_cycle.to_csv(paths[1], sep="\t", index=False, float_format="%.6f", lineterminator="\n")
    summary.pvalues.to_csv(paths[2], sep="\t", index=False, float_format="%.6g", lineterminator="\n")
    summary.timing.to_csv(paths[3], sep="\t", index=False, float_format="%.3f", lineterminator="\n")

    logger.info(f"Wrote report for {len(table)} strategies to {out_dir}")
    return paths


def _metric_frame(summary: AggregateSummary, scope: str, metric: str) -> pd.DataFrame:
    frame = summary.metrics[(summary.metrics["scope"] == scope) & (summary.metrics["metric"] == metric)]
    if frame.empty:
        known = sorted({f"{s}:{m}" for s, m in zip(summary.metrics["scope"], summary.metrics["metric"])})
        raise ValueError(f"Unknown metric {scope}:{metric}; available: {', '.join(known)}")
    return frame


def _ci_halfwidth(values: pd.Series) -> float:
    """95% normal-approximation half-width of the mean; 0 with fewer than 2 runs."""
    values = values.dropna()
    if len(values) < 2:
        return 0.0
    return 1.96 * float(np.std(values, ddof=1)) / np.sqrt(len(values))


def _save(fig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    logger.info(f"Wrote {path}")
    return path


def plot_learning_curves(
    summary: AggregateSummary,
    out_path: Union[str, Path],
    scope: str = "3D",
    metric: str = "dsc",
    x: str = "labelled_size",
    include_initial: bool = False,
    tag: Optional[str] = None,
) -> Path:
    """Mean metric per strategy against labelled-set size (or cycle), with a 95% CI band over runs."""
    frame = _metric_frame(summary, scope, metric)
    if tag is not None:
        frame = frame[frame["tag"] == tag]
    if not include_initial:
        frame = frame[frame["cycle"] >= 1]
    if frame.empty:
        raise ValueError("No completed cycles to plot")

    fig, ax = plt.subplots(figsize=(6, 4))
    for (group_tag, strategy), group in frame.groupby(["tag", "strategy"], sort=True):
        stats = group.groupby("cycle").agg(
            x=(x, "mean"),
            mean=("value", "mean"),
            half=("value", _ci_halfwidth),
            n=("value", "count"),
        )
        label = strategy if group_tag == "default" else f"{group_tag}/{strategy}"
        ax.plot(stats["x"], stats["mean"], marker="o", label=label)
        if stats["n"].min() >= 2:
            ax.fill_between(stats["x"], stats["mean"] - stats["half"], stats["mean"] + stats["half"], alpha=0.2)

    ax.set_xlabel("Labelled images" if x == "labelled_size" else "AL cycle")
    ax.set_ylabel(METRIC_LABELS.get((scope, metric), f"{scope} {metric}"))
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    return _save(fig, out_path)


def plot_box(summary: AggregateSummary, out_path: Union[str, Path], scope: str = "3D", metric: str = "dsc") -> Path:
    """Per-run mean over cycles >= 1, one box per strategy across tags and seeds."""
    frame = _metric_frame(summary, scope, metric)
    run_means = frame[frame["cycle"] >= 1].groupby(["strategy", "tag", "seed"])["value"].mean().dropna()
    if run_means.empty:
        raise ValueError("No completed cycles to plot")

    strategies = sorted(run_means.index.get_level_values("strategy").unique())
    data = [run_means.xs(s, level="strategy").to_numpy() for s in strategies]

    fig, ax = plt.subplots(figsize=(1.2 * len(strategies) + 2, 4))
    ax.boxplot(data)
    ax.set_xticks(range(1, len(strategies) + 1))
    ax.set_xticklabels(strategies, rotation=30, ha="right")
    ax.set_ylabel(METRIC_LABELS.get((scope, metric), f"{scope} {metric}"))
    ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    return _save(fig, out_path)


def plot_pool_size(summary: AggregateSummary, out_path: Union[str, Path], scope: str = "3D", metric: str = "dsc") -> Path:
    """Mean over cycles >= 1 against the stochastic pool size Q, for resample-mode runs."""
    frame = _metric_frame(summary, scope, metric)
    frame = frame[(frame["pool_mode"] == "resample") & (frame["cycle"] >= 1)]
    if frame.empty:
        raise ValueError("No resample-mode runs to plot against Q")

    run_means = frame.groupby(["strategy", "q", "tag", "seed"])["value"].mean().reset_index()
    run_means["q"] = run_means["q"].astype(int)
    # entropy-sb-q10 and entropy-sb-q100 are one series
    run_means["series"] = [
        strategy.removesuffix(f"-q{q}") for strategy, q in zip(run_means["strategy"], run_means["q"])
    ]

    fig, ax = plt.subplots(figsize=(6, 4))
    for strategy, group in run_means.groupby("series", sort=True):
        stats = group.groupby("q")["value"].agg(["mean", _ci_halfwidth]).sort_index()
        ax.errorbar(stats.index, stats["mean"], yerr=stats["_ci_halfwidth"], marker="o", capsize=3, label=strategy)

    ax.set_xscale("log")
    ax.set_xlabel("Stochastic pool size Q")
    ax.set_ylabel(METRIC_LABELS.get((scope, metric), f"{scope} {metric}"))
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    return _save(fig, out_path)
