"""
Result summaries: mean +/- std tables, bar charts with error bars, ROC
curves and pairwise Wilcoxon tests between models on matched runs.
"""

import logging
from itertools import combinations
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from ..errors import DomainError, UndefinedMetricError
from ..models import ProbeRun
from .metrics import MIN_WILCOXON_N, wilcoxon_signed_rank

logger = logging.getLogger(__name__)


def runs_frame(runs: Sequence[ProbeRun]) -> pd.DataFrame:
    return pd.DataFrame([r.to_dict() for r in runs])


def summary_table(runs: Sequence[ProbeRun]) -> pd.DataFrame:
    """One row per (task, mode, model, metric) with mean, std, median and run count."""
    if not runs:
        raise DomainError("no probe runs to summarise")
    df = runs_frame(runs)
    table = (
        df.groupby(["task", "mode", "model", "metric"])["value"]
        .agg(["mean", "std", "median", "count"])
        .reset_index()
    )
    table["std"] = table["std"].fillna(0.0)
    table["summary"] = [f"{m:.4f} ± {s:.4f}" for m, s in zip(table["mean"], table["std"])]
    return table


def pairwise_wilcoxon(runs: Sequence[ProbeRun]) -> pd.DataFrame:
    """Two-sided p-value for every model pair sharing a task, on runs matched
    by (mode, fold, seed)."""
    df = runs_frame(runs)
    rows = []
    for (task, mode, metric), group in df.groupby(["task", "mode", "metric"]):
        pivot = group.pivot_table(index=["fold", "seed_index"], columns="model", values="value")
        for a, b in combinations(sorted(pivot.columns), 2):
            paired = pivot[[a, b]].dropna()
            deltas = (paired[a] - paired[b]).to_numpy()
            row = {"task": task, "mode": mode, "metric": metric, "model_a": a, "model_b": b,
                   "n": int(len(deltas)), "mean_delta": float(deltas.mean()) if len(deltas) else float("nan")}
            try:
                row["p_value"] = wilcoxon_signed_rank(deltas)
            except DomainError as e:
                logger.warning(f"Wilcoxon {task}/{mode} {a} vs {b} skipped: {e}")
                row["p_value"] = float("nan")
            rows.append(row)
    columns = ["task", "mode", "metric", "model_a", "model_b", "n", "mean_delta", "p_value"]
    return pd.DataFrame(rows, columns=columns)


def bar_chart(table: pd.DataFrame, path: str, title: Optional[str] = None) -> Path:
    """Grouped bars of mean metric per task, one bar per model, std error bars."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    labels = [f"{t}\n{m}" if m != "cv" else t for t, m in zip(table["task"], table["mode"])]
    table = table.assign(group=labels)
    groups = list(dict.fromkeys(table["group"]))
    models = sorted(table["model"].unique())
    width = 0.8 / max(1, len(models))
    x = np.arange(len(groups))

    fig, ax = plt.subplots(figsize=(max(6, 1.6 * len(groups)), 4.5))
    for i, model in enumerate(models):
        sub = table[table["model"] == model].set_index("group").reindex(groups)
        ax.bar(x + i * width - 0.4 + width / 2, sub["mean"], width, yerr=sub["std"], capsize=3, label=model)
    ax.set_xticks(x)
    ax.set_xticklabels(groups)
    ax.set_ylabel("metric")
    ax.set_ylim(0, 1.05)
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150, facecolor="white")
    plt.close(fig)
    return path


def roc_points(scores: Sequence[float], labels: Sequence[int]) -> Dict[str, np.ndarray]:
    """False/true positive rates at every distinct threshold, (0, 0) first."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    n_pos, n_neg = int(labels.sum()), int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC needs both classes")
    thresholds = np.unique(scores)[::-1]
    tpr = [0.0] + [float((scores[labels == 1] >= t).sum()) / n_pos for t in thresholds]
    fpr = [0.0] + [float((scores[labels == 0] >= t).sum()) / n_neg for t in thresholds]
    return {"fpr": np.asarray(fpr), "tpr": np.asarray(tpr), "thresholds": thresholds}


def roc_plot(curves: Dict[str, Dict[str, np.ndarray]], path: str, title: Optional[str] = None) -> Path:
    """curves: name -> roc_points output (with an optional "auroc" entry)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 5))
    for name, c in curves.items():
        label = f"{name} (AUROC {float(c['auroc']):.3f})" if "auroc" in c else name
        ax.plot(c["fpr"], c["tpr"], label=label)
    ax.plot([0, 1], [0, 1], linestyle="--", color="grey", linewidth=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    if title:
        ax.set_title(title)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=150, facecolor="white")
    plt.close(fig)
    return path


def write_report(runs: Sequence[ProbeRun], out_dir: str) -> List[Path]:
    """summary.csv, wilcoxon.csv and summary.png under out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = summary_table(runs)
    paths = [out / "summary.csv"]
    table.to_csv(paths[0], index=False, float_format="%.6f")
    if len({r.model for r in runs}) > 1:
        tests = pairwise_wilcoxon(runs)
        tests.to_csv(out / "wilcoxon.csv", index=False, float_format="%.6g")
        paths.append(out / "wilcoxon.csv")
        small = tests[tests["n"] < MIN_WILCOXON_N]
        if len(small):
            logger.warning(f"{len(small)} model pair(s) have fewer than {MIN_WILCOXON_N} matched runs")
    paths.append(bar_chart(table, out / "summary.png"))
    for _, row in table.iterrows():
        logger.info(f"{row['task']}/{row['mode']} {row['model']}: {row['metric']} {row['summary']} (n={row['count']})")
    return paths
