"""Report generation: ablation tables (CSV + aligned text) and figures.

Reports are rebuilt from run-directory artifacts alone (eval result CSVs
and training loss logs); no model is reloaded.  Metrics are shown as
percentages with the run-to-run std in parentheses.
"""

from __future__ import annotations

import logging
from pathlib import Path

import matplotlib
import numpy as np
import pandas as pd

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

logger = logging.getLogger(__name__)

VARIANT_ORDER = [
    "PSV (Code+Signal)",
    "PSV (Code)",
    "PSV (Signal)",
    "PSV (Semi-supervised)",
    "Skip-gram Transformer",
    "Seq2Seq (Unsupervised)",
    "Seq2Seq (Semi-supervised)",
]


def format_cell(mean: float, std: float) -> str:
    if np.isnan(mean):
        return "-"
    return f"{100 * mean:.2f} (± {100 * std:.2f})"


def summarize_eval_runs(results_dir: str | Path) -> pd.DataFrame:
    """Aggregate per-run eval CSVs into mean/std rows per (task, cohort,
    variant)."""
    results_dir = Path(results_dir)
    frames = []
    for path in sorted(results_dir.glob("eval_*.csv")):
        try:
            frames.append(pd.read_csv(path))
        except Exception as exc:
            logger.warning("skipping unreadable result file %s: %s", path, exc)
    if not frames:
        return pd.DataFrame(
            columns=["task", "cohort", "variant", "auprc_mean", "auprc_std",
                     "auroc_mean", "auroc_std", "n_runs"]
        )
    runs = pd.concat(frames, ignore_index=True)
    grouped = runs.groupby(["task", "cohort", "variant"], sort=False)
    summary = grouped.agg(
        auprc_mean=("auprc", "mean"),
        auprc_std=("auprc", lambda s: float(np.std(s))),
        auroc_mean=("auroc", "mean"),
        auroc_std=("auroc", lambda s: float(np.std(s))),
        n_runs=("run", "count"),
    ).reset_index()
    return summary


def ablation_table(summary: pd.DataFrame, task: str) -> tuple[pd.DataFrame, str]:
    """Wide table for one task: one row per variant, PR-AUC and ROC columns
    per cohort, gaps marked and formatted mean (± std)."""
    sub = summary[summary["task"] == task]
    cohorts = sorted(sub["cohort"].unique())
    variants = [v for v in VARIANT_ORDER if v in set(sub["variant"])]
    variants += [v for v in sub["variant"].unique() if v not in variants]

    rows = []
    for variant in variants:
        row: dict[str, object] = {"variant": variant}
        for cohort in cohorts:
            match = sub[(sub["variant"] == variant) & (sub["cohort"] == cohort)]
            if len(match):
                r = match.iloc[0]
                row[f"{cohort}_auprc"] = format_cell(r["auprc_mean"], r["auprc_std"])
                row[f"{cohort}_auroc"] = format_cell(r["auroc_mean"], r["auroc_std"])
            else:
                row[f"{cohort}_auprc"] = "-"
                row[f"{cohort}_auroc"] = "-"
        rows.append(row)
    table = pd.DataFrame(rows)

    header = [f"{task} task"] + [
        col for cohort in cohorts for col in (f"{cohort} PR-AUC", f"{cohort} ROC")
    ]
    widths = [max(len(header[0]), *(len(str(r["variant"])) for r in rows))] if rows else [len(header[0])]
    for i, col in enumerate(header[1:], start=1):
        key = f"{cohorts[(i - 1) // 2]}_{'auprc' if (i - 1) % 2 == 0 else 'auroc'}"
        cell_w = max((len(str(r[key])) for r in rows), default=0)
        widths.append(max(len(col), cell_w))
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        cells = [str(r["variant"]).ljust(widths[0])]
        for i, cohort in enumerate(cohorts):
            cells.append(str(r[f"{cohort}_auprc"]).ljust(widths[1 + 2 * i]))
            cells.append(str(r[f"{cohort}_auroc"]).ljust(widths[2 + 2 * i]))
        lines.append("  ".join(cells))
    return table, "\n".join(lines) + "\n"


def plot_loss_curves(logs_dir: str | Path, figures_dir: str | Path) -> list[Path]:
    logs_dir, figures_dir = Path(logs_dir), Path(figures_dir)
    figures_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for path in sorted(logs_dir.glob("*.csv")):
        try:
            df = pd.read_csv(path)
        except Exception as exc:
            logger.warning("skipping unreadable loss log %s: %s", path, exc)
            continue
        if "loss" not in df.columns:
            continue
        fig, ax = plt.subplots(figsize=(6, 4))
        if "stage" in df.columns:
            df = df.reset_index(drop=True)
            for stage, chunk in df.groupby("stage"):
                ax.plot(chunk.index, chunk["loss"], marker="o", label=f"stage {stage}")
            ax.legend(fontsize=8)
        else:
            ax.plot(df["epoch"], df["loss"])
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.set_title(path.stem)
        fig.tight_layout()
        out = figures_dir / f"{path.stem}.png"
        fig.savefig(out, dpi=120)
        plt.close(fig)
        written.append(out)
    return written


def plot_ablation_bars(summary: pd.DataFrame, task: str, figures_dir: str | Path) -> Path | None:
    sub = summary[summary["task"] == task]
    if sub.empty:
        return None
    figures_dir = Path(figures_dir)
    figures_dir.mkdir(parents=True, exist_ok=True)
    cohorts = sorted(sub["cohort"].unique())
    variants = [v for v in VARIANT_ORDER if v in set(sub["variant"])]
    variants += [v for v in sub["variant"].unique() if v not in variants]
    fig, axes = plt.subplots(1, len(cohorts), figsize=(5.5 * len(cohorts), 4), squeeze=False)
    for ax, cohort in zip(axes[0], cohorts):
        vals, errs, names = [], [], []
        for v in variants:
            match = sub[(sub["variant"] == v) & (sub["cohort"] == cohort)]
            if len(match):
                names.append(v)
                vals.append(100 * match.iloc[0]["auroc_mean"])
                errs.append(100 * match.iloc[0]["auroc_std"])
        y = np.arange(len(names))
        ax.barh(y, vals, xerr=errs, color="#4878b0")
        ax.set_yticks(y)
        ax.set_yticklabels(names, fontsize=8)
        ax.invert_yaxis()
        ax.set_xlabel("AU-ROC (%)")
        ax.set_title(f"{task}, cohort {cohort}")
        ax.set_xlim(0, 100)
    fig.tight_layout()
    out = figures_dir / f"ablation_{task}.png"
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def write_report(run_dir: str | Path) -> list[Path]:
    """Emit tables and figures for everything present under run_dir; partial
    results come out with their gaps marked."""
    run_dir = Path(run_dir)
    results_dir = run_dir / "results"
    report_dir = run_dir / "report"
    figures_dir = report_dir / "figures"
    written: list[Path] = []

    summary = summarize_eval_runs(results_dir)
    if summary.empty:
        logger.warning("no eval results under %s; nothing to report", results_dir)
    else:
        report_dir.mkdir(parents=True, exist_ok=True)
        summary_path = report_dir / "summary.csv"
        summary.to_csv(summary_path, index=False)
        written.append(summary_path)
        for task in summary["task"].unique():
            table, text = ablation_table(summary, task)
            csv_path = report_dir / f"ablation_{task}.csv"
            txt_path = report_dir / f"ablation_{task}.txt"
            table.to_csv(csv_path, index=False)
            txt_path.write_text(text)
            written.extend([csv_path, txt_path])
            fig = plot_ablation_bars(summary, task, figures_dir)
            if fig:
                written.append(fig)

    logs_dir = run_dir / "logs"
    if logs_dir.is_dir():
        written.extend(plot_loss_curves(logs_dir, figures_dir))
    return written
