"""Render static figures and a markdown summary from run logs.

Reads train_log.csv and structure_log.jsonl out of one or more run
directories; multiple runs are overlaid for comparison. Figures are written
as PNG files next to the summary table.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def load_train_log(run_dir: str | Path) -> dict[str, list[float]]:
    path = Path(run_dir) / "train_log.csv"
    if not path.is_file():
        raise FileNotFoundError(f"missing train log: {path}")
    cols: dict[str, list[float]] = {"epoch": [], "step": [], "l_p": [], "l_c": [], "l_n": [], "total": []}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            for key in cols:
                cols[key].append(float(row[key]))
    return cols


def load_structure_log(run_dir: str | Path) -> list[dict]:
    path = Path(run_dir) / "structure_log.jsonl"
    if not path.is_file():
        raise FileNotFoundError(f"missing structure log: {path}")
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def render_report(run_dirs: list[str | Path], out_dir: str | Path) -> list[Path]:
    """Write loss, neighbor-precision, and curriculum figures plus summary.md.

    The neighbor-precision figure is skipped (with a notice in the summary)
    when no run carries precision values, e.g. for unlabeled data.
    """
    run_dirs = [Path(d) for d in run_dirs]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    runs = {d.name or str(d): (load_train_log(d), load_structure_log(d)) for d in run_dirs}

    fig, axes = plt.subplots(2, 2, figsize=(10, 7), sharex=True)
    panels = [("l_p", "prototypical"), ("l_c", "cross-view"), ("l_n", "neighbor"), ("total", "total")]
    for ax, (col, title) in zip(axes.flat, panels):
        for name, (tlog, _) in runs.items():
            ax.plot(range(len(tlog[col])), tlog[col], label=name, alpha=0.85)
        ax.set_title(title)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
    axes.flat[0].legend(fontsize=8)
    fig.tight_layout()
    loss_path = out_dir / "loss_components.png"
    fig.savefig(loss_path, dpi=120)
    plt.close(fig)
    written.append(loss_path)

    have_precision = {
        name: [(rec["epoch"], rec["neighbor_precision"]) for rec in slog if rec["neighbor_precision"] is not None]
        for name, (_, slog) in runs.items()
    }
    precision_skipped = all(len(v) == 0 for v in have_precision.values())
    if not precision_skipped:
        fig, ax = plt.subplots(figsize=(6, 4))
        for name, points in have_precision.items():
            if points:
                ax.plot([e for e, _ in points], [p for _, p in points], marker="o", label=name)
        ax.set_xlabel("epoch")
        ax.set_ylabel("neighbor precision")
        ax.set_ylim(-0.02, 1.02)
        ax.legend(fontsize=8)
        fig.tight_layout()
        prec_path = out_dir / "neighbor_precision.png"
        fig.savefig(prec_path, dpi=120)
        plt.close(fig)
        written.append(prec_path)

    fig, ax = plt.subplots(figsize=(6, 4))
    for name, (_, slog) in runs.items():
        ax.plot([rec["epoch"] for rec in slog], [rec["k"] for rec in slog], drawstyle="steps-post", label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("neighbor search range k")
    ax.legend(fontsize=8)
    fig.tight_layout()
    k_path = out_dir / "curriculum_k.png"
    fig.savefig(k_path, dpi=120)
    plt.close(fig)
    written.append(k_path)

    lines = [
        "# Run summary",
        "",
        "| run | epochs | steps | final m | final outliers | final k | final total loss | precision first -> last |",
        "|---|---|---|---|---|---|---|---|",
    ]
    for name, (tlog, slog) in runs.items():
        last = slog[-1]
        prec = have_precision[name]
        prec_txt = f"{prec[0][1]:.3f} -> {prec[-1][1]:.3f}" if prec else "n/a"
        final_total = tlog["total"][-1] if tlog["total"] else float("nan")
        lines.append(
            f"| {name} | {last['epoch']} | {len(tlog['step'])} | {last['m']} | {last['n_outliers']} "
            f"| {last['k']} | {final_total:.4f} | {prec_txt} |"
        )
    if precision_skipped:
        lines += ["", "Note: neighbor-precision figure skipped; no run recorded precision values."]
    summary_path = out_dir / "summary.md"
    summary_path.write_text("\n".join(lines) + "\n")
    written.append(summary_path)
    return written
