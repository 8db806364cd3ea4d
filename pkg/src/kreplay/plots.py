"""Static plot files for run logs and ablation tables."""
from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _read_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def _float(x):
    return float(x) if x not in ("", None) else None


def plot_run(run_dir, out_dir) -> list[Path]:
    """Loss curves and RecogAcc-vs-step plots from a run's CSV logs."""
    run_dir, out_dir = Path(run_dir), Path(out_dir)
    losses = run_dir / "logs" / "losses.csv"
    evals = run_dir / "logs" / "eval.csv"
    if not losses.exists():
        raise ValueError(f"{run_dir}: no logs/losses.csv")
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    by_stage = defaultdict(list)
    for row in _read_csv(losses):
        by_stage[row["stage"]].append(row)
    fig, axes = plt.subplots(1, len(by_stage), figsize=(5 * len(by_stage), 3.5), squeeze=False)
    for ax, (stage, rows) in zip(axes[0], by_stage.items()):
        steps = [int(r["step"]) for r in rows]
        for col in ("total", "l_ce", "l_know", "l_kd"):
            vals = [float(r[col]) for r in rows]
            if any(vals):
                ax.plot(steps, vals, label=col, linewidth=0.8)
        ax.set_title(stage)
        ax.set_xlabel("step")
        ax.legend(fontsize=7)
    fig.tight_layout()
    path = out_dir / "loss_curves.png"
    fig.savefig(path, dpi=100)
    plt.close(fig)
    written.append(path)

    if evals.exists():
        rows = [r for r in _read_csv(evals) if _float(r.get("recog_acc")) is not None]
        fig, ax = plt.subplots(figsize=(5, 3.5))
        grouped = defaultdict(list)
        for r in rows:
            grouped[r["stage"]].append((int(r["step"]), float(r["recog_acc"])))
        for stage, pts in grouped.items():
            ax.plot(*zip(*pts), marker="o", markersize=3, label=stage)
        ax.set_xlabel("step")
        ax.set_ylabel("RecogAcc (knowledge val)")
        ax.set_ylim(-0.02, 1.02)
        if grouped:
            ax.legend(fontsize=7)
        fig.tight_layout()
        path = out_dir / "recog_vs_step.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path)
    return written


def plot_ablation(rows: list[dict], vanilla: dict, path) -> Path:
    """Two panels: RecogAcc against exemplars per category and against category count."""
    path = Path(path)
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.8))
    caps = sorted((r for r in rows if r["run"].startswith("cap_")), key=lambda r: r["per_category_cap"])
    cats = sorted((r for r in rows if r["run"].startswith("categories_")), key=lambda r: r["num_categories"])
    panels = ((axes[0], caps, "per_category_cap", "exemplars per category"),
              (axes[1], cats, "num_categories", "replayed categories"))
    for ax, series, key, label in panels:
        xs = [r[key] for r in series]
        ax.plot(xs, [r["seen_recog_acc"] for r in series], marker="o", label="K-Replay seen")
        ax.plot(xs, [r["unseen_recog_acc"] for r in series], marker="s", label="K-Replay unseen")
        ax.axhline(vanilla["knoweval_seen"]["recog_acc"], color="grey", linestyle="--", label="fine-tune seen")
        ax.set_xlabel(label)
        ax.set_ylabel("RecogAcc")
        ax.set_ylim(-0.02, 1.02)
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
