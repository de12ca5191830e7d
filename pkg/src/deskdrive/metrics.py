"""Reading and plotting the training metrics stream."""

from __future__ import annotations

import json
from pathlib import Path


def read_metrics(path) -> list[dict]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def plot_metrics(metrics_path, out_dir) -> list[str]:
    """Emit return-curve and rate-curve PNGs from a metrics file."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = [r for r in read_metrics(metrics_path) if r.get("kind") == "iteration"]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    iters = [r["iteration"] for r in rows]
    train_ret = [r["rollout"]["mean_return"] for r in rows]
    eval_rows = [(r["iteration"], r["eval"]) for r in rows if "eval" in r]

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(iters, train_ret, label="rollout return (discounted)", alpha=0.7)
    if eval_rows:
        ax.plot(
            [i for i, _ in eval_rows],
            [e["mean_return"] for _, e in eval_rows],
            label="eval return (accumulated)",
            marker="o",
            markersize=3,
        )
    ax.set_xlabel("iteration")
    ax.set_ylabel("return")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    p = out / "returns.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    written.append(str(p))

    if eval_rows:
        fig, ax = plt.subplots(figsize=(7, 4))
        ax.plot([i for i, _ in eval_rows], [e["mean_goal_rate"] for _, e in eval_rows],
                label="goal rate", marker="o", markersize=3)
        ax.plot(
            [i for i, _ in eval_rows],
            [sum(s["collision_rate"] for s in e["per_scene"]) / max(1, len(e["per_scene"]))
             for _, e in eval_rows],
            label="collision rate", marker="s", markersize=3,
        )
        ax.set_xlabel("iteration")
        ax.set_ylabel("rate")
        ax.set_ylim(-0.05, 1.05)
        ax.legend()
        ax.grid(alpha=0.3)
        fig.tight_layout()
        p = out / "rates.png"
        fig.savefig(p, dpi=120)
        plt.close(fig)
        written.append(str(p))
    return written
