"""mIoU-vs-step figures from ``eval.csv`` files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .experiment import read_eval_curve  # noqa: E402


def plot_curves(run_dirs, out_path, labels=None, teacher: bool = False, title: str | None = None) -> Path:
    """Draw one student curve per run directory (optionally the teacher dashed)."""
    run_dirs = [Path(d) for d in run_dirs]
    if not run_dirs:
        raise ValueError("no run directories given")
    labels = list(labels) if labels else [d.name for d in run_dirs]
    fig, ax = plt.subplots(figsize=(6, 4))
    for d, name in zip(run_dirs, labels):
        steps, m, tm = read_eval_curve(d)
        (line,) = ax.plot(steps, m, label=name)
        if teacher:
            ax.plot(steps, tm, ls="--", color=line.get_color(), alpha=0.7, label=f"{name} (teacher)")
    ax.set_xlabel("step")
    ax.set_ylabel("target mIoU")
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
