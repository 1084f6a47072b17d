"""Static figures: loss curves and probe accuracies, each written as CSV + PNG."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .training import StepMetrics  # noqa: E402


def write_loss_csv(path, history: list[StepMetrics]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "srl", "scl", "total"])
        for m in history:
            w.writerow([m.step, repr(m.srl), repr(m.scl), repr(m.total)])


def plot_losses(history: list[StepMetrics], out_png, smooth: int = 50) -> Path:
    if not history:
        raise ValueError("no metrics to plot")
    steps = [m.step for m in history]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name in ("srl", "scl", "total"):
        ys = [getattr(m, name) for m in history]
        k = max(1, min(smooth, len(ys)))
        # trailing moving average keeps the curve aligned with its step
        acc, smoothed = 0.0, []
        for i, y in enumerate(ys):
            acc += y
            if i >= k:
                acc -= ys[i - k]
            smoothed.append(acc / min(i + 1, k))
        ax.plot(steps, smoothed, label=name)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=100)
    plt.close(fig)
    return Path(out_png)


def write_probe_csv(path, accuracies: dict[str, float], chance: float | None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["probe", "accuracy"])
        for name, acc in accuracies.items():
            w.writerow([name, repr(acc)])
        if chance is not None:
            w.writerow(["chance", repr(chance)])


def plot_probes(accuracies: dict[str, float], chance: float | None, out_png) -> Path:
    if not accuracies:
        raise ValueError("no probe accuracies to plot")
    names = list(accuracies)
    fig, ax = plt.subplots(figsize=(1.2 * len(names) + 2, 3.5))
    ax.bar(names, [100 * accuracies[n] for n in names], color="tab:blue")
    if chance is not None:
        ax.axhline(100 * chance, color="k", linestyle="--", label="chance")
        ax.legend()
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    fig.tight_layout()
    fig.savefig(out_png, dpi=100)
    plt.close(fig)
    return Path(out_png)


def read_summary(path) -> dict[str, float]:
    """Parse a ``key = value`` summary file."""
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if "=" in line:
            key, value = (p.strip() for p in line.split("=", 1))
            out[key] = float(value)
    return out


def write_summary(path, summary: dict[str, float]) -> str:
    text = "".join(f"{k} = {v}\n" for k, v in summary.items())
    Path(path).write_text(text, encoding="utf-8")
    return text
