"""Figure rendering for the report, bench and odedemo subcommands.

Everything draws on the Agg backend and writes straight to a file.
"""
from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

RC = {
    "font.size": 8,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.0,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
}

LOSS_PANELS = (
    ("supervised", ("cgan_g", "style_patchnce", "perc", "sup_total")),
    ("unsupervised", ("gan_u_g", "src", "hdce", "unsup_total")),
    ("discriminators", ("cgan_d", "gan_u_d")),
)


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_losses(rows: Sequence[Mapping[str, float]], path) -> Path:
    """One panel per branch plus the total with the supervised weight overlaid."""
    steps = [r["step"] for r in rows]
    with plt.rc_context(RC):
        fig, axes = plt.subplots(2, 2, figsize=(7.0, 4.6), sharex=True)
        for ax, (title, keys) in zip(axes.flat, LOSS_PANELS):
            for k in keys:
                ax.plot(steps, [r[k] for r in rows], label=k)
            ax.set_title(title)
            ax.set_yscale("symlog", linthresh=1.0)
            ax.legend(frameon=False)
        ax = axes.flat[3]
        ax.plot(steps, [r["total"] for r in rows], color="k", label="total")
        ax.set_yscale("symlog", linthresh=1.0)
        ax.set_title("total")
        twin = ax.twinx()
        twin.plot(steps, [r["lambda_sup"] for r in rows], color="tab:red", ls="--", label="lambda_sup")
        twin.set_ylim(-0.05, 1.05)
        twin.set_ylabel("lambda_sup")
        for a in axes[1]:
            a.set_xlabel("step")
        fig.tight_layout()
        return _save(fig, path)


def plot_bench(run_times: Sequence[float], label: str, path) -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.2, 2.6))
        ax.bar(range(1, len(run_times) + 1), run_times, color="tab:blue")
        mean = sum(run_times) / len(run_times)
        ax.axhline(mean, color="k", ls="--", label=f"mean {mean:.3f} s")
        ax.set_xlabel("run")
        ax.set_ylabel("seconds")
        ax.set_title(label)
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def plot_convergence(errors: Dict[str, List[tuple]], path) -> Path:
    """``errors`` maps a method name to ``(step or evals, abs error)`` points."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.2, 3.0))
        for name, pts in errors.items():
            xs, ys = zip(*pts)
            ax.loglog(xs, ys, marker="o", ms=3, label=name)
        ax.set_xlabel("dynamics evaluations")
        ax.set_ylabel("|error| at t=1")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)
