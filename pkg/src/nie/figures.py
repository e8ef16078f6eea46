"""Report figures rendered next to the delimited outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_score_scatter(
    oracle: np.ndarray,
    method: np.ndarray,
    path: str | Path,
    *,
    method_name: str = "method",
    test_ids: np.ndarray | None = None,
    pearson_r: float | None = None,
) -> Path:
    """Oracle-vs-approximation scatter; held-out points darker than tuning points."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5, 4.2))
    mask = np.zeros(len(oracle), dtype=bool)
    if test_ids is not None:
        mask[test_ids] = True
    else:
        mask[:] = True
    if (~mask).any():
        ax.scatter(oracle[~mask], method[~mask], s=8, alpha=0.35,
                   color="tab:gray", label="tuning 10%")
    ax.scatter(oracle[mask], method[mask], s=8, alpha=0.6,
               color="tab:blue", label="held-out 90%")
    title = f"{method_name} vs. oracle"
    if pearson_r is not None:
        title += f"  (r = {pearson_r:.3f})"
    ax.set_title(title)
    ax.set_xlabel("oracle influence")
    ax.set_ylabel(f"{method_name} score")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_bench_figure(bench_result: dict, path: str | Path) -> Path:
    """Log-log wall time vs. graph size with the fitted exponents."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5, 4.2))
    sizes = bench_result["sizes"]
    for name, style in (("oracle", "o-"), ("nora", "s--")):
        ts = bench_result["times"][name]
        slope = bench_result["slopes"][name]
        ax.loglog(sizes, ts, style, label=f"{name} (slope {slope:.2f})")
    ax.set_xlabel("nodes")
    ax.set_ylabel("wall time [s]")
    ax.set_title("Brute force vs. one-pass approximation")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_concentration_figure(shares: dict[int, float], path: str | Path) -> Path:
    """Top-k% influence share against the uniform baseline."""
    path = Path(path)
    ks = sorted(shares)
    fig, ax = plt.subplots(figsize=(4.6, 3.8))
    x = np.arange(len(ks))
    ax.bar(x - 0.18, [shares[k] for k in ks], width=0.36, label="observed")
    ax.bar(x + 0.18, [k / 100.0 for k in ks], width=0.36, color="tab:gray",
           label="uniform")
    ax.set_xticks(x, [f"top {k}%" for k in ks])
    ax.set_ylabel("share of total influence")
    ax.set_title("Influence concentration")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
