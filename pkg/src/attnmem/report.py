"""Delimited report output plus matplotlib figures rendered to files."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .accounting import CSV_HEADER, BenchResult
from .inference import MergeReport


def write_bench_csv(results: list[BenchResult], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_HEADER)
        for res in results:
            writer.writerow(res.row())


def format_bench_csv(results: list[BenchResult]) -> str:
    lines = [",".join(CSV_HEADER)]
    lines += [",".join(str(v) for v in res.row()) for res in results]
    return "\n".join(lines)


def plot_bench(results: list[BenchResult], path: str | Path) -> None:
    """Scaling curves: ops per token and wall-clock per token vs K."""
    modes = sorted({r.mode for r in results})
    fig, (ax_ops, ax_ns) = plt.subplots(1, 2, figsize=(9, 3.6))
    for mode in modes:
        rows = sorted((r for r in results if r.mode == mode), key=lambda r: r.k)
        ks = [r.k for r in rows]
        ax_ops.plot(ks, [r.ops_mean for r in rows], marker="o", label=mode)
        ax_ns.plot(ks, [r.ns_per_token_mean for r in rows], marker="o", label=mode)
    for ax, ylabel in ((ax_ops, "similarity ops / token"), (ax_ns, "ns / token")):
        ax.set_xscale("log", base=2)
        ax.set_yscale("log")
        ax.set_xlabel("entries K")
        ax.set_ylabel(ylabel)
        ax.grid(True, which="both", alpha=0.3)
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_query_report(
    report: MergeReport, path: str | Path, errors: np.ndarray | None = None
) -> None:
    """Per-token retrieval similarity, and reconstruction error when an
    oracle was available."""
    tokens = np.arange(report.n_tokens)
    mean_sim = report.similarity.reshape(report.n_tokens, -1).mean(axis=1)
    n_axes = 2 if errors is not None else 1
    fig, axes = plt.subplots(1, n_axes, figsize=(4.5 * n_axes, 3.4), squeeze=False)
    ax = axes[0, 0]
    ax.plot(tokens, mean_sim, lw=1.0)
    ax.set_xlabel("token")
    ax.set_ylabel("mean retrieval cosine")
    ax.grid(alpha=0.3)
    if errors is not None:
        ax = axes[0, 1]
        ax.semilogy(tokens, np.maximum(errors, 1e-12), lw=1.0, color="tab:red")
        ax.set_xlabel("token")
        ax.set_ylabel("relative L2 error")
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
