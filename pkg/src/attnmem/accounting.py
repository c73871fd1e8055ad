"""Prefix-traffic footprint formulas and the desk-scale scaling benchmark.

The asserted cost metric is the exact count of similarity/score evaluations
per token; wall-clock is measured and reported but never asserted, since it
depends on the host. On a balanced two-level index the hierarchical count
is exactly n_l1 + top_m * (K / n_l1) per token.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .bank import HierarchicalIndex, MemoryEntries, retrieve_hier, retrieve_linear
from .tensorstore import ModelGeometry

FULL_ATTENTION_SIM = "full_attention_sim"
FLAT = "flat"
HIER = "hier"
BENCH_MODES = (FULL_ATTENTION_SIM, FLAT, HIER)

CSV_HEADER = ("mode", "k", "n_l1", "top_m", "ops_mean", "ns_per_token_mean", "trials", "seed")


@dataclass(frozen=True)
class TrafficModel:
    geometry: ModelGeometry
    prefix_len: int
    k: int
    d_prime: int

    def __post_init__(self) -> None:
        if self.prefix_len < 0 or self.k < 0 or self.d_prime < 1:
            raise ValueError("prefix_len and k must be >= 0, d_prime >= 1")


def gqa_traffic(model: TrafficModel) -> int:
    """Elements loaded per decode step by full grouped-query attention:
    2 H_q d_h for the query load and output write, plus 2 L G d_h for the
    prefix keys and values."""
    g = model.geometry
    return 2 * g.h_q * g.d_h + 2 * model.prefix_len * g.group_size * g.d_h


def asm_traffic(model: TrafficModel) -> int:
    """Elements loaded per decode step with a K-entry state memory:
    2 H_q d_h plus K G d' for the lookup keys."""
    g = model.geometry
    return 2 * g.h_q * g.d_h + model.k * g.group_size * model.d_prime


@dataclass
class BenchResult:
    mode: str
    k: int
    n_l1: int
    top_m: int
    ops_mean: float
    ns_per_token_mean: float
    trials: int
    seed: int

    def row(self) -> tuple:
        return (
            self.mode,
            self.k,
            self.n_l1,
            self.top_m,
            f"{self.ops_mean:.6g}",
            f"{self.ns_per_token_mean:.6g}",
            self.trials,
            self.seed,
        )


def balanced_hier_index(
    keys: np.ndarray, n_l1: int, top_m: int = 16
) -> HierarchicalIndex:
    """Index whose buckets are contiguous near-equal slices of the entry
    set; with n_l1 | K every bucket has exactly K / n_l1 members, making
    the per-query op count independent of the query."""
    k = len(keys)
    if not 1 <= n_l1 <= k:
        raise ValueError("n_l1 must be in [1, K]")
    bounds = np.linspace(0, k, n_l1 + 1).astype(np.int64)
    buckets = [
        np.arange(bounds[i], bounds[i + 1], dtype=np.uint32) for i in range(n_l1)
    ]
    l1 = np.stack([keys[b].astype(np.float64).mean(axis=0) for b in buckets])
    l1 /= np.linalg.norm(l1, axis=1, keepdims=True)
    return HierarchicalIndex(
        l1_keys=l1.astype(np.float32), buckets=buckets, top_m=min(top_m, n_l1)
    )


def synthetic_entries(k: int, d_prime: int, d_h: int, rng: np.random.Generator) -> MemoryEntries:
    """Random unit-key entries, enough structure for cost benchmarking."""
    keys = rng.standard_normal((k, d_prime))
    keys /= np.linalg.norm(keys, axis=1, keepdims=True)
    out = rng.standard_normal((k, 1, d_h)).astype(np.float32)
    log_z = np.zeros((k, 1), dtype=np.float64)
    return MemoryEntries(keys=keys.astype(np.float32), out=out, log_z=log_z)


def default_n_l1(k: int) -> int:
    return max(1, round(np.sqrt(k)))


def run_scaling_bench(
    ks: list[int],
    modes: list[str],
    trials: int = 3,
    seed: int = 0,
    tokens_per_trial: int = 64,
    d_h: int = 64,
    d_prime: int = 128,
    top_m: int = 16,
    n_l1_for: dict[int, int] | None = None,
) -> list[BenchResult]:
    """Measure mean per-token similarity ops and wall-clock per (K, mode).

    full_attention_sim scores every one of L = K prefix positions per token
    (the equal-footprint comparison), flat scans all K entry keys, hier runs
    the two-level lookup over a balanced index with n_l1 = round(sqrt(K))
    unless overridden.
    """
    for mode in modes:
        if mode not in BENCH_MODES:
            raise ValueError(f"unknown bench mode {mode!r}")
    results: list[BenchResult] = []
    for k in ks:
        rng = np.random.default_rng(seed + k)
        entries = synthetic_entries(k, d_prime, d_h, rng)
        n_l1 = (n_l1_for or {}).get(k, default_n_l1(k))
        index = balanced_hier_index(entries.keys, n_l1, top_m)
        prefix_keys = rng.standard_normal((k, d_h))
        prefix_values = rng.standard_normal((k, d_h))
        queries = rng.standard_normal((tokens_per_trial, d_prime))
        attn_queries = rng.standard_normal((tokens_per_trial, d_h))
        for mode in modes:
            ops_total = 0
            elapsed_ns = 0
            for _ in range(trials):
                start = time.perf_counter_ns()
                if mode == FULL_ATTENTION_SIM:
                    for q in attn_queries:
                        scores = prefix_keys @ q / np.sqrt(d_h)
                        w = np.exp(scores - scores.max())
                        (w / w.sum()) @ prefix_values
                        ops_total += k
                elif mode == FLAT:
                    for q in queries:
                        res = retrieve_linear(q, entries)
                        ops_total += res.ops_count
                else:
                    for q in queries:
                        res = retrieve_hier(q, index, entries)
                        ops_total += res.ops_count
                elapsed_ns += time.perf_counter_ns() - start
            n_tokens = trials * tokens_per_trial
            results.append(
                BenchResult(
                    mode=mode,
                    k=k,
                    n_l1=n_l1 if mode == HIER else 0,
                    top_m=top_m if mode == HIER else 0,
                    ops_mean=ops_total / n_tokens,
                    ns_per_token_mean=elapsed_ns / n_tokens,
                    trials=trials,
                    seed=seed,
                )
            )
    return results
