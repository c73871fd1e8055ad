"""Synthetic workload generator with ground truth.

Produces prefix key/value tensors, planted-cluster query distributions with
known labels, the exact prefix attention state of every query (computed by
the same attention code the rest of the toolkit uses), per-chunk traces for
chunked-construction tests, and optional local key/value blocks for
prefix-plus-local oracle comparisons.

Query directions for one planted cluster are drawn by rotating the cluster
center by an angle ~ N(0, spread) in a random tangent direction, so
cluster_spread is exactly the angular standard deviation and spread = 0
reproduces the center bit-exactly. Queries are scaled to norm sqrt(d_h) and
prefix key/value coordinates are standard normal, which puts the softmax
logits at roughly unit variance: attention is neither uniform nor one-hot,
so centroid quality is visible in reconstruction error.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention import RopeConfig, apply_rope, attn_with_state
from .tensorstore import (
    FORMAT_VERSION,
    ModelGeometry,
    SchemaError,
    TraceSet,
    read_tensor_file,
    write_tensor_file,
)


@dataclass(frozen=True)
class SynthSpec:
    geometry: ModelGeometry
    prefix_len: int
    n_query_clusters: int = 8
    queries_per_cluster: int = 8
    cluster_spread: float = 0.05
    seed: int = 0
    n_chunks: int = 1
    n_local_tokens: int = 0
    rope_theta: float = 10000.0

    def __post_init__(self) -> None:
        if self.prefix_len < 1:
            raise ValueError("prefix_len must be >= 1")
        if self.n_query_clusters < 1:
            raise ValueError("n_query_clusters must be >= 1")
        if self.queries_per_cluster < 1:
            raise ValueError("queries_per_cluster must be >= 1")
        if self.cluster_spread < 0:
            raise ValueError("cluster_spread must be >= 0")
        if self.n_chunks < 1 or self.prefix_len % self.n_chunks != 0:
            raise ValueError("n_chunks must divide prefix_len")
        if self.n_local_tokens < 0:
            raise ValueError("n_local_tokens must be >= 0")

    @property
    def n_tokens(self) -> int:
        return self.n_query_clusters * self.queries_per_cluster


@dataclass
class SynthResult:
    trace: TraceSet
    chunk_traces: list[TraceSet]                 # empty unless n_chunks > 1
    prefix_keys: np.ndarray                      # [n_layers, L, h_kv, d_h] f32
    prefix_values: np.ndarray                    # [n_layers, L, h_kv, d_h] f32
    labels: np.ndarray                           # [T] u32, planted cluster ids
    local_keys: np.ndarray                       # [n_layers, n_local, h_kv, d_h] f32
    local_values: np.ndarray                     # [n_layers, n_local, h_kv, d_h] f32
    local_len: np.ndarray                        # [T] u32, tokens attended locally


def _perturb_on_sphere(center: np.ndarray, spread: float, rng: np.random.Generator) -> np.ndarray:
    """Rotate a unit vector by angle ~ N(0, spread) toward a random tangent."""
    if spread == 0.0:
        return center
    g = rng.standard_normal(center.shape[0])
    g -= (g @ center) * center
    norm = np.linalg.norm(g)
    if norm == 0.0:
        return center
    tangent = g / norm
    angle = rng.normal(0.0, spread)
    return np.cos(angle) * center + np.sin(angle) * tangent


def generate(spec: SynthSpec) -> SynthResult:
    """Generate traces, the oracle prefix, and planted labels for `spec`.

    Trace states are computed by attn_with_state from the stored f32 tensors,
    so recomputing a state from a written-and-reloaded trace is bit-exact.
    """
    rng = np.random.default_rng(spec.seed)
    g = spec.geometry
    L, T = spec.prefix_len, spec.n_tokens
    rope = RopeConfig(theta_base=spec.rope_theta)

    labels = np.repeat(
        np.arange(spec.n_query_clusters, dtype=np.uint32), spec.queries_per_cluster
    )
    labels = labels[rng.permutation(T)]

    prefix_keys = rng.standard_normal((g.n_layers, L, g.h_kv, g.d_h)).astype(np.float32)
    prefix_values = rng.standard_normal((g.n_layers, L, g.h_kv, g.d_h)).astype(np.float32)
    local_keys = rng.standard_normal(
        (g.n_layers, spec.n_local_tokens, g.h_kv, g.d_h)
    ).astype(np.float32)
    local_values = rng.standard_normal(
        (g.n_layers, spec.n_local_tokens, g.h_kv, g.d_h)
    ).astype(np.float32)
    local_len = np.minimum(np.arange(T), spec.n_local_tokens).astype(np.uint32)

    scale = np.sqrt(g.d_h)
    trace = TraceSet(geometry=g, prefix_len=L)
    chunk_len = L // spec.n_chunks
    chunks = [TraceSet(geometry=g, prefix_len=chunk_len) for _ in range(spec.n_chunks)]

    for layer in range(g.n_layers):
        centers = rng.standard_normal((spec.n_query_clusters, g.h_q, g.d_h))
        centers /= np.linalg.norm(centers, axis=-1, keepdims=True)

        pre_q = np.empty((T, g.h_q, g.d_h), dtype=np.float64)
        for t in range(T):
            c = int(labels[t])
            for h in range(g.h_q):
                pre_q[t, h] = scale * _perturb_on_sphere(centers[c, h], spec.cluster_spread, rng)
        pre_q32 = pre_q.astype(np.float32)

        # All response queries are rotated at the common post-prefix position,
        # so planted pre-rope clusters induce planted attention-state clusters
        # (spread = 0 makes both representations identical within a cluster).
        rope_q32 = np.empty_like(pre_q32)
        for t in range(T):
            rope_q32[t] = apply_rope(pre_q32[t], L, rope)

        trace.pre_rope_q.append(pre_q32)
        trace.rope_q.append(rope_q32)
        out = np.empty((T, g.h_q, g.d_h), dtype=np.float32)
        logz = np.empty((T, g.h_q), dtype=np.float64)
        for t in range(T):
            for h in range(g.h_q):
                kv = g.kv_head_of(h)
                state = attn_with_state(
                    rope_q32[t, h], prefix_keys[layer, :, kv], prefix_values[layer, :, kv]
                )
                out[t, h] = state.out
                logz[t, h] = state.log_z
        trace.attn_out.append(out)
        trace.log_z.append(logz)

        for c_idx, chunk in enumerate(chunks):
            lo, hi = c_idx * chunk_len, (c_idx + 1) * chunk_len
            chunk.pre_rope_q.append(pre_q32)
            chunk.rope_q.append(rope_q32)
            c_out = np.empty((T, g.h_q, g.d_h), dtype=np.float32)
            c_logz = np.empty((T, g.h_q), dtype=np.float64)
            for t in range(T):
                for h in range(g.h_q):
                    kv = g.kv_head_of(h)
                    state = attn_with_state(
                        rope_q32[t, h],
                        prefix_keys[layer, lo:hi, kv],
                        prefix_values[layer, lo:hi, kv],
                    )
                    c_out[t, h] = state.out
                    c_logz[t, h] = state.log_z
            chunk.attn_out.append(c_out)
            chunk.log_z.append(c_logz)

    return SynthResult(
        trace=trace,
        chunk_traces=chunks if spec.n_chunks > 1 else [],
        prefix_keys=prefix_keys,
        prefix_values=prefix_values,
        labels=labels,
        local_keys=local_keys,
        local_values=local_values,
        local_len=local_len,
    )


@dataclass
class OracleData:
    """Ground-truth side of a synthetic workload, loaded from an oracle file."""

    geometry: ModelGeometry
    prefix_keys: np.ndarray
    prefix_values: np.ndarray
    labels: np.ndarray
    local_keys: np.ndarray
    local_values: np.ndarray
    local_len: np.ndarray


def save_oracle(path: str | Path, result: SynthResult) -> None:
    g = result.trace.geometry
    meta = dict(g.meta())
    meta["prefix_len"] = str(result.trace.prefix_len)
    meta["format_version"] = str(FORMAT_VERSION)
    meta["object"] = "oracle"
    tensors = {
        "prefix_k": result.prefix_keys,
        "prefix_v": result.prefix_values,
        "labels": result.labels,
        "local_k": result.local_keys,
        "local_v": result.local_values,
        "local_len": result.local_len,
    }
    write_tensor_file(path, tensors, meta)


def load_oracle(path: str | Path) -> OracleData:
    tensors, meta = read_tensor_file(path)
    geometry = ModelGeometry.from_meta(meta)
    for name in ("prefix_k", "prefix_v", "labels", "local_k", "local_v", "local_len"):
        if name not in tensors:
            raise SchemaError(f"missing required tensor: {name}")
    return OracleData(
        geometry=geometry,
        prefix_keys=tensors["prefix_k"],
        prefix_values=tensors["prefix_v"],
        labels=tensors["labels"],
        local_keys=tensors["local_k"],
        local_values=tensors["local_v"],
        local_len=tensors["local_len"],
    )
