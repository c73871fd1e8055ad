"""Online path: retrieve a precomputed prefix state per token/layer/group
and merge it losslessly with the token's own local self-attention state.

The lookup key is built by the same function calibration used
(:func:`attnmem.calibration.lookup_keys_for_token`), with the bank's stored
mode and whitening, so calibration queries retrieve their own entries
exactly. When the group concatenation yields several d' chunks, retrieval
uses the first chunk: one retrieval per group per token.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention import AttentionState, attn_with_state, merge
from .bank import MemoryBank, retrieve_hier, retrieve_linear
from .calibration import lookup_keys_for_token, slot_layout
from .tensorstore import (
    FORMAT_VERSION,
    ModelGeometry,
    SchemaError,
    TraceSet,
    write_tensor_file,
)


@dataclass
class InferenceRequest:
    """Queries to serve, plus their local (non-prefix) key/value blocks.

    Token t self-attends over local_keys[:local_len[t]]; local_len[0] = 0
    models the first decoded token with no local context.
    """

    geometry: ModelGeometry
    pre_rope_q: list[np.ndarray]    # per layer [T, h_q, d_h] f32
    rope_q: list[np.ndarray]        # per layer [T, h_q, d_h] f32
    local_keys: list[np.ndarray]    # per layer [n_local, h_kv, d_h] f32
    local_values: list[np.ndarray]  # per layer [n_local, h_kv, d_h] f32
    local_len: np.ndarray           # [T] int

    @property
    def n_tokens(self) -> int:
        return self.pre_rope_q[0].shape[0]

    def validate(self) -> None:
        g = self.geometry
        if len(self.pre_rope_q) != g.n_layers:
            raise SchemaError("request layer count != geometry")
        n_local = self.local_keys[0].shape[0]
        if (np.asarray(self.local_len) > n_local).any():
            raise SchemaError("local_len exceeds available local tokens")


def request_from_trace(
    traces: TraceSet,
    local_keys: np.ndarray | None = None,
    local_values: np.ndarray | None = None,
    local_len: np.ndarray | None = None,
) -> InferenceRequest:
    """Use a trace's queries as an inference request.

    Without local blocks the request has empty self-attention everywhere.
    """
    g = traces.geometry
    t = traces.n_tokens
    if local_keys is None:
        local_keys = np.zeros((g.n_layers, 0, g.h_kv, g.d_h), dtype=np.float32)
        local_values = np.zeros_like(local_keys)
        local_len = np.zeros(t, dtype=np.uint32)
    if local_values is None or local_len is None:
        raise ValueError("local_keys, local_values, local_len must be given together")
    return InferenceRequest(
        geometry=g,
        pre_rope_q=list(traces.pre_rope_q),
        rope_q=list(traces.rope_q),
        local_keys=[local_keys[i] for i in range(g.n_layers)],
        local_values=[local_values[i] for i in range(g.n_layers)],
        local_len=np.asarray(local_len),
    )


@dataclass
class MergeReport:
    """Per token/layer/slot retrieval decisions and merged states."""

    entry_index: np.ndarray   # [T, n_layers, n_slots] u32
    similarity: np.ndarray    # [T, n_layers, n_slots] f64
    ops_count: np.ndarray     # [T, n_layers, n_slots] u32
    merged_out: np.ndarray    # [T, n_layers, h_q, d_h] f32
    merged_log_z: np.ndarray  # [T, n_layers, h_q] f64
    self_log_z: np.ndarray    # [T, n_layers, h_q] f64

    @property
    def n_tokens(self) -> int:
        return self.entry_index.shape[0]


def infer_merge(
    request: InferenceRequest,
    bank: MemoryBank,
    use_hier: bool = False,
    top_m: int | None = None,
) -> MergeReport:
    """Serve every request token against the bank.

    Per token/layer/slot: build the lookup key, retrieve the best entry
    (flat or hierarchical), compute the token's local self-attention state,
    and merge. The merged mass is always self mass + entry mass.
    """
    request.validate()
    g = request.geometry
    if g != bank.geometry:
        raise SchemaError(f"request geometry {g} != bank geometry {bank.geometry}")
    n_slots, heads_per_slot = slot_layout(g, bank.centroid_org)
    t_total = request.n_tokens

    entry_index = np.zeros((t_total, g.n_layers, n_slots), dtype=np.uint32)
    similarity = np.zeros((t_total, g.n_layers, n_slots), dtype=np.float64)
    ops_count = np.zeros((t_total, g.n_layers, n_slots), dtype=np.uint32)
    merged_out = np.zeros((t_total, g.n_layers, g.h_q, g.d_h), dtype=np.float32)
    merged_log_z = np.zeros((t_total, g.n_layers, g.h_q), dtype=np.float64)
    self_log_z = np.zeros((t_total, g.n_layers, g.h_q), dtype=np.float64)

    for layer in range(g.n_layers):
        wl = bank.whitening.layer(layer) if bank.whitening is not None else None
        for t in range(t_total):
            keys = lookup_keys_for_token(
                request.pre_rope_q[layer][t], bank.mode, wl, g, bank.d_prime, bank.centroid_org
            )
            llen = int(request.local_len[t])
            for s in range(n_slots):
                entries = bank.entries(layer, s)
                if use_hier:
                    index = bank.hier_index(layer, s)
                    if index is None:
                        raise ValueError("bank has no hierarchical index; rebuild with one")
                    res = retrieve_hier(keys[s, 0], index, entries, top_m)
                else:
                    res = retrieve_linear(keys[s, 0], entries)
                entry_index[t, layer, s] = res.index
                similarity[t, layer, s] = res.similarity
                ops_count[t, layer, s] = res.ops_count
                entry = entries[res.index]
                for j in range(heads_per_slot):
                    h = s * heads_per_slot + j
                    kv = g.kv_head_of(h)
                    self_state = attn_with_state(
                        request.rope_q[layer][t, h],
                        request.local_keys[layer][:llen, kv],
                        request.local_values[layer][:llen, kv],
                    )
                    merged = merge(self_state, entry.state(j))
                    merged_out[t, layer, h] = merged.out
                    merged_log_z[t, layer, h] = merged.log_z
                    self_log_z[t, layer, h] = self_state.log_z

    return MergeReport(
        entry_index=entry_index,
        similarity=similarity,
        ops_count=ops_count,
        merged_out=merged_out,
        merged_log_z=merged_log_z,
        self_log_z=self_log_z,
    )


def full_attention_oracle(
    request: InferenceRequest, prefix_keys: np.ndarray, prefix_values: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Ground truth: attention over the true concatenated [prefix; local]
    context. Returns (out [T, n_layers, h_q, d_h], log_z [T, n_layers, h_q])."""
    g = request.geometry
    t_total = request.n_tokens
    out = np.zeros((t_total, g.n_layers, g.h_q, g.d_h), dtype=np.float32)
    log_z = np.zeros((t_total, g.n_layers, g.h_q), dtype=np.float64)
    for layer in range(g.n_layers):
        for t in range(t_total):
            llen = int(request.local_len[t])
            for h in range(g.h_q):
                kv = g.kv_head_of(h)
                keys = np.concatenate(
                    [prefix_keys[layer, :, kv], request.local_keys[layer][:llen, kv]], axis=0
                )
                values = np.concatenate(
                    [prefix_values[layer, :, kv], request.local_values[layer][:llen, kv]], axis=0
                )
                state = attn_with_state(request.rope_q[layer][t, h], keys, values)
                out[t, layer, h] = state.out
                log_z[t, layer, h] = state.log_z
    return out, log_z


def reconstruction_error(
    request: InferenceRequest,
    bank: MemoryBank,
    prefix_keys: np.ndarray,
    prefix_values: np.ndarray,
    *,
    report: MergeReport | None = None,
    use_hier: bool = False,
) -> np.ndarray:
    """Per-token relative L2 error of the merged output against full
    attention over the true [prefix; local] context."""
    if report is None:
        report = infer_merge(request, bank, use_hier=use_hier)
    full_out, _ = full_attention_oracle(request, prefix_keys, prefix_values)
    diff = report.merged_out.astype(np.float64) - full_out.astype(np.float64)
    t_total = request.n_tokens
    num = np.linalg.norm(diff.reshape(t_total, -1), axis=1)
    den = np.linalg.norm(full_out.astype(np.float64).reshape(t_total, -1), axis=1)
    den = np.maximum(den, np.finfo(np.float64).tiny)
    return num / den


def save_report(path: str | Path, report: MergeReport, geometry: ModelGeometry) -> None:
    meta = dict(geometry.meta())
    meta["format_version"] = str(FORMAT_VERSION)
    meta["object"] = "merge_report"
    tensors = {
        "entry_index": report.entry_index.astype(np.uint32),
        "similarity": report.similarity,
        "ops_count": report.ops_count.astype(np.uint32),
        "merged_out": report.merged_out,
        "merged_log_z": report.merged_log_z,
        "self_log_z": report.self_log_z,
    }
    write_tensor_file(path, tensors, meta)


def write_report_csv(
    path: str | Path, report: MergeReport, errors: np.ndarray | None = None
) -> None:
    """Human-readable summary: one row per (token, layer, group)."""
    t_total, n_layers, n_slots = report.entry_index.shape
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["token", "layer", "group", "entry", "similarity", "error"])
        for t in range(t_total):
            err = "" if errors is None else f"{errors[t]:.8g}"
            for layer in range(n_layers):
                for s in range(n_slots):
                    writer.writerow(
                        [
                            t,
                            layer,
                            s,
                            int(report.entry_index[t, layer, s]),
                            f"{report.similarity[t, layer, s]:.8g}",
                            err,
                        ]
                    )
