"""Memory-bank construction from calibration traces.

Pipeline per layer: select the lookup-key representation (pre-rotary query,
or the query rotated to a shared virtual position), optionally whiten each
head, concatenate the heads of each KV group and split the concatenation
into d'-sized chunk keys, cluster the keys with mini-batch spherical
k-means, and finalize every cluster into one entry whose output is the
mass-weighted mean of its members and whose mass is the member average.

Everything downstream of the trace is a pure function of
(traces, mode, spec, d_prime): two runs with the same inputs produce
bit-identical banks, regardless of thread count.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .attention import AttentionState, RopeConfig, apply_rope, merge
from .tensorstore import ModelGeometry, TraceSet
from .bank import HierarchicalIndex, MemoryBank, MemoryEntries, MemoryEntry, build_hier_index

PRE_ROPE = "pre_rope"
ROPE_UNIFIED = "rope_unified"

INDIVIDUAL = "individual"
JOINT = "joint"

DEFAULT_EPSILON_SCALE = 1e-5
DEFAULT_WHITEN_SUBSAMPLE = 4096


class CapacityError(RuntimeError):
    """Raised when more than half of the requested clusters end up empty,
    i.e. the calibration set cannot populate a codebook of the requested size."""


@dataclass(frozen=True)
class KeyMode:
    """Lookup-key representation: rotary handling plus optional whitening."""

    rope: str = PRE_ROPE
    whitening: bool = False
    virtual_position: int = 0

    def __post_init__(self) -> None:
        if self.rope not in (PRE_ROPE, ROPE_UNIFIED):
            raise ValueError(f"rope must be {PRE_ROPE!r} or {ROPE_UNIFIED!r}")
        if self.virtual_position < 0:
            raise ValueError("virtual_position must be >= 0")


@dataclass
class WhiteningTransform:
    """Per-layer, per-head inverse square root of the key sample covariance."""

    per_head: np.ndarray  # [n_layers, h_q, d_h, d_h] f64

    def layer(self, layer: int) -> np.ndarray:
        return self.per_head[layer]

    def validate_spd(self, tol: float = 1e-6) -> None:
        mats = self.per_head
        sym_err = np.abs(mats - np.swapaxes(mats, -1, -2)).max()
        if sym_err > tol:
            raise ValueError(f"whitening matrices not symmetric (err {sym_err:.2e})")
        for layer in range(mats.shape[0]):
            for head in range(mats.shape[1]):
                evals = np.linalg.eigvalsh(mats[layer, head])
                if evals.min() <= -tol:
                    raise ValueError("whitening matrix not positive definite")


@dataclass(frozen=True)
class ClusterSpec:
    """Mini-batch spherical k-means configuration."""

    k: int
    iterations: int = 20
    batch_size: int = 1024
    seed: int = 0
    centroid_org: str = INDIVIDUAL

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.centroid_org not in (INDIVIDUAL, JOINT):
            raise ValueError(f"centroid_org must be {INDIVIDUAL!r} or {JOINT!r}")


@dataclass(frozen=True)
class CalibSample:
    """One lookup key paired with the attention state of its KV group."""

    key: np.ndarray    # [d'] f32
    out: np.ndarray    # [heads_covered, d_h] f32
    log_z: np.ndarray  # [heads_covered] f64


def fit_whitening(queries: np.ndarray, epsilon_scale: float = DEFAULT_EPSILON_SCALE) -> np.ndarray:
    """Fit (Sigma + eps I)^(-1/2) for one head's query sample.

    eps = epsilon_scale * trace(Sigma) / d_h; eigenvalues are clamped at eps
    so rank-deficient samples still yield a finite transform.
    """
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim != 2:
        raise ValueError("queries must be 2-D [n, d_h]")
    n, d_h = queries.shape
    if n < 2:
        raise ValueError("need at least 2 samples to fit whitening")
    if not np.isfinite(queries).all():
        raise ValueError("non-finite input")
    cov = np.atleast_2d(np.cov(queries, rowvar=False))
    eps = epsilon_scale * np.trace(cov) / d_h
    if eps <= 0.0:
        eps = np.finfo(np.float64).tiny
    evals, evecs = np.linalg.eigh(cov)
    clamped = np.maximum(evals + eps, eps)
    mat = (evecs * clamped**-0.5) @ evecs.T
    return (mat + mat.T) / 2.0


def _mode_queries(traces: TraceSet, layer: int, mode: KeyMode) -> np.ndarray:
    """Per-head key representation before whitening: [T, h_q, d_h] f64."""
    q = traces.pre_rope_q[layer].astype(np.float64)
    if mode.rope == ROPE_UNIFIED:
        q = apply_rope(q, mode.virtual_position, RopeConfig())
    return q


def fit_whitening_transform(
    traces: TraceSet,
    mode: KeyMode,
    seed: int,
    epsilon_scale: float = DEFAULT_EPSILON_SCALE,
    max_samples: int = DEFAULT_WHITEN_SUBSAMPLE,
) -> WhiteningTransform:
    """Fit per-layer, per-head whitening on a seeded token subsample."""
    g = traces.geometry
    mats = np.empty((g.n_layers, g.h_q, g.d_h, g.d_h), dtype=np.float64)
    for layer in range(g.n_layers):
        rng = np.random.default_rng(_child_seed(seed, layer))
        q = _mode_queries(traces, layer, mode)
        n = q.shape[0]
        if n > max_samples:
            idx = np.sort(rng.choice(n, size=max_samples, replace=False))
            q = q[idx]
        for head in range(g.h_q):
            mats[layer, head] = fit_whitening(q[:, head, :], epsilon_scale)
    return WhiteningTransform(per_head=mats)


def _child_seed(seed: int, *path: int) -> int:
    """Stable per-(layer, slot) seed derivation."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(path))
    return int(ss.generate_state(1)[0])


def slot_layout(geometry: ModelGeometry, centroid_org: str) -> tuple[int, int]:
    """(n_slots, heads_per_slot) for the chosen centroid organization."""
    if centroid_org == JOINT:
        return 1, geometry.h_q
    return geometry.h_kv, geometry.group_size


def lookup_keys_for_token(
    pre_rope_q: np.ndarray,
    mode: KeyMode,
    whiten_layer: np.ndarray | None,
    geometry: ModelGeometry,
    d_prime: int,
    centroid_org: str = INDIVIDUAL,
) -> np.ndarray:
    """Build the lookup keys of one token: [n_slots, n_chunks, d'] f32.

    This is the single code path shared by calibration and inference, so a
    calibration record fed back through inference reproduces its keys
    bit-exactly.
    """
    n_slots, heads_per_slot = slot_layout(geometry, centroid_org)
    slot_dim = heads_per_slot * geometry.d_h
    if slot_dim % d_prime != 0:
        raise ValueError(
            f"d_prime ({d_prime}) must divide the per-slot key dimension ({slot_dim})"
        )
    if mode.whitening != (whiten_layer is not None):
        raise ValueError("whitening transform must be given iff mode.whitening")
    q = np.asarray(pre_rope_q, dtype=np.float64)
    if q.shape != (geometry.h_q, geometry.d_h):
        raise ValueError(f"query shape {q.shape} != ({geometry.h_q}, {geometry.d_h})")
    if mode.rope == ROPE_UNIFIED:
        q = apply_rope(q, mode.virtual_position, RopeConfig())
    if whiten_layer is not None:
        q = np.einsum("hij,hj->hi", whiten_layer, q)
    return q.reshape(n_slots, -1, d_prime).astype(np.float32)


@dataclass(frozen=True)
class TraceRecord:
    """One token's view of a trace layer."""

    pre_rope_q: np.ndarray  # [h_q, d_h]
    rope_q: np.ndarray      # [h_q, d_h]
    attn_out: np.ndarray    # [h_q, d_h]
    log_z: np.ndarray       # [h_q]


def trace_record(traces: TraceSet, layer: int, token: int) -> TraceRecord:
    return TraceRecord(
        pre_rope_q=traces.pre_rope_q[layer][token],
        rope_q=traces.rope_q[layer][token],
        attn_out=traces.attn_out[layer][token],
        log_z=traces.log_z[layer][token],
    )


def make_lookup_key(
    record: TraceRecord,
    mode: KeyMode,
    whiten_layer: np.ndarray | None,
    geometry: ModelGeometry,
    d_prime: int,
    centroid_org: str = INDIVIDUAL,
) -> list[list[CalibSample]]:
    """Turn one trace record into keyed samples, grouped per slot.

    Each slot (KV group, or the whole layer under joint organization) emits
    slot_dim / d' samples; every sample of a slot carries that slot's full
    attention state.
    """
    keys = lookup_keys_for_token(
        record.pre_rope_q, mode, whiten_layer, geometry, d_prime, centroid_org
    )
    n_slots, heads_per_slot = slot_layout(geometry, centroid_org)
    samples: list[list[CalibSample]] = []
    for s in range(n_slots):
        lo, hi = s * heads_per_slot, (s + 1) * heads_per_slot
        out = record.attn_out[lo:hi].astype(np.float32)
        log_z = record.log_z[lo:hi].astype(np.float64)
        samples.append(
            [CalibSample(key=keys[s, j], out=out, log_z=log_z) for j in range(keys.shape[1])]
        )
    return samples


@dataclass
class KMeansResult:
    """Outcome of mini-batch spherical k-means.

    centroids are unit-norm and only the non-empty clusters are kept;
    assignments index into the kept clusters.
    """

    centroids: np.ndarray    # [k_kept, d] f64, unit rows
    assignments: np.ndarray  # [n] int
    counts: np.ndarray       # [k_kept] int
    n_requested: int
    n_dropped: int

    def members(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.assignments == c) for c in range(len(self.centroids))]


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding on unit vectors; squared distance 2 - 2 cos."""
    m = points.shape[0]
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    centroids[0] = points[int(rng.integers(m))]
    d2 = np.maximum(2.0 - 2.0 * (points @ centroids[0]), 0.0)
    for j in range(1, k):
        total = float(d2.sum())
        if total <= 0.0:
            # All points coincide with chosen centroids; surplus centroids
            # duplicate the first and stay empty under lowest-index ties.
            centroids[j:] = centroids[0]
            break
        pick = int(rng.choice(m, p=d2 / total))
        centroids[j] = points[pick]
        d2 = np.minimum(d2, np.maximum(2.0 - 2.0 * (points @ centroids[j]), 0.0))
    return centroids


def _reseed_empty(
    centroids: np.ndarray,
    counts: np.ndarray,
    batch: np.ndarray,
    sims: np.ndarray,
    assign: np.ndarray,
) -> None:
    """Move never-populated centroids onto the batch samples farthest from
    their assigned centroid. Samples already sitting on a centroid (cosine
    ~ 1) are skipped so duplicate-only data leaves surplus clusters empty."""
    empty = np.flatnonzero(counts == 0)
    if empty.size == 0:
        return
    assigned_sim = sims[np.arange(len(batch)), assign]
    order = np.argsort(assigned_sim, kind="stable")  # farthest first
    ptr = 0
    for c in empty:
        while ptr < len(order) and assigned_sim[order[ptr]] >= 1.0 - 1e-12:
            ptr += 1
        if ptr >= len(order):
            break
        centroids[c] = batch[order[ptr]]
        ptr += 1


def minibatch_kmeans(keys: np.ndarray, spec: ClusterSpec) -> KMeansResult:
    """Cluster lookup keys with mini-batch spherical k-means.

    Keys are L2-normalized first; assignment is by maximum cosine
    similarity with ties going to the lowest centroid index. Seeding is
    k-means++ on the first batch. Batches walk the sample stream
    sequentially (wrapping), so the result is a deterministic function of
    (key order, seed). When batch_size covers the whole sample the update
    is classic full-batch spherical k-means; otherwise centroids follow a
    count-weighted running mean, renormalized per batch. Clusters that end
    empty are dropped with a warning.
    """
    keys = np.asarray(keys, dtype=np.float64)
    if keys.ndim != 2 or keys.shape[0] == 0:
        raise ValueError("keys must be a non-empty 2-D array")
    norms = np.linalg.norm(keys, axis=1)
    if (norms == 0.0).any():
        raise ValueError("zero-norm key")
    unit = keys / norms[:, None]
    n = unit.shape[0]
    rng = np.random.default_rng(spec.seed)

    first = unit[: min(spec.batch_size, n)]
    centroids = _kmeans_pp(first, spec.k, rng)
    counts = np.zeros(spec.k, dtype=np.int64)
    full_batch = spec.batch_size >= n

    for it in range(spec.iterations):
        if full_batch:
            batch = unit
        else:
            start = (it * spec.batch_size) % n
            idx = np.arange(start, start + spec.batch_size) % n
            batch = unit[idx]
        sims = batch @ centroids.T
        assign = np.argmax(sims, axis=1)
        batch_counts = np.bincount(assign, minlength=spec.k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, batch)
        if full_batch:
            nonzero = batch_counts > 0
            means = sums[nonzero] / batch_counts[nonzero, None]
            mnorm = np.linalg.norm(means, axis=1)
            keep = mnorm > 0.0
            rows = np.flatnonzero(nonzero)[keep]
            centroids[rows] = means[keep] / mnorm[keep, None]
            counts = batch_counts.astype(np.int64)
        else:
            updated = (counts[:, None] * centroids + sums) / np.maximum(
                counts + batch_counts, 1
            )[:, None]
            rows = np.flatnonzero(batch_counts > 0)
            unorm = np.linalg.norm(updated[rows], axis=1)
            ok = unorm > 0.0
            centroids[rows[ok]] = updated[rows[ok]] / unorm[ok, None]
            counts += batch_counts
        _reseed_empty(centroids, counts, batch, sims, assign)

    sims_all = unit @ centroids.T
    assignments = np.argmax(sims_all, axis=1)
    final_counts = np.bincount(assignments, minlength=spec.k)
    kept = np.flatnonzero(final_counts > 0)
    n_dropped = spec.k - kept.size
    if n_dropped > 0:
        warnings.warn(
            f"dropping {n_dropped} empty cluster(s) of {spec.k}; "
            "calibration data may be too small for this entry count",
            stacklevel=2,
        )
    remap = np.full(spec.k, -1, dtype=np.int64)
    remap[kept] = np.arange(kept.size)
    return KMeansResult(
        centroids=centroids[kept],
        assignments=remap[assignments],
        counts=final_counts[kept].astype(np.int64),
        n_requested=spec.k,
        n_dropped=n_dropped,
    )


def aggregate_cluster(members: Sequence[CalibSample]) -> MemoryEntry:
    """Finalize one cluster into a memory entry.

    key = arithmetic mean of member keys; per head, mass = member average
    (so the entry acts like one average token block, not an ever-growing
    merge) and output = mass-weighted mean of member outputs. Mass math
    runs in log domain.
    """
    if len(members) == 0:
        raise ValueError("empty cluster")
    m = len(members)
    key = np.mean([s.key.astype(np.float64) for s in members], axis=0)
    log_z = np.stack([s.log_z for s in members])            # [m, heads]
    out = np.stack([s.out.astype(np.float64) for s in members])  # [m, heads, d_h]
    peak = log_z.max(axis=0)
    log_sum = peak + np.log(np.exp(log_z - peak).sum(axis=0))
    weights = np.exp(log_z - log_sum)                       # [m, heads]
    agg_out = np.einsum("mh,mhd->hd", weights, out)
    return MemoryEntry(
        key=key.astype(np.float32),
        out=agg_out.astype(np.float32),
        log_z=log_sum - np.log(m),
    )


def _collect_layer_samples(
    traces: TraceSet,
    layer: int,
    mode: KeyMode,
    whiten_layer: np.ndarray | None,
    d_prime: int,
    centroid_org: str,
) -> list[list[CalibSample]]:
    """All samples of one layer, grouped per slot."""
    n_slots, _ = slot_layout(traces.geometry, centroid_org)
    per_slot: list[list[CalibSample]] = [[] for _ in range(n_slots)]
    for t in range(traces.n_tokens):
        rec = trace_record(traces, layer, t)
        nested = make_lookup_key(rec, mode, whiten_layer, traces.geometry, d_prime, centroid_org)
        for s in range(n_slots):
            per_slot[s].extend(nested[s])
    return per_slot


def _build_layer(
    traces: TraceSet,
    layer: int,
    mode: KeyMode,
    spec: ClusterSpec,
    d_prime: int,
    whiten_layer: np.ndarray | None,
    strict_capacity: bool,
) -> list[MemoryEntries]:
    slots: list[MemoryEntries] = []
    per_slot = _collect_layer_samples(traces, layer, mode, whiten_layer, d_prime, spec.centroid_org)
    for s, samples in enumerate(per_slot):
        keys = np.stack([smp.key for smp in samples])
        km = minibatch_kmeans(keys, replace(spec, seed=_child_seed(spec.seed, layer, s)))
        if 2 * km.n_dropped > km.n_requested:
            msg = (
                f"layer {layer} slot {s}: {km.n_dropped}/{km.n_requested} clusters "
                "empty; calibration data cannot populate this entry count"
            )
            if strict_capacity:
                raise CapacityError(msg)
            warnings.warn(msg, stacklevel=2)
        entries = [
            aggregate_cluster([samples[i] for i in idx]) for idx in km.members()
        ]
        slots.append(MemoryEntries.from_entries(entries))
    return slots


def build_bank(
    traces: TraceSet,
    mode: KeyMode,
    spec: ClusterSpec,
    d_prime: int,
    *,
    strict_capacity: bool = True,
    threads: int = 1,
    epsilon_scale: float = DEFAULT_EPSILON_SCALE,
    whitening_subsample: int = DEFAULT_WHITEN_SUBSAMPLE,
    hier_n_l1: int = 0,
    hier_top_m: int = 16,
) -> MemoryBank:
    """Run the full calibration pipeline and return the finished bank.

    Layers build independently; `threads` > 1 parallelizes across layers
    without changing the result. hier_n_l1 > 0 additionally builds a
    two-level retrieval index per layer slot.
    """
    traces.validate()
    g = traces.geometry
    whitening = (
        fit_whitening_transform(traces, mode, spec.seed, epsilon_scale, whitening_subsample)
        if mode.whitening
        else None
    )

    def job(layer: int) -> list[MemoryEntries]:
        wl = whitening.layer(layer) if whitening is not None else None
        return _build_layer(traces, layer, mode, spec, d_prime, wl, strict_capacity)

    if threads > 1 and g.n_layers > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            layers = list(pool.map(job, range(g.n_layers)))
    else:
        layers = [job(layer) for layer in range(g.n_layers)]

    hier: list[list[HierarchicalIndex | None]] | None = None
    if hier_n_l1 > 0:
        hier = []
        for layer in range(g.n_layers):
            row: list[HierarchicalIndex | None] = []
            for s, entries in enumerate(layers[layer]):
                n_l1 = min(hier_n_l1, len(entries))
                row.append(
                    build_hier_index(
                        entries, n_l1, _child_seed(spec.seed, layer, s, 1), top_m=hier_top_m
                    )
                )
            hier.append(row)

    return MemoryBank(
        geometry=g,
        mode=mode,
        whitening=whitening,
        d_prime=d_prime,
        centroid_org=spec.centroid_org,
        k=spec.k,
        seed=spec.seed,
        prefix_len=traces.prefix_len,
        layers=layers,
        hier=hier,
    )


def merge_chunk_traces(chunk_traces: Sequence[TraceSet]) -> TraceSet:
    """Combine per-chunk prefix states into full-prefix states.

    All chunks must share geometry, token counts, and (bitwise-close)
    queries; states over the disjoint prefix chunks are folded with the
    merge operator, which recovers the state over the concatenated prefix.
    """
    if len(chunk_traces) == 0:
        raise ValueError("no chunk traces given")
    head = chunk_traces[0]
    g = head.geometry
    for c in chunk_traces[1:]:
        if c.geometry != g:
            raise ValueError("geometry mismatch between chunks")
        if c.n_tokens != head.n_tokens:
            raise ValueError("misaligned token counts between chunks")
        for layer in range(g.n_layers):
            if not np.allclose(c.pre_rope_q[layer], head.pre_rope_q[layer], rtol=1e-5, atol=0):
                raise ValueError("chunk query sets are not aligned")
    merged = TraceSet(geometry=g, prefix_len=sum(c.prefix_len for c in chunk_traces))
    for layer in range(g.n_layers):
        out = np.empty_like(head.attn_out[layer])
        logz = np.empty_like(head.log_z[layer])
        for t in range(head.n_tokens):
            for h in range(g.h_q):
                state = AttentionState(
                    out=chunk_traces[0].attn_out[layer][t, h],
                    log_z=float(chunk_traces[0].log_z[layer][t, h]),
                )
                for c in chunk_traces[1:]:
                    state = merge(
                        state,
                        AttentionState(
                            out=c.attn_out[layer][t, h],
                            log_z=float(c.log_z[layer][t, h]),
                        ),
                    )
                out[t, h] = state.out
                logz[t, h] = state.log_z
        merged.pre_rope_q.append(head.pre_rope_q[layer])
        merged.rope_q.append(head.rope_q[layer])
        merged.attn_out.append(out)
        merged.log_z.append(logz)
    return merged


def build_bank_chunked(
    chunk_traces: Sequence[TraceSet],
    mode: KeyMode,
    spec: ClusterSpec,
    d_prime: int,
    **kwargs,
) -> MemoryBank:
    """Build a bank from independently encoded prefix chunks."""
    return build_bank(merge_chunk_traces(chunk_traces), mode, spec, d_prime, **kwargs)
