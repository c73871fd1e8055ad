"""Immutable per-layer dictionaries of precomputed attention states, with
flat and two-level retrieval plus lossless serialization.

Entries are packed as arrays (keys, outputs, masses) per layer slot; a slot
is one KV group under individual centroid organization, or the whole layer
under joint organization. Retrieval is cosine-based and returns an exact
count of similarity evaluations alongside the result, which is the cost
metric everywhere in this toolkit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Iterator, NamedTuple, Sequence

import numpy as np

from .attention import AttentionState
from .tensorstore import (
    FORMAT_VERSION,
    ModelGeometry,
    SchemaError,
    read_tensor_file,
    write_tensor_file,
)

if TYPE_CHECKING:  # import cycle: calibration imports this module eagerly
    from .calibration import KeyMode, WhiteningTransform


@dataclass(frozen=True)
class MemoryEntry:
    """One dictionary entry: lookup key plus aggregated attention state."""

    key: np.ndarray    # [d'] f32
    out: np.ndarray    # [heads_covered, d_h] f32
    log_z: np.ndarray  # [heads_covered] f64

    def state(self, head: int) -> AttentionState:
        return AttentionState(out=self.out[head], log_z=float(self.log_z[head]))


class MemoryEntries:
    """Packed entry collection for one layer slot."""

    def __init__(self, keys: np.ndarray, out: np.ndarray, log_z: np.ndarray):
        keys = np.asarray(keys, dtype=np.float32)
        out = np.asarray(out, dtype=np.float32)
        log_z = np.asarray(log_z, dtype=np.float64)
        if keys.ndim != 2 or out.ndim != 3 or log_z.ndim != 2:
            raise ValueError("expected keys [K,d'], out [K,H,d_h], log_z [K,H]")
        if not (len(keys) == len(out) == len(log_z)):
            raise ValueError("entry arrays disagree on K")
        if len(keys) == 0:
            raise ValueError("entry collection may not be empty")
        # log_z = -inf is the legitimate zero-mass limit; NaN/+inf are not
        if not (np.isfinite(keys).all() and np.isfinite(out).all()):
            raise ValueError("entries must be finite")
        if np.isnan(log_z).any() or (log_z == np.inf).any():
            raise ValueError("entry masses must be finite or -inf")
        norms = np.linalg.norm(keys.astype(np.float64), axis=1)
        if (norms == 0.0).any():
            raise ValueError("entry keys must have nonzero norm")
        self.keys = keys
        self.out = out
        self.log_z = log_z
        self._unit_keys = keys.astype(np.float64) / norms[:, None]

    @classmethod
    def from_entries(cls, entries: Sequence[MemoryEntry]) -> "MemoryEntries":
        return cls(
            keys=np.stack([e.key for e in entries]),
            out=np.stack([e.out for e in entries]),
            log_z=np.stack([e.log_z for e in entries]),
        )

    @property
    def unit_keys(self) -> np.ndarray:
        return self._unit_keys

    @property
    def d_prime(self) -> int:
        return self.keys.shape[1]

    def __len__(self) -> int:
        return len(self.keys)

    def __getitem__(self, i: int) -> MemoryEntry:
        return MemoryEntry(key=self.keys[i], out=self.out[i], log_z=self.log_z[i])

    def __iter__(self) -> Iterator[MemoryEntry]:
        return (self[i] for i in range(len(self)))


class RetrievalResult(NamedTuple):
    index: int
    similarity: float
    ops_count: int


def _unit_query(query_key: np.ndarray) -> np.ndarray:
    q = np.asarray(query_key, dtype=np.float64)
    norm = np.linalg.norm(q)
    if norm == 0.0:
        raise ValueError("zero-norm query key")
    return q / norm


def retrieve_linear(query_key: np.ndarray, entries: MemoryEntries) -> RetrievalResult:
    """Exhaustive cosine argmax over all entries; ops_count = K.

    Ties go to the lowest entry index.
    """
    if len(entries) == 0:
        raise ValueError("empty entry list")
    sims = entries.unit_keys @ _unit_query(query_key)
    idx = int(np.argmax(sims))
    return RetrievalResult(index=idx, similarity=float(sims[idx]), ops_count=len(entries))


@dataclass
class HierarchicalIndex:
    """Two-level retrieval index over one entry collection.

    l1_keys are unit first-level centroids; buckets partition the entry
    indices (every bucket non-empty, every entry in exactly one bucket).
    top_m is the first-level fan-out used at query time.
    """

    l1_keys: np.ndarray            # [n_l1, d'] f32, unit rows
    buckets: list[np.ndarray]      # per first-level centroid, entry indices (u32)
    top_m: int = 16
    _unit_l1: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def n_l1(self) -> int:
        return len(self.l1_keys)

    @property
    def unit_l1(self) -> np.ndarray:
        if self._unit_l1 is None:
            keys = self.l1_keys.astype(np.float64)
            self._unit_l1 = keys / np.linalg.norm(keys, axis=1, keepdims=True)
        return self._unit_l1

    def validate(self, n_entries: int) -> None:
        if not 1 <= self.top_m:
            raise ValueError("top_m must be >= 1")
        if len(self.buckets) != self.n_l1:
            raise ValueError("bucket count != n_l1")
        seen = np.concatenate([b for b in self.buckets]) if self.buckets else np.array([])
        if len(seen) != n_entries or len(np.unique(seen)) != n_entries:
            raise ValueError("buckets do not partition the entry set")


def build_hier_index(
    entries: MemoryEntries, n_l1: int, seed: int, top_m: int = 16
) -> HierarchicalIndex:
    """Cluster entry keys into first-level centroids (same spherical
    k-means as calibration) and bucket the entries by assignment.

    Empty first-level clusters are dropped, so every bucket is non-empty
    and any top_m >= 1 scan is guaranteed candidates.
    """
    from .calibration import ClusterSpec, minibatch_kmeans

    if not 1 <= n_l1 <= len(entries):
        raise ValueError(f"n_l1 must be in [1, {len(entries)}], got {n_l1}")
    spec = ClusterSpec(k=n_l1, iterations=25, batch_size=len(entries), seed=seed)
    km = minibatch_kmeans(entries.keys, spec)
    buckets = [idx.astype(np.uint32) for idx in km.members()]
    index = HierarchicalIndex(
        l1_keys=km.centroids.astype(np.float32),
        buckets=buckets,
        top_m=min(top_m, len(buckets)),
    )
    index.validate(len(entries))
    return index


def retrieve_hier(
    query_key: np.ndarray,
    index: HierarchicalIndex,
    entries: MemoryEntries,
    top_m: int | None = None,
) -> RetrievalResult:
    """Two-level retrieval: scan all first-level keys, expand the top_m
    buckets, scan their union; ops_count = n_l1 + scanned entries.

    Ties break to the lowest index at both levels.
    """
    fan_out = index.top_m if top_m is None else top_m
    if not 1 <= fan_out <= index.n_l1:
        raise ValueError(f"top_m must be in [1, {index.n_l1}], got {fan_out}")
    q = _unit_query(query_key)
    l1_sims = index.unit_l1 @ q
    order = np.argsort(-l1_sims, kind="stable")[:fan_out]
    candidates = np.sort(np.concatenate([index.buckets[c] for c in order]))
    assert candidates.size > 0, "bucket union empty despite partition invariant"
    sims = entries.unit_keys[candidates] @ q
    best = int(np.argmax(sims))
    return RetrievalResult(
        index=int(candidates[best]),
        similarity=float(sims[best]),
        ops_count=index.n_l1 + int(candidates.size),
    )


@dataclass
class MemoryBank:
    """Per-layer dictionary of aggregated attention states plus everything
    needed to reproduce its lookup-key pipeline at inference time."""

    geometry: ModelGeometry
    mode: "KeyMode"
    whitening: "WhiteningTransform | None"
    d_prime: int
    centroid_org: str
    k: int
    seed: int
    prefix_len: int
    layers: list[list[MemoryEntries]]                  # [layer][slot]
    hier: list[list[HierarchicalIndex | None]] | None = None

    @property
    def n_slots(self) -> int:
        return len(self.layers[0])

    def entries(self, layer: int, slot: int) -> MemoryEntries:
        return self.layers[layer][slot]

    def hier_index(self, layer: int, slot: int) -> HierarchicalIndex | None:
        if self.hier is None:
            return None
        return self.hier[layer][slot]

    def validate(self) -> None:
        if not self.layers or not self.layers[0]:
            raise SchemaError("bank has no layers or no entry slots")
        if len(self.layers) != self.geometry.n_layers:
            raise SchemaError("bank layer count != geometry")
        if self.mode.whitening and self.whitening is None:
            raise SchemaError("mode.whitening set but no whitening transform stored")
        for layer_slots in self.layers:
            if len(layer_slots) != self.n_slots:
                raise SchemaError("uneven slot counts across layers")
            for entries in layer_slots:
                if len(entries) < 1:
                    raise SchemaError("empty entry collection in bank")
                if len(entries) > self.k:
                    raise SchemaError("entry count exceeds configured k")


def serialize_bank(bank: MemoryBank, path: str | Path) -> Path:
    """Write a bank (and its hierarchical indices, if any) to one container
    file. Re-serializing a deserialized bank is byte-identical."""
    bank.validate()
    g = bank.geometry
    meta = dict(g.meta())
    meta["prefix_len"] = str(bank.prefix_len)
    meta["format_version"] = str(FORMAT_VERSION)
    meta["object"] = "bank"
    meta["key_mode"] = bank.mode.rope
    meta["whitening"] = "1" if bank.mode.whitening else "0"
    meta["d_prime"] = str(bank.d_prime)
    meta["k"] = str(bank.k)
    meta["seed"] = str(bank.seed)
    meta["centroid_org"] = bank.centroid_org
    meta["virtual_position"] = str(bank.mode.virtual_position)
    meta["has_hier"] = "1" if bank.hier is not None else "0"
    if bank.hier is not None:
        top_m = next(
            (ix.top_m for row in bank.hier for ix in row if ix is not None), 16
        )
        meta["hier_top_m"] = str(top_m)

    tensors: dict[str, np.ndarray] = {}
    if bank.whitening is not None:
        for layer in range(g.n_layers):
            tensors[f"whiten.layer{layer}"] = bank.whitening.per_head[layer]
    for layer in range(g.n_layers):
        for s in range(bank.n_slots):
            entries = bank.entries(layer, s)
            base = f"bank.layer{layer}.slot{s}"
            tensors[f"{base}.keys"] = entries.keys
            tensors[f"{base}.out"] = entries.out
            tensors[f"{base}.log_z"] = entries.log_z
            index = bank.hier_index(layer, s)
            if index is not None:
                sizes = [len(b) for b in index.buckets]
                offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.uint32)
                tensors[f"{base}.hier_l1"] = index.l1_keys
                tensors[f"{base}.hier_offsets"] = offsets
                tensors[f"{base}.hier_members"] = (
                    np.concatenate(index.buckets).astype(np.uint32)
                    if index.buckets
                    else np.zeros(0, dtype=np.uint32)
                )
    path = Path(path)
    write_tensor_file(path, tensors, meta)
    return path


def deserialize_bank(path: str | Path) -> MemoryBank:
    from .calibration import KeyMode, WhiteningTransform

    tensors, meta = read_tensor_file(path)
    if meta.get("object") != "bank":
        raise SchemaError("not a bank file")
    g = ModelGeometry.from_meta(meta)
    mode = KeyMode(
        rope=meta["key_mode"],
        whitening=meta["whitening"] == "1",
        virtual_position=int(meta["virtual_position"]),
    )
    whitening = None
    if mode.whitening:
        mats = []
        for layer in range(g.n_layers):
            name = f"whiten.layer{layer}"
            if name not in tensors:
                raise SchemaError(f"mode.whitening set but tensor {name} missing")
            mats.append(tensors[name])
        whitening = WhiteningTransform(per_head=np.stack(mats))

    layers: list[list[MemoryEntries]] = []
    has_hier = meta.get("has_hier") == "1"
    hier: list[list[HierarchicalIndex | None]] | None = [] if has_hier else None
    top_m = int(meta.get("hier_top_m", "16"))
    layer = 0
    while f"bank.layer{layer}.slot0.keys" in tensors:
        slots: list[MemoryEntries] = []
        hier_row: list[HierarchicalIndex | None] = []
        s = 0
        while f"bank.layer{layer}.slot{s}.keys" in tensors:
            base = f"bank.layer{layer}.slot{s}"
            slots.append(
                MemoryEntries(
                    keys=tensors[f"{base}.keys"],
                    out=tensors[f"{base}.out"],
                    log_z=tensors[f"{base}.log_z"],
                )
            )
            if f"{base}.hier_l1" in tensors:
                offsets = tensors[f"{base}.hier_offsets"]
                members = tensors[f"{base}.hier_members"]
                buckets = [
                    members[offsets[i] : offsets[i + 1]]
                    for i in range(len(offsets) - 1)
                ]
                hier_row.append(
                    HierarchicalIndex(
                        l1_keys=tensors[f"{base}.hier_l1"], buckets=buckets, top_m=top_m
                    )
                )
            else:
                hier_row.append(None)
            s += 1
        layers.append(slots)
        if hier is not None:
            hier.append(hier_row)
        layer += 1
    if layer != g.n_layers:
        raise SchemaError(f"bank has {layer} layers, metadata says {g.n_layers}")

    bank = MemoryBank(
        geometry=g,
        mode=mode,
        whitening=whitening,
        d_prime=int(meta["d_prime"]),
        centroid_org=meta["centroid_org"],
        k=int(meta["k"]),
        seed=int(meta["seed"]),
        prefix_len=int(meta["prefix_len"]),
        layers=layers,
        hier=hier,
    )
    bank.validate()
    return bank
