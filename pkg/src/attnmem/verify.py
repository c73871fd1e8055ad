"""Self-contained invariant suite behind the `verify` subcommand.

Each check generates its own synthetic inputs from the given seed, runs the
real pipeline, and reports pass/fail with a measured figure. Exit status is
the only contract the CLI adds on top.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import reduce
from typing import Callable

import numpy as np

from .accounting import TrafficModel, asm_traffic, gqa_traffic
from .attention import AttentionState, attn_with_state, decompose_check, merge
from .bank import build_hier_index, retrieve_hier, retrieve_linear
from .calibration import (
    ClusterSpec,
    KeyMode,
    build_bank,
    build_bank_chunked,
    fit_whitening,
    merge_chunk_traces,
)
from .synth import SynthSpec, generate
from .tensorstore import ModelGeometry


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def check_decomposition(seed: int, precision: str = "f32") -> CheckResult:
    """Merged per-block states must equal attention over the concatenation."""
    rng = np.random.default_rng(seed)
    dtype = np.float32 if precision == "f32" else np.float64
    tol = 1e-5 if precision == "f32" else 1e-12
    worst = 0.0
    for _ in range(200):
        d_h = int(rng.choice([4, 8, 64]))
        n_blocks = int(rng.integers(1, 9))
        q = rng.standard_normal(d_h).astype(dtype)
        blocks = []
        for _ in range(n_blocks):
            n = int(rng.integers(1, 33))
            blocks.append(
                (
                    rng.standard_normal((n, d_h)).astype(dtype),
                    rng.standard_normal((n, d_h)).astype(dtype),
                )
            )
        _, _, err = decompose_check(q, blocks)
        worst = max(worst, err)
    return CheckResult(
        "decomposition", worst <= tol, f"max rel err {worst:.3e} (tol {tol:.0e})"
    )


def check_merge_algebra(seed: int, precision: str = "f32") -> CheckResult:
    """Commutativity, associativity, identity, and mass additivity."""
    rng = np.random.default_rng(seed)
    dtype = np.float32 if precision == "f32" else np.float64
    tol = 1e-6
    worst = 0.0
    for _ in range(300):
        d_h = 8
        q = rng.standard_normal(d_h).astype(dtype)
        def random_state():
            n = int(rng.integers(1, 9))
            return attn_with_state(
                q,
                rng.standard_normal((n, d_h)).astype(dtype),
                rng.standard_normal((n, d_h)).astype(dtype),
            )

        s1, s2, s3 = random_state(), random_state(), random_state()
        ab = merge(s1, s2)
        ba = merge(s2, s1)
        worst = max(worst, float(np.abs(ab.out - ba.out).max() / max(np.abs(ba.out).max(), 1e-30)))
        left = merge(merge(s1, s2), s3)
        right = merge(s1, merge(s2, s3))
        worst = max(
            worst, float(np.abs(left.out - right.out).max() / max(np.abs(right.out).max(), 1e-30))
        )
        ident = merge(s1, AttentionState.empty(d_h, dtype))
        if not (np.array_equal(ident.out, s1.out) and ident.log_z == s1.log_z):
            return CheckResult("merge-algebra", False, "identity element not bit-exact")
        mass = np.exp(merge(s1, s2).log_z)
        expect = np.exp(s1.log_z) + np.exp(s2.log_z)
        worst = max(worst, abs(mass - expect) / expect)
    return CheckResult("merge-algebra", worst <= tol, f"max rel err {worst:.3e} (tol {tol:.0e})")


def check_chunked_equivalence(seed: int, precision: str = "f32") -> CheckResult:
    """Chunk-merged states and banks must match the monolithic build."""
    geometry = ModelGeometry(n_layers=1, h_q=4, h_kv=2, d_h=8)
    spec = SynthSpec(
        geometry=geometry,
        prefix_len=256,
        n_query_clusters=4,
        queries_per_cluster=8,
        cluster_spread=0.05,
        seed=seed,
        n_chunks=4,
    )
    result = generate(spec)
    merged = merge_chunk_traces(result.chunk_traces)
    state_err = 0.0
    for layer in range(geometry.n_layers):
        diff = np.abs(
            merged.attn_out[layer].astype(np.float64)
            - result.trace.attn_out[layer].astype(np.float64)
        ).max()
        scale = np.abs(result.trace.attn_out[layer]).max()
        state_err = max(state_err, float(diff / scale))
    mode = KeyMode()
    cspec = ClusterSpec(k=4, iterations=10, batch_size=4096, seed=seed)
    bank_mono = build_bank(result.trace, mode, cspec, d_prime=2 * geometry.d_h)
    bank_chunk = build_bank_chunked(result.chunk_traces, mode, cspec, d_prime=2 * geometry.d_h)
    bank_err = 0.0
    for layer in range(geometry.n_layers):
        for s in range(bank_mono.n_slots):
            e1, e2 = bank_mono.entries(layer, s), bank_chunk.entries(layer, s)
            if len(e1) != len(e2):
                return CheckResult("chunked-equivalence", False, "entry counts differ")
            scale = max(np.abs(e1.out).max(), 1e-30)
            bank_err = max(bank_err, float(np.abs(e1.out - e2.out).max() / scale))
    ok = state_err <= 1e-5 and bank_err <= 1e-4
    return CheckResult(
        "chunked-equivalence",
        ok,
        f"state err {state_err:.3e} (tol 1e-5), bank err {bank_err:.3e} (tol 1e-4)",
    )


def check_hier_flat_equivalence(seed: int, precision: str = "f32") -> CheckResult:
    """Exhaustive fan-out (top_m = n_l1) must reproduce the flat argmax."""
    rng = np.random.default_rng(seed)
    from .accounting import synthetic_entries

    entries = synthetic_entries(512, 32, 8, rng)
    index = build_hier_index(entries, n_l1=24, seed=seed)
    mismatches = 0
    for _ in range(500):
        q = rng.standard_normal(32)
        flat = retrieve_linear(q, entries)
        hier = retrieve_hier(q, index, entries, top_m=index.n_l1)
        if flat.index != hier.index:
            mismatches += 1
    return CheckResult(
        "hier-flat-equivalence", mismatches == 0, f"{mismatches}/500 index mismatches"
    )


def check_whitening_identity(seed: int, precision: str = "f32") -> CheckResult:
    """Whitened samples must have near-identity sample covariance."""
    rng = np.random.default_rng(seed)
    d_h = 64
    basis, _ = np.linalg.qr(rng.standard_normal((d_h, d_h)))
    sqrt_cov = (basis * np.sqrt(rng.uniform(0.5, 4.0, d_h))) @ basis.T
    samples = rng.standard_normal((4096, d_h)) @ sqrt_cov
    transform = fit_whitening(samples)
    whitened = samples @ transform.T
    cov = np.cov(whitened, rowvar=False)
    err = np.linalg.norm(cov - np.eye(d_h)) / np.linalg.norm(np.eye(d_h))
    return CheckResult(
        "whitening-identity", err <= 1e-3, f"rel Frobenius err {err:.3e} (tol 1e-3)"
    )


def check_footprint_identity(seed: int, precision: str = "f32") -> CheckResult:
    """K = L with d' = 2 d_h must give exactly the full-attention traffic."""
    rng = np.random.default_rng(seed)
    for _ in range(100):
        h_kv = int(rng.integers(1, 9))
        group = int(rng.integers(1, 9))
        geometry = ModelGeometry(
            n_layers=1, h_q=h_kv * group, h_kv=h_kv, d_h=int(rng.choice([16, 32, 64, 128]))
        )
        prefix_len = int(rng.integers(1, 50000))
        model = TrafficModel(
            geometry=geometry, prefix_len=prefix_len, k=prefix_len, d_prime=2 * geometry.d_h
        )
        if asm_traffic(model) != gqa_traffic(model):
            return CheckResult("footprint-identity", False, f"mismatch at {model}")
    return CheckResult("footprint-identity", True, "exact over 100 random geometries")


ALL_CHECKS: list[Callable[[int, str], CheckResult]] = [
    check_decomposition,
    check_merge_algebra,
    check_chunked_equivalence,
    check_hier_flat_equivalence,
    check_whitening_identity,
    check_footprint_identity,
]


def run_all(seed: int = 0, precision: str = "f32") -> list[CheckResult]:
    return [check(seed, precision) for check in ALL_CHECKS]
