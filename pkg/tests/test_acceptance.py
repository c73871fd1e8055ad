"""Acceptance gate: one test per criterion, each printing a pass/fail line
with the measured figure and elapsed time, asserted at the stated tolerance
and runtime budget."""

import hashlib
import time

import numpy as np
import pytest

from attnmem.accounting import (
    FLAT,
    HIER,
    TrafficModel,
    asm_traffic,
    gqa_traffic,
    run_scaling_bench,
    synthetic_entries,
)
from attnmem.attention import AttentionState, attn_with_state, decompose_check, merge
from attnmem.bank import MemoryEntries, build_hier_index, retrieve_hier, retrieve_linear
from attnmem.calibration import (
    ClusterSpec,
    KeyMode,
    build_bank,
    build_bank_chunked,
    fit_whitening,
    lookup_keys_for_token,
    merge_chunk_traces,
)
from attnmem.cli import main
from attnmem.inference import (
    full_attention_oracle,
    infer_merge,
    reconstruction_error,
    request_from_trace,
)
from attnmem.synth import SynthSpec, generate
from attnmem.tensorstore import ModelGeometry
from conftest import match_labels


def finish(criterion, budget_s, started, passed, detail):
    elapsed = time.perf_counter() - started
    status = "PASS" if passed else "FAIL"
    print(f"[acceptance {criterion}] {status}: {detail} ({elapsed:.1f}s / budget {budget_s}s)")
    assert passed, f"{criterion}: {detail}"
    assert elapsed < budget_s, f"{criterion}: runtime {elapsed:.1f}s over budget {budget_s}s"


def test_c01_lossless_decomposition():
    started = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = {"f32": 0.0, "f64": 0.0}
    for precision, dtype in (("f32", np.float32), ("f64", np.float64)):
        for _ in range(1000):
            d_h = int(rng.choice([4, 8, 64]))
            q = rng.standard_normal(d_h).astype(dtype)
            blocks = []
            for _ in range(int(rng.integers(1, 9))):
                n = int(rng.integers(1, 33))
                blocks.append(
                    (
                        rng.standard_normal((n, d_h)).astype(dtype),
                        rng.standard_normal((n, d_h)).astype(dtype),
                    )
                )
            _, _, err = decompose_check(q, blocks)
            worst[precision] = max(worst[precision], err)
    passed = worst["f32"] <= 1e-5 and worst["f64"] <= 1e-12
    finish(
        "01 lossless-decomposition", 10, started, passed,
        f"max rel err f32 {worst['f32']:.2e} (tol 1e-5), f64 {worst['f64']:.2e} (tol 1e-12)",
    )


def test_c02_merge_algebra():
    started = time.perf_counter()
    rng = np.random.default_rng(102)
    d_h = 8
    worst = 0.0
    identity_ok = True
    for _ in range(1000):
        q = rng.standard_normal(d_h).astype(np.float32)
        states = []
        for _ in range(3):
            n = int(rng.integers(1, 17))
            states.append(
                attn_with_state(
                    q,
                    rng.standard_normal((n, d_h)).astype(np.float32),
                    rng.standard_normal((n, d_h)).astype(np.float32),
                )
            )
        s1, s2, s3 = states
        ab, ba = merge(s1, s2), merge(s2, s1)
        scale = max(float(np.abs(ba.out).max()), 1e-30)
        worst = max(worst, float(np.abs(ab.out - ba.out).max()) / scale)
        worst = max(worst, abs(ab.log_z - ba.log_z))
        left, right = merge(merge(s1, s2), s3), merge(s1, merge(s2, s3))
        scale = max(float(np.abs(right.out).max()), 1e-30)
        worst = max(worst, float(np.abs(left.out - right.out).max()) / scale)
        ident = merge(s1, AttentionState.empty(d_h))
        identity_ok &= bool(np.array_equal(ident.out, s1.out) and ident.log_z == s1.log_z)
        mass, expect = np.exp(ab.log_z), np.exp(s1.log_z) + np.exp(s2.log_z)
        worst = max(worst, abs(mass - expect) / expect)
    passed = worst <= 1e-6 and identity_ok
    finish(
        "02 merge-algebra", 5, started, passed,
        f"max property err {worst:.2e} (tol 1e-6), identity bit-exact: {identity_ok}",
    )


def test_c03_chunked_equals_monolithic():
    started = time.perf_counter()
    geometry = ModelGeometry(n_layers=1, h_q=4, h_kv=2, d_h=8)
    spec = SynthSpec(
        geometry=geometry, prefix_len=1024, n_query_clusters=8, queries_per_cluster=16,
        cluster_spread=0.05, seed=103, n_chunks=4,
    )
    result = generate(spec)
    merged = merge_chunk_traces(result.chunk_traces)
    state_err = 0.0
    for t in range(result.trace.n_tokens):
        ref = result.trace.attn_out[0][t]
        state_err = max(state_err, float(np.abs(merged.attn_out[0][t] - ref).max() / np.abs(ref).max()))
    cspec = ClusterSpec(k=8, iterations=10, batch_size=4096, seed=7)
    bank_mono = build_bank(result.trace, KeyMode(), cspec, d_prime=16)
    bank_chunk = build_bank_chunked(result.chunk_traces, KeyMode(), cspec, d_prime=16)
    entry_err = 0.0
    counts_match = True
    for s in range(bank_mono.n_slots):
        e1, e2 = bank_mono.entries(0, s), bank_chunk.entries(0, s)
        counts_match &= len(e1) == len(e2)
        scale = max(float(np.abs(e1.out).max()), 1e-30)
        entry_err = max(entry_err, float(np.abs(e1.out - e2.out).max()) / scale)
        entry_err = max(entry_err, float(np.abs(np.exp(e1.log_z) - np.exp(e2.log_z)).max() / np.abs(np.exp(e1.log_z)).max()))
    passed = state_err <= 1e-5 and entry_err <= 1e-4 and counts_match
    finish(
        "03 chunked-equals-monolithic", 30, started, passed,
        f"state err {state_err:.2e} (tol 1e-5), entry err {entry_err:.2e} (tol 1e-4)",
    )


def test_c04_exact_dictionary_sufficiency():
    started = time.perf_counter()
    geometry = ModelGeometry(n_layers=2, h_q=4, h_kv=2, d_h=8)
    spec = SynthSpec(
        geometry=geometry, prefix_len=256, n_query_clusters=16, queries_per_cluster=4,
        cluster_spread=0.3, seed=104, n_local_tokens=8,
    )
    result = generate(spec)
    n = result.trace.n_tokens
    bank = build_bank(
        result.trace, KeyMode(), ClusterSpec(k=n, iterations=2, batch_size=n, seed=0),
        d_prime=geometry.group_size * geometry.d_h,
    )
    request = request_from_trace(
        result.trace, result.local_keys, result.local_values, result.local_len
    )
    report = infer_merge(request, bank)
    full_out, _ = full_attention_oracle(request, result.prefix_keys, result.prefix_values)
    per_token = np.abs(report.merged_out - full_out).reshape(n, -1).max(axis=1)
    scale = np.abs(full_out).reshape(n, -1).max(axis=1)
    worst = float((per_token / scale).max())
    finish(
        "04 exact-dictionary-sufficiency", 30, started, worst <= 1e-5,
        f"worst per-token rel err {worst:.2e} over {n} tokens (tol 1e-5)",
    )


def test_c05_hier_equals_flat_at_exhaustive_fanout():
    started = time.perf_counter()
    rng = np.random.default_rng(105)
    entries = synthetic_entries(4096, 16, 4, rng)
    index = build_hier_index(entries, n_l1=64, seed=5)
    mismatches = 0
    for _ in range(10_000):
        q = rng.standard_normal(16)
        flat = retrieve_linear(q, entries)
        hier = retrieve_hier(q, index, entries, top_m=index.n_l1)
        mismatches += flat.index != hier.index
    finish(
        "05 hier-flat-exhaustive", 20, started, mismatches == 0,
        f"{mismatches}/10000 index mismatches at top_m = n_l1 = {index.n_l1}, K = 4096",
    )


def test_c06_hier_fidelity_top16():
    started = time.perf_counter()
    rng = np.random.default_rng(106)
    k, d_prime, n_clusters, spread = 8192, 32, 64, 0.05
    centers = rng.standard_normal((n_clusters, d_prime))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    keys = centers[np.arange(k) % n_clusters] + spread * rng.standard_normal((k, d_prime))
    entries = MemoryEntries(
        keys=keys.astype(np.float32),
        out=rng.standard_normal((k, 1, 4)).astype(np.float32),
        log_z=np.zeros((k, 1)),
    )
    queries = [
        centers[int(rng.integers(n_clusters))] + spread * rng.standard_normal(d_prime)
        for _ in range(2000)
    ]
    flat_hits = [retrieve_linear(q, entries).index for q in queries]
    rates = {}
    for n_l1 in (64, 128, 256):
        index = build_hier_index(entries, n_l1=n_l1, seed=6, top_m=16)
        agree = sum(
            retrieve_hier(q, index, entries).index == flat_hits[i]
            for i, q in enumerate(queries)
        )
        rates[n_l1] = agree / len(queries)
    passed = all(rate >= 0.99 for rate in rates.values())
    detail = ", ".join(f"n_l1={n}: {r:.4f}" for n, r in rates.items())
    finish("06 hier-fidelity-top16", 60, started, passed, f"top-1 agreement {detail} (need >= 0.99)")


def test_c07_footprint_identity():
    started = time.perf_counter()
    rng = np.random.default_rng(107)
    exact = True
    for _ in range(100):
        h_kv = int(rng.integers(1, 9))
        group = int(rng.integers(1, 9))
        geometry = ModelGeometry(
            n_layers=1, h_q=h_kv * group, h_kv=h_kv, d_h=int(rng.choice([16, 32, 64, 128]))
        )
        prefix_len = int(rng.integers(1, 100_000))
        model = TrafficModel(
            geometry=geometry, prefix_len=prefix_len, k=prefix_len, d_prime=2 * geometry.d_h
        )
        exact &= asm_traffic(model) == gqa_traffic(model)
    finish(
        "07 footprint-identity", 1, started, exact,
        "asm_traffic(K=L, d'=2d_h) == gqa_traffic(L) exactly on 100 random geometries",
    )


def test_c08_scaling_shape():
    started = time.perf_counter()
    ks = [1024, 2048, 4096, 8192, 16384]
    results = run_scaling_bench(
        ks, [FLAT, HIER], trials=2, seed=108, tokens_per_trial=32, d_h=64, d_prime=128, top_m=16
    )
    flat = {r.k: r for r in results if r.mode == FLAT}
    hier = {r.k: r for r in results if r.mode == HIER}
    flat_linear = all(flat[k].ops_mean == k for k in ks)
    hier_ratio = hier[16384].ops_mean / hier[1024].ops_mean
    flat_ratio = flat[16384].ops_mean / flat[1024].ops_mean
    wall = ", ".join(f"K={k}: flat {flat[k].ns_per_token_mean:.0f}ns / hier {hier[k].ns_per_token_mean:.0f}ns" for k in ks)
    print(f"[acceptance 08 wall-clock, reported not asserted] {wall}")
    passed = flat_linear and flat_ratio == 16.0 and hier_ratio <= 5.0
    finish(
        "08 scaling-shape", 120, started, passed,
        f"flat ops exactly K: {flat_linear}; hier ops 16K/1K ratio {hier_ratio:.2f} (<= 5) vs flat {flat_ratio:.0f}",
    )


def test_c09_whitening_identity():
    started = time.perf_counter()
    rng = np.random.default_rng(109)
    d_h, n = 64, 4096
    basis, _ = np.linalg.qr(rng.standard_normal((d_h, d_h)))
    sqrt_cov = (basis * np.sqrt(rng.uniform(0.5, 4.0, d_h))) @ basis.T
    samples = rng.standard_normal((n, d_h)) @ sqrt_cov
    transform = fit_whitening(samples)
    cov = np.cov(samples @ transform.T, rowvar=False)
    err = float(np.linalg.norm(cov - np.eye(d_h)) / np.linalg.norm(np.eye(d_h)))
    finish(
        "09 whitening-identity", 10, started, err <= 1e-3,
        f"sample covariance rel Frobenius err {err:.2e} on n={n}, d_h={d_h} (tol 1e-3)",
    )


def test_c10_planted_cluster_end_to_end():
    started = time.perf_counter()
    geometry = ModelGeometry(n_layers=1, h_q=4, h_kv=2, d_h=8)

    def run_spread(spread):
        spec = SynthSpec(
            geometry=geometry, prefix_len=256, n_query_clusters=16, queries_per_cluster=8,
            cluster_spread=spread, seed=110, n_local_tokens=8,
        )
        result = generate(spec)
        bank = build_bank(
            result.trace, KeyMode(), ClusterSpec(k=16, iterations=10, batch_size=4096, seed=3),
            d_prime=16,
        )
        request = request_from_trace(
            result.trace, result.local_keys, result.local_values, result.local_len
        )
        report = infer_merge(request, bank)
        errors = reconstruction_error(
            request, bank, result.prefix_keys, result.prefix_values, report=report
        )
        recovery = min(
            match_labels(report.entry_index[:, 0, s], result.labels)
            for s in range(bank.n_slots)
        )
        return float(np.median(errors)), recovery

    median_002, recovery_002 = run_spread(0.02)
    medians = [run_spread(s)[0] for s in (0.2, 0.05)] + [run_spread(0.0)[0]]
    monotone = medians[0] >= medians[1] >= medians[2]
    passed = median_002 <= 0.05 and recovery_002 >= 0.95 and monotone
    finish(
        "10 planted-cluster-end-to-end", 60, started, passed,
        f"median err {median_002:.3f} (<= 0.05), label recovery {recovery_002:.3f} (>= 0.95), "
        f"medians over spreads (0.2, 0.05, 0.0) = {[f'{m:.3f}' for m in medians]} non-increasing: {monotone}",
    )


def test_c11_determinism_across_runs_and_threads(tmp_path, capsys):
    started = time.perf_counter()
    hashes = []
    for run_id, threads in (("r1", "1"), ("r2", "1"), ("r4", "4")):
        out_prefix = tmp_path / run_id
        code = main([
            "synth", "--layers", "2", "--hq", "4", "--hkv", "2", "--dh", "8",
            "--prefix", "256", "--clusters", "8", "--seed", "11",
            "--output", str(out_prefix),
        ])
        assert code == 0
        bank_path = tmp_path / f"{run_id}.bank.asmt"
        code = main([
            "build", "--traces", str(out_prefix) + ".trace.asmt",
            "--k", "8", "--iters", "10", "--seed", "11", "--threads", threads,
            "--hier-nl1", "auto", "--output", str(bank_path),
        ])
        assert code == 0
        hashes.append(hashlib.sha256(bank_path.read_bytes()).hexdigest())
    capsys.readouterr()
    identical = len(set(hashes)) == 1
    finish(
        "11 determinism", 60, started, identical,
        f"bank file hashes across runs and threads 1/1/4: {'identical' if identical else hashes}",
    )
