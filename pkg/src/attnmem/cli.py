"""Command-line front end: generate, build, query, bench, inspect, verify.

Exit codes: 0 success, 1 check failure, 2 usage or validation error.
Machine-readable results go to stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import accounting, calibration, inference, synth, verify
from .bank import deserialize_bank, serialize_bank
from .calibration import INDIVIDUAL, JOINT, PRE_ROPE, ROPE_UNIFIED, CapacityError
from .tensorstore import ModelGeometry, TensorFileError, load_trace_set, save_trace_set

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def _info(msg: str) -> None:
    print(msg, file=sys.stderr)


def _common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=0, help="root RNG seed")
    parser.add_argument("--threads", type=int, default=1, help="internal parallelism bound")
    parser.add_argument("--precision", choices=["f32", "f64"], default="f32")
    parser.add_argument("--config", type=str, default=None, help="key=value defaults file")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="attnmem", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    subparsers: dict[str, argparse.ArgumentParser] = {}

    def add_parser(name: str, **kwargs) -> argparse.ArgumentParser:
        subparsers[name] = sub.add_parser(name, **kwargs)
        return subparsers[name]

    p = add_parser("synth", help="generate a synthetic trace + oracle pair")
    _common_flags(p)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--hq", type=int, default=4)
    p.add_argument("--hkv", type=int, default=2)
    p.add_argument("--dh", type=int, default=8)
    p.add_argument("--prefix", type=int, default=256)
    p.add_argument("--clusters", type=int, default=8)
    p.add_argument("--queries-per-cluster", type=int, default=8)
    p.add_argument("--spread", type=float, default=0.05)
    p.add_argument("--chunks", type=int, default=1)
    p.add_argument("--local", type=int, default=0, help="local key/value pool size")
    p.add_argument("--output", type=str, required=True, help="output path prefix")

    p = add_parser("build", help="build a memory bank from trace files")
    _common_flags(p)
    p.add_argument("--traces", type=str, nargs="+", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--batch", type=int, default=1024)
    p.add_argument("--mode", choices=["pre", "unified"], default="pre")
    p.add_argument("--whiten", action="store_true")
    p.add_argument("--dprime", type=int, default=0, help="lookup key dim (0 = 2*d_h)")
    p.add_argument("--org", choices=[INDIVIDUAL, JOINT], default=INDIVIDUAL)
    p.add_argument("--hier-nl1", type=str, default="0", help="first-level centroids; 'auto' = round(sqrt(k)), 0 = no index")
    p.add_argument("--virtual-pos", type=int, default=-1, help="rope_unified position (-1 = prefix_len)")
    p.add_argument("--chunked", action="store_true", help="treat --traces as prefix chunks")
    p.add_argument("--strict", action="store_true", help="fail instead of warn on sparse codebooks")
    p.add_argument("--output", type=str, required=True)

    p = add_parser("query", help="serve trace queries against a bank")
    _common_flags(p)
    p.add_argument("--bank", type=str, required=True)
    p.add_argument("--traces", type=str, required=True, help="request queries (trace file)")
    p.add_argument("--oracle", type=str, default=None, help="oracle file: local blocks + ground truth")
    p.add_argument("--hier", action="store_true")
    p.add_argument("--top-m", type=int, default=None)
    p.add_argument("--output", type=str, required=True, help="output path prefix")

    p = add_parser("bench", help="op-count and wall-clock scaling benchmark")
    _common_flags(p)
    p.add_argument("--modes", type=str, default="flat,hier")
    p.add_argument("--k", type=str, default="1024,4096,16384")
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--tokens", type=int, default=64)
    p.add_argument("--top-m", type=int, default=16)
    p.add_argument("--dh", type=int, default=64)
    p.add_argument("--dprime", type=int, default=128)
    p.add_argument("--output", type=str, default=None, help="output path prefix (csv + png)")

    p = add_parser("inspect", help="print bank metadata and entry statistics")
    _common_flags(p)
    p.add_argument("--bank", type=str, required=True)

    p = add_parser("verify", help="run the invariant suite")
    _common_flags(p)
    return parser, subparsers


def _apply_config(
    argv: list[str],
    parser: argparse.ArgumentParser,
    subparsers: dict[str, argparse.ArgumentParser],
) -> argparse.Namespace:
    """Parse once to find --config, load its key=value pairs as defaults on
    the chosen subcommand, then parse again so explicit flags win."""
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        subparser = subparsers[args.command]
        known = {action.dest for action in subparser._actions}
        defaults = {}
        for line in Path(args.config).read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"malformed config line: {line!r}")
            dest = key.strip().replace("-", "_")
            if dest not in known:
                raise ValueError(f"unknown config key for {args.command}: {key.strip()!r}")
            defaults[dest] = value.strip()
        subparser.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def cmd_synth(args: argparse.Namespace) -> int:
    try:
        geometry = ModelGeometry(n_layers=args.layers, h_q=args.hq, h_kv=args.hkv, d_h=args.dh)
        spec = synth.SynthSpec(
            geometry=geometry,
            prefix_len=args.prefix,
            n_query_clusters=args.clusters,
            queries_per_cluster=args.queries_per_cluster,
            cluster_spread=args.spread,
            seed=args.seed,
            n_chunks=args.chunks,
            n_local_tokens=args.local,
        )
    except ValueError as exc:
        _err(str(exc))
        return EXIT_USAGE
    result = synth.generate(spec)
    prefix = Path(args.output)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    trace_path = Path(f"{prefix}.trace.asmt")
    oracle_path = Path(f"{prefix}.oracle.asmt")
    save_trace_set(trace_path, result.trace)
    synth.save_oracle(oracle_path, result)
    print(f"trace={trace_path}")
    print(f"oracle={oracle_path}")
    for i, chunk in enumerate(result.chunk_traces):
        chunk_path = Path(f"{prefix}.chunk{i}.trace.asmt")
        save_trace_set(chunk_path, chunk)
        print(f"chunk{i}={chunk_path}")
    print(f"tokens={result.trace.n_tokens}")
    print(f"prefix_len={spec.prefix_len}")
    return EXIT_OK


def cmd_build(args: argparse.Namespace) -> int:
    try:
        traces = [load_trace_set(p) for p in args.traces]
    except (TensorFileError, OSError) as exc:
        _err(str(exc))
        return EXIT_USAGE
    geometry = traces[0].geometry
    d_prime = args.dprime or 2 * geometry.d_h
    slot_dim = (
        geometry.h_q * geometry.d_h if args.org == JOINT else geometry.group_size * geometry.d_h
    )
    if slot_dim % d_prime != 0:
        _err(f"--dprime {d_prime} must divide the per-slot key dimension {slot_dim}")
        return EXIT_USAGE
    if args.hier_nl1 == "auto":
        hier_n_l1 = max(1, round(args.k**0.5))
    else:
        try:
            hier_n_l1 = int(args.hier_nl1)
        except ValueError:
            _err(f"--hier-nl1 must be an integer or 'auto', got {args.hier_nl1!r}")
            return EXIT_USAGE
    virtual_pos = args.virtual_pos if args.virtual_pos >= 0 else traces[0].prefix_len
    mode = calibration.KeyMode(
        rope=PRE_ROPE if args.mode == "pre" else ROPE_UNIFIED,
        whitening=args.whiten,
        virtual_position=virtual_pos,
    )
    spec = calibration.ClusterSpec(
        k=args.k,
        iterations=args.iters,
        batch_size=args.batch,
        seed=args.seed,
        centroid_org=args.org,
    )
    start = time.perf_counter()
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            if args.chunked:
                bank = calibration.build_bank_chunked(
                    traces, mode, spec, d_prime,
                    strict_capacity=args.strict, threads=args.threads, hier_n_l1=hier_n_l1,
                )
            else:
                if len(traces) != 1:
                    _err("multiple trace files require --chunked")
                    return EXIT_USAGE
                bank = calibration.build_bank(
                    traces[0], mode, spec, d_prime,
                    strict_capacity=args.strict, threads=args.threads, hier_n_l1=hier_n_l1,
                )
        for w in caught:
            _info(f"warning: {w.message}")
    except CapacityError as exc:
        _err(str(exc))
        return EXIT_CHECK_FAILED
    except (ValueError, TensorFileError) as exc:
        _err(str(exc))
        return EXIT_USAGE
    elapsed = time.perf_counter() - start
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    serialize_bank(bank, out)
    print(f"bank={out}")
    for layer in range(geometry.n_layers):
        counts = ",".join(str(len(bank.entries(layer, s))) for s in range(bank.n_slots))
        print(f"layer{layer}_entries={counts}")
    print(f"dropped={sum(max(0, args.k - len(bank.entries(l, s))) for l in range(geometry.n_layers) for s in range(bank.n_slots))}")
    print(f"build_seconds={elapsed:.3f}")
    return EXIT_OK


def cmd_query(args: argparse.Namespace) -> int:
    from .report import plot_query_report

    try:
        bank = deserialize_bank(args.bank)
        traces = load_trace_set(args.traces)
    except (TensorFileError, OSError) as exc:
        _err(str(exc))
        return EXIT_USAGE
    oracle = None
    if args.oracle:
        try:
            oracle = synth.load_oracle(args.oracle)
        except (TensorFileError, OSError) as exc:
            _err(str(exc))
            return EXIT_USAGE
    if traces.geometry != bank.geometry:
        _err("request geometry does not match bank geometry")
        return EXIT_USAGE
    if oracle is not None:
        request = inference.request_from_trace(
            traces, oracle.local_keys, oracle.local_values, oracle.local_len
        )
    else:
        request = inference.request_from_trace(traces)
    try:
        report = inference.infer_merge(request, bank, use_hier=args.hier, top_m=args.top_m)
    except ValueError as exc:
        _err(str(exc))
        return EXIT_USAGE
    errors = None
    if oracle is not None:
        errors = inference.reconstruction_error(
            request, bank, oracle.prefix_keys, oracle.prefix_values, report=report
        )
    prefix = Path(args.output)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    report_path = Path(f"{prefix}.report.asmt")
    csv_path = Path(f"{prefix}.report.csv")
    fig_path = Path(f"{prefix}.report.png")
    inference.save_report(report_path, report, bank.geometry)
    inference.write_report_csv(csv_path, report, errors)
    plot_query_report(report, fig_path, errors)
    print(f"report={report_path}")
    print(f"csv={csv_path}")
    print(f"figure={fig_path}")
    print(f"mean_similarity={report.similarity.mean():.8g}")
    print(f"mean_ops={report.ops_count.mean():.8g}")
    if errors is not None:
        print(f"median_error={np.median(errors):.8g}")
        print(f"max_error={errors.max():.8g}")
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    from .report import format_bench_csv, plot_bench, write_bench_csv

    try:
        modes = [m.strip() for m in args.modes.split(",") if m.strip()]
        ks = [int(k) for k in args.k.split(",") if k.strip()]
        results = accounting.run_scaling_bench(
            ks=ks,
            modes=modes,
            trials=args.trials,
            seed=args.seed,
            tokens_per_trial=args.tokens,
            d_h=args.dh,
            d_prime=args.dprime,
            top_m=args.top_m,
        )
    except ValueError as exc:
        _err(str(exc))
        return EXIT_USAGE
    print(format_bench_csv(results))
    if args.output:
        prefix = Path(args.output)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        csv_path = Path(f"{prefix}.csv")
        fig_path = Path(f"{prefix}.png")
        write_bench_csv(results, csv_path)
        plot_bench(results, fig_path)
        _info(f"wrote {csv_path} and {fig_path}")
    return EXIT_OK


def cmd_inspect(args: argparse.Namespace) -> int:
    try:
        bank = deserialize_bank(args.bank)
    except (TensorFileError, OSError) as exc:
        _err(str(exc))
        return EXIT_USAGE
    g = bank.geometry
    print(f"k={bank.k}")
    print(f"key_mode={bank.mode.rope}")
    print(f"whitening={int(bank.mode.whitening)}")
    print(f"d_prime={bank.d_prime}")
    print(f"centroid_org={bank.centroid_org}")
    print(f"virtual_position={bank.mode.virtual_position}")
    print(f"seed={bank.seed}")
    print(f"prefix_len={bank.prefix_len}")
    print(f"geometry=layers:{g.n_layers},hq:{g.h_q},hkv:{g.h_kv},dh:{g.d_h}")
    for layer in range(g.n_layers):
        for s in range(bank.n_slots):
            entries = bank.entries(layer, s)
            index = bank.hier_index(layer, s)
            n_l1 = index.n_l1 if index is not None else 0
            norms = np.linalg.norm(entries.keys, axis=1)
            print(
                f"layer{layer}.slot{s}: entries={len(entries)} n_l1={n_l1} "
                f"key_norm_mean={norms.mean():.4g} mass_mean={np.exp(entries.log_z).mean():.4g}"
            )
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    results = verify.run_all(seed=args.seed, precision=args.precision)
    failed = 0
    for res in results:
        status = "PASS" if res.passed else "FAIL"
        print(f"{status} {res.name}: {res.detail}")
        failed += 0 if res.passed else 1
    return EXIT_OK if failed == 0 else EXIT_CHECK_FAILED


_COMMANDS = {
    "synth": cmd_synth,
    "build": cmd_build,
    "query": cmd_query,
    "bench": cmd_bench,
    "inspect": cmd_inspect,
    "verify": cmd_verify,
}


def main(argv: list[str] | None = None) -> int:
    parser, subparsers = build_parser()
    try:
        args = _apply_config(sys.argv[1:] if argv is None else argv, parser, subparsers)
    except (OSError, ValueError) as exc:
        _err(str(exc))
        return EXIT_USAGE
    return _COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
