"""Command-line front end for the benchmark and verification harness."""

from __future__ import annotations

import argparse
import json
import sys

from selcc.api import Cluster
from selcc.harness import checker, fairness, litmus
from selcc.harness.config import ConfigError, load_settings
from selcc.harness.runner import run_benchmark


def _kv_pairs(pairs: list[str]) -> dict[str, str]:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key] = value
    return out


def _cmd_run(args) -> int:
    cfg, spec = load_settings(args.config, overrides=_kv_pairs(args.set))
    want_trace = bool(args.trace or args.check)
    with Cluster(cfg) as cluster:
        report, events = run_benchmark(cluster, spec, collect_trace=want_trace)
    print(json.dumps(report.to_dict(), indent=2))
    rc = 0
    if args.trace and events is not None:
        checker.save_trace(args.trace, events)
        print(f"trace: {len(events)} events -> {args.trace}", file=sys.stderr)
    if args.check and events is not None:
        result = checker.check_coherence(events)
        print(result.summary(), file=sys.stderr)
        rc = 0 if result.ok else 1
    return rc


def _cmd_litmus(args) -> int:
    cfg, _ = load_settings(args.config, overrides=_kv_pairs(args.set))
    if cfg.compute_nodes < 4:
        cfg.compute_nodes = 4
    tests = list(litmus.TESTS) if args.test == "all" else [args.test]
    rc = 0
    with Cluster(cfg) as cluster:
        for name in tests:
            result = litmus.run_litmus(cluster, name, iters=args.iters)
            verdict = "ok" if result.ok else "FORBIDDEN OUTCOMES"
            print(f"{name}: {result.iters} rounds, {result.forbidden} forbidden ({verdict})")
            if not result.ok:
                rc = 1
    return rc


def _cmd_fairness(args) -> int:
    if args.mode == "gamma":
        gammas = [float(g) for g in args.gammas.split(",")]
        for point in fairness.gamma_sweep(gammas, duration_s=args.duration):
            print(f"gamma={point['gamma']:<8g} ops={point['ops']:<8d} "
                  f"tput={point['throughput']:<10.0f} "
                  f"max_wait_ns={point['max_wait_ns']} "
                  f"handovers={point['lease_handovers']}")
    else:
        for mechanisms in (False, True):
            r = fairness.run_single_writer(mechanisms, duration_s=args.duration)
            label = "on " if mechanisms else "off"
            print(f"mechanisms={label} writer_windows={r['writer_windows']} "
                  f"writer_total={r['writer_total']} "
                  f"reader_mean={r['reader_mean']:.0f}")
    return 0


def _cmd_check(args) -> int:
    events = checker.load_trace(args.trace)
    result = checker.check_coherence(events)
    print(result.summary())
    for v in result.violations:
        print(f"  {v}")
    return 0 if result.ok else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="selcc-bench",
        description="Benchmark and verify the shared-exclusive latch cache cluster.")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("run", help="run a workload and report metrics")
    p.add_argument("--config", help="key=value settings file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one setting (repeatable)")
    p.add_argument("--trace", help="write the access trace to this file")
    p.add_argument("--check", action="store_true",
                   help="run the coherence checker over the trace")
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("litmus", help="run memory-model litmus tests")
    p.add_argument("--test", choices=list(litmus.TESTS) + ["all"], default="all")
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(fn=_cmd_litmus)

    p = sub.add_parser("fairness", help="lease-budget sweep / single-writer run")
    p.add_argument("--mode", choices=["gamma", "swmr"], default="gamma")
    p.add_argument("--gammas", default="0,256,inf")
    p.add_argument("--duration", type=float, default=1.0)
    p.set_defaults(fn=_cmd_fairness)

    p = sub.add_parser("check", help="verify a saved access trace")
    p.add_argument("trace")
    p.set_defaults(fn=_cmd_check)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        parser.error(str(e))
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
