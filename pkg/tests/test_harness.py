"""Harness pieces: workload generation, trace checking, runner, config, CLI."""

import json

import pytest

from selcc.api import Cluster, ClusterConfig
from selcc.harness import checker
from selcc.harness.checker import TraceEvent, check_coherence, write_counts
from selcc.harness.config import ConfigError, load_settings
from selcc.harness.runner import allocate_lines, final_tokens, run_benchmark
from selcc.harness.workload import (WorkloadSpec, ZipfChooser,
                                    accessible_lines, op_stream)
from selcc.harness import cli


# ----------------------------------------------------------------------
# workload generation

def test_zipf_uniform_is_roughly_flat():
    import random
    chooser = ZipfChooser(10, 0.0, random.Random(7))
    counts = [0] * 10
    for _ in range(20000):
        counts[chooser.next()] += 1
    assert min(counts) > 1000 and max(counts) < 3 * 2000


def test_zipf_skew_front_loads_rank_zero():
    import random
    chooser = ZipfChooser(1000, 0.99, random.Random(7))
    counts = [0] * 1000
    for _ in range(20000):
        v = chooser.next()
        assert 0 <= v < 1000
        counts[v] += 1
    # rank 0 towers over the median rank under heavy skew
    assert counts[0] > 20 * (sorted(counts)[500] + 1)
    assert counts[0] > counts[1] > 0


def test_zipf_same_seed_same_sequence():
    import random
    a = ZipfChooser(64, 0.9, random.Random(3))
    b = ZipfChooser(64, 0.9, random.Random(3))
    assert [a.next() for _ in range(200)] == [b.next() for _ in range(200)]


def test_zipf_rejects_bad_theta():
    import random
    with pytest.raises(ValueError):
        ZipfChooser(10, 1.0, random.Random(1))


def test_accessible_lines_partitions_private_remainder():
    spec = WorkloadSpec(gcls=100, sharing_ratio=0.5)
    sets = [set(accessible_lines(spec, i, 4)) for i in range(4)]
    shared = set(range(50))
    for s in sets:
        assert shared <= s
    union = set()
    for i, s in enumerate(sets):
        private = s - shared
        assert len(private) > 0
        for j in range(i + 1, 4):
            assert not private & (sets[j] - shared)
        union |= s
    assert union == set(range(100))


def test_op_stream_honors_read_ratio_and_range():
    spec = WorkloadSpec(gcls=32, read_ratio=0.75, ops_per_thread=4000, seed=5)
    allowed = set(accessible_lines(spec, 1, 2))
    ops = list(op_stream(spec, 1, 2, 0))
    assert len(ops) == 4000
    writes = sum(1 for is_write, _ in ops if is_write)
    assert 0.20 < writes / 4000 < 0.30
    assert all(line in allowed for _, line in ops)


def test_op_stream_locality_repeats_previous_line():
    spec = WorkloadSpec(gcls=32, locality_p=1.0, ops_per_thread=50, seed=9)
    lines = [line for _, line in op_stream(spec, 0, 2, 0)]
    assert len(set(lines)) == 1


# ----------------------------------------------------------------------
# coherence checker

def _ev(node, op, line, writer, seq, t0, t1, thread=1):
    return TraceEvent(node, thread, op, line, writer, seq, t0, t1)


def test_checker_accepts_clean_history():
    events = [
        _ev(2, "r", 0, 0, 0, 1, 2),
        _ev(1, "w", 0, 1, 1, 3, 4),
        _ev(2, "r", 0, 1, 1, 5, 6),
        _ev(2, "w", 0, 2, 2, 7, 8),
        _ev(1, "r", 0, 2, 2, 9, 10),
    ]
    result = check_coherence(events)
    assert result.ok, result.violations
    assert write_counts(events) == {0: 2}


def test_checker_flags_stale_read():
    events = [
        _ev(1, "w", 0, 1, 1, 1, 2),
        _ev(2, "w", 0, 2, 2, 3, 4),
        _ev(2, "r", 0, 1, 1, 5, 6),     # reports the overwritten token
    ]
    result = check_coherence(events)
    assert not result.ok
    assert any("read" in v for v in result.violations)


def test_checker_flags_duplicate_sequence():
    events = [
        _ev(1, "w", 0, 1, 1, 1, 2),
        _ev(2, "w", 0, 2, 1, 3, 4),     # seq 1 again: lost update
    ]
    result = check_coherence(events)
    assert not result.ok


def test_checker_flags_overlapping_writers():
    events = [
        _ev(1, "w", 0, 1, 1, 1, 5),
        _ev(2, "w", 0, 2, 2, 3, 6),     # acquired before the first unlocked
    ]
    result = check_coherence(events)
    assert not result.ok
    assert any("overlap" in v for v in result.violations)


def test_trace_roundtrip(tmp_path):
    events = [
        _ev(1, "w", 3, 1, 1, 1, 2, thread=11),
        _ev(2, "r", 3, 1, 1, 5, 6, thread=22),
    ]
    path = tmp_path / "trace.txt"
    checker.save_trace(str(path), events)
    assert checker.load_trace(str(path)) == sorted(events, key=lambda e: e.t_acquire)


# ----------------------------------------------------------------------
# benchmark runner

def _det_cluster():
    return Cluster(ClusterConfig(compute_nodes=2, memory_nodes=1,
                                 deterministic=True, handler_threads=0,
                                 gcl_capacity=256))


def test_runner_deterministic_repeats_exactly():
    spec = WorkloadSpec(gcls=12, read_ratio=0.5, ops_per_thread=60,
                        threads_per_node=1, seed=21)
    reports = []
    for _ in range(2):
        with _det_cluster() as cluster:
            report, events = run_benchmark(cluster, spec, collect_trace=True)
            result = check_coherence(events)
            assert result.ok, result.summary()
            reports.append(report.to_dict())
    a, b = reports
    for key in ("ops", "makespan_ns", "round_trips", "by_label", "hit_ratio"):
        assert a[key] == b[key], key


def test_runner_final_tokens_match_trace():
    spec = WorkloadSpec(gcls=6, read_ratio=0.3, ops_per_thread=40,
                        threads_per_node=1, seed=4)
    with _det_cluster() as cluster:
        lines = allocate_lines(cluster, spec.gcls)
        report, events = run_benchmark(cluster, spec, collect_trace=True,
                                       lines=lines)
        counts = write_counts(events)
        tokens = final_tokens(cluster, lines)
        for line_no, (writer, seq) in enumerate(tokens):
            assert seq == counts.get(line_no, 0)
        assert report.writes == sum(counts.values())


# ----------------------------------------------------------------------
# config and CLI

def test_config_layers_and_coercion(tmp_path):
    path = tmp_path / "bench.conf"
    path.write_text("# comment\n"
                    "gamma = inf\n"
                    "read-ratio = 0.9\n"
                    "caching = off\n"
                    "spin_unit_ns = none\n")
    cfg, spec = load_settings(str(path), env={"SELCC_GCLS": "77"},
                              overrides={"read_ratio": "0.25"})
    assert cfg.gamma == float("inf")
    assert cfg.caching is False
    assert cfg.spin_unit_ns is None
    assert spec.gcls == 77
    assert spec.read_ratio == 0.25


def test_config_rejects_unknown_key(tmp_path):
    path = tmp_path / "bad.conf"
    path.write_text("no_such_knob = 1\n")
    with pytest.raises(ConfigError):
        load_settings(str(path), env={})


def test_cli_run_and_check(capsys, tmp_path):
    trace = tmp_path / "run.trace"
    rc = cli.main(["run",
                   "--set", "deterministic=true",
                   "--set", "handler_threads=0",
                   "--set", "compute_nodes=2",
                   "--set", "gcl_capacity=128",
                   "--set", "gcls=8",
                   "--set", "ops_per_thread=30",
                   "--set", "threads_per_node=1",
                   "--trace", str(trace),
                   "--check"])
    captured = capsys.readouterr()
    assert rc == 0
    report = json.loads(captured.out)
    assert report["ops"] == 2 * 30
    assert trace.exists()
    # and the saved trace verifies standalone
    rc = cli.main(["check", str(trace)])
    assert rc == 0


def test_cli_litmus_smoke(capsys):
    rc = cli.main(["litmus", "--test", "sb", "--iters", "40",
                   "--set", "compute_nodes=4"])
    out = capsys.readouterr().out
    assert rc == 0
    assert "sb: 40 rounds, 0 forbidden" in out
