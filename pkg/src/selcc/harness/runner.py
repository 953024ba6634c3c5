"""Benchmark driver: execute a workload spec against a cluster.

Writes stamp their line with a version token — a (writer node, sequence)
pair maintained read-modify-write under the exclusive latch — and reads
report the token they saw, so every run can hand its trace to the coherence
checker.  Throughput is measured in simulated time: every fabric round trip
and local access charges the virtual clock, and a run's makespan is the
largest per-worker accumulation.

In deterministic mode the whole workload runs on the calling thread,
round-robin one op per worker stream, with message rings pumped inline;
two identical invocations produce identical metrics.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field

from selcc.api import Cluster
from selcc.gcl import GlobalAddress
from selcc.harness.checker import TraceEvent
from selcc.harness.workload import WorkloadSpec, op_stream


@dataclass
class BenchReport:
    ops: int
    reads: int
    writes: int
    makespan_ns: int
    wall_s: float
    hit_ratio: float
    round_trips: int
    by_label: dict
    invalidations_sent: int
    flush_bytes: int
    max_wait_ns: int
    node_metrics: dict = field(default_factory=dict)

    @property
    def throughput_ops_per_vsec(self) -> float:
        if self.makespan_ns == 0:
            return 0.0
        return self.ops * 1e9 / self.makespan_ns

    def to_dict(self) -> dict:
        out = {
            "ops": self.ops, "reads": self.reads, "writes": self.writes,
            "makespan_ns": self.makespan_ns, "wall_s": round(self.wall_s, 3),
            "throughput_ops_per_vsec": round(self.throughput_ops_per_vsec, 1),
            "hit_ratio": round(self.hit_ratio, 4),
            "round_trips": self.round_trips,
            "invalidations_sent": self.invalidations_sent,
            "flush_bytes": self.flush_bytes,
            "max_wait_ns": self.max_wait_ns,
            "by_label": dict(sorted(self.by_label.items())),
            "nodes": self.node_metrics,
        }
        return out


def allocate_lines(cluster: Cluster, count: int) -> list[GlobalAddress]:
    owner = cluster.node(1)
    return [owner.allocate() for _ in range(count)]


def _touch(node, addr, is_write: bool, payload: bytes, events, line_index: int):
    if is_write:
        h = node.xlock(addr)
        seq = h.read_u64(0) + 1
        h.write_u64(0, seq)
        h.write_u64(8, node.node_id)
        if payload:
            h.write(16, payload)
        h.unlock()
        if events is not None:
            events.append(TraceEvent(node.node_id, threading.get_ident(), "w",
                                     line_index, node.node_id, seq,
                                     h.acquire_ticket, h.unlock_ticket))
    else:
        h = node.slock(addr)
        seq = h.read_u64(0)
        writer = h.read_u64(8)
        h.unlock()
        if events is not None:
            events.append(TraceEvent(node.node_id, threading.get_ident(), "r",
                                     line_index, writer, seq,
                                     h.acquire_ticket, h.unlock_ticket))


def run_benchmark(cluster: Cluster, spec: WorkloadSpec,
                  collect_trace: bool = False,
                  lines: list[GlobalAddress] | None = None,
                  ) -> tuple[BenchReport, list[TraceEvent] | None]:
    cfg = cluster.config
    if lines is None:
        lines = allocate_lines(cluster, spec.gcls)
    payload = bytes(i % 251 for i in range(max(0, spec.write_bytes - 16)))
    n_nodes = cfg.compute_nodes

    worker_args = []
    for node_index in range(n_nodes):
        for t in range(spec.threads_per_node):
            worker_args.append((cluster.node(node_index + 1), node_index, t))

    all_events: list[list[TraceEvent]] = [[] if collect_trace else None
                                          for _ in worker_args]
    counts = [[0, 0] for _ in worker_args]      # reads, writes per worker

    def run_worker(idx: int):
        node, node_index, t = worker_args[idx]
        cluster.clock.register_worker()
        events = all_events[idx]
        c = counts[idx]
        for is_write, line in op_stream(spec, node_index, n_nodes, t):
            _touch(node, lines[line], is_write, payload if is_write else b"",
                   events, line)
            c[1 if is_write else 0] += 1

    started = time.monotonic()
    if cfg.deterministic:
        cluster.clock.register_worker()
        streams = [op_stream(spec, node_index, n_nodes, t)
                   for _, node_index, t in worker_args]
        live = list(range(len(streams)))
        while live:
            still = []
            for idx in live:
                step = next(streams[idx], None)
                if step is None:
                    continue
                node, node_index, t = worker_args[idx]
                is_write, line = step
                _touch(node, lines[line], is_write,
                       payload if is_write else b"", all_events[idx], line)
                counts[idx][1 if is_write else 0] += 1
                still.append(idx)
            live = still
    else:
        threads = [threading.Thread(target=run_worker, args=(i,),
                                    name=f"bench-{i}")
                   for i in range(len(worker_args))]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    wall = time.monotonic() - started

    metrics = cluster.metrics()
    totals = metrics["totals"]
    fabric = metrics["fabric"]
    accesses = totals.get("accesses", 0)
    reads = sum(c[0] for c in counts)
    writes = sum(c[1] for c in counts)
    report = BenchReport(
        ops=reads + writes, reads=reads, writes=writes,
        makespan_ns=metrics["makespan_ns"], wall_s=wall,
        hit_ratio=(totals.get("hits", 0) / accesses) if accesses else 0.0,
        round_trips=fabric["round_trips"], by_label=fabric["by_label"],
        invalidations_sent=totals.get("invalidations_sent", 0),
        flush_bytes=totals.get("flush_bytes", 0),
        max_wait_ns=totals.get("max_wait_ns", 0),
        node_metrics=metrics["nodes"],
    )
    events = None
    if collect_trace:
        merged: list[TraceEvent] = []
        for chunk in all_events:
            merged.extend(chunk)
        events = merged
    return report, events


def final_tokens(cluster: Cluster, lines: list[GlobalAddress],
                 node_id: int = 1) -> list[tuple[int, int]]:
    """Read every line's (writer, seq) token after a run has quiesced."""
    node = cluster.node(node_id)
    out = []
    for addr in lines:
        h = node.slock(addr)
        out.append((h.read_u64(8), h.read_u64(0)))
        h.unlock()
    return out
