"""Fairness experiments: lease-budget sweep and single-writer starvation.

Both experiments hammer one hot line from every compute node for a fixed
wall-clock duration and report raw per-thread counts; assertions about the
shapes (ordering across lease budgets, writer growth with the anti-starvation
mechanisms on) live with the callers.
"""

from __future__ import annotations

import threading
import time

from selcc.api import Cluster, ClusterConfig


def _write_once(node, addr):
    h = node.xlock(addr)
    h.write_u64(0, h.read_u64(0) + 1)
    h.unlock()


def _read_once(node, addr) -> int:
    h = node.slock(addr)
    v = h.read_u64(0)
    h.unlock()
    return v


def run_write_contention(gamma: float, duration_s: float = 1.0,
                         nodes: int = 4, threads_per_node: int = 2,
                         **overrides) -> dict:
    """All threads write the same line; returns throughput and worst wait.

    The fabric is priced in wall time here (rtt_wall_ns): the point of the
    lease budget is trading remote transfers against local retention, and
    that trade only shows up when a transfer costs more than a local hit.
    """
    overrides.setdefault("rtt_wall_ns", 500_000)
    cfg = ClusterConfig(compute_nodes=nodes, gamma=gamma,
                        workers_per_node=threads_per_node, **overrides)
    with Cluster(cfg) as cluster:
        hot = cluster.node(1).allocate()
        counts = [0] * (nodes * threads_per_node)
        deadline = time.monotonic() + duration_s

        def worker(idx, node):
            cluster.clock.register_worker()
            while time.monotonic() < deadline:
                _write_once(node, hot)
                counts[idx] += 1

        threads = []
        for n in range(nodes):
            for t in range(threads_per_node):
                idx = n * threads_per_node + t
                threads.append(threading.Thread(
                    target=worker, args=(idx, cluster.node(n + 1)),
                    name=f"gamma-{n+1}-{t}"))
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        totals = cluster.metrics()["totals"]
        ops = sum(counts)
        return {
            "gamma": gamma,
            "ops": ops,
            "throughput": ops / duration_s,
            "max_wait_ns": totals["max_wait_ns"],
            "lease_handovers": totals["lease_handovers"],
            "per_thread": list(counts),
        }


def gamma_sweep(gammas=(0.0, 256.0, float("inf")), **kw) -> list[dict]:
    return [run_write_contention(g, **kw) for g in gammas]


def run_single_writer(mechanisms: bool, duration_s: float = 1.5,
                      windows: int = 4, reader_nodes=(2, 3, 4),
                      readers_per_node: int = 2, **overrides) -> dict:
    """One writer vs many readers on one line; samples the writer over time."""
    n_nodes = 1 + len(reader_nodes)
    cfg = ClusterConfig(compute_nodes=max(n_nodes, max(reader_nodes)),
                        spin_waiting=mechanisms, priority_matching=mechanisms,
                        **overrides)
    with Cluster(cfg) as cluster:
        hot = cluster.node(1).allocate()
        writer_count = [0]
        n_readers = len(reader_nodes) * readers_per_node
        reader_counts = [0] * n_readers
        deadline = time.monotonic() + duration_s

        def writer():
            node = cluster.node(1)
            cluster.clock.register_worker()
            while time.monotonic() < deadline:
                _write_once(node, hot)
                writer_count[0] += 1

        def reader(idx, node):
            cluster.clock.register_worker()
            while time.monotonic() < deadline:
                _read_once(node, hot)
                reader_counts[idx] += 1

        threads = [threading.Thread(target=writer, name="swmr-writer")]
        idx = 0
        for nid in reader_nodes:
            for _ in range(readers_per_node):
                threads.append(threading.Thread(
                    target=reader, args=(idx, cluster.node(nid)),
                    name=f"swmr-reader-{idx}"))
                idx += 1
        for t in threads:
            t.start()

        writer_windows = []
        reader_windows = []
        for _ in range(windows):
            time.sleep(duration_s / windows)
            writer_windows.append(writer_count[0])
            reader_windows.append(sum(reader_counts))
        for t in threads:
            t.join()

        return {
            "mechanisms": mechanisms,
            "writer_windows": writer_windows,
            "writer_total": writer_count[0],
            "reader_windows": reader_windows,
            "reader_counts": list(reader_counts),
            "reader_mean": sum(reader_counts) / max(1, n_readers),
        }
