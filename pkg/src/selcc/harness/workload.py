"""Workload shapes: skew, sharing, locality, and per-thread op streams.

The skewed chooser is the bounded zipfian of Gray et al. (the YCSB one):
rank r is drawn with probability proportional to 1/(r+1)^theta over a fixed
population, via the zeta-function rejection-free transform.  theta = 0
degenerates to uniform.

Sharing is modeled by splitting the line population: the first
floor(sharing_ratio * n) lines are visible to every node, the rest are
partitioned per node.  Locality is a chance to repeat the previous line.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field, fields


@dataclass
class WorkloadSpec:
    gcls: int = 1024
    read_ratio: float = 0.5
    zipf_theta: float = 0.0
    sharing_ratio: float = 1.0
    locality_p: float = 0.0
    ops_per_thread: int = 1000
    threads_per_node: int = 2
    write_bytes: int = 64
    seed: int = 1

    def replace(self, **kw) -> "WorkloadSpec":
        current = {f.name: getattr(self, f.name) for f in fields(self)}
        current.update(kw)
        return WorkloadSpec(**current)


class ZipfChooser:
    """Draw ranks in [0, n) with zipfian skew theta (0 = uniform)."""

    def __init__(self, n: int, theta: float, rng: random.Random):
        if n < 1:
            raise ValueError("population must be positive")
        if not 0.0 <= theta < 1.0:
            raise ValueError("theta must be in [0, 1)")
        self.n = n
        self.theta = theta
        self.rng = rng
        if theta:
            self.zetan = sum(1.0 / (i ** theta) for i in range(1, n + 1))
            zeta2 = 1.0 + 0.5 ** theta
            self.alpha = 1.0 / (1.0 - theta)
            self.eta = ((1.0 - (2.0 / n) ** (1.0 - theta))
                        / (1.0 - zeta2 / self.zetan))

    def next(self) -> int:
        if not self.theta:
            return self.rng.randrange(self.n)
        u = self.rng.random()
        uz = u * self.zetan
        if uz < 1.0:
            return 0
        if uz < 1.0 + 0.5 ** self.theta:
            return 1
        return int(self.n * (self.eta * u - self.eta + 1.0) ** self.alpha)


def accessible_lines(spec: WorkloadSpec, node_index: int, n_nodes: int) -> list[int]:
    """The line indices one node may touch: shared prefix + its partition."""
    shared = math.floor(spec.sharing_ratio * spec.gcls)
    mine = [i for i in range(shared, spec.gcls) if (i - shared) % n_nodes == node_index]
    return list(range(shared)) + mine


def op_stream(spec: WorkloadSpec, node_index: int, n_nodes: int, thread_index: int):
    """Yield (is_write, line_index) pairs for one worker thread."""
    lines = accessible_lines(spec, node_index, n_nodes)
    if not lines:
        return
    rng = random.Random(f"{spec.seed}/{node_index}/{thread_index}")
    chooser = ZipfChooser(len(lines), spec.zipf_theta, rng)
    prev = lines[chooser.next()]
    for _ in range(spec.ops_per_thread):
        if spec.locality_p and rng.random() < spec.locality_p:
            line = prev
        else:
            line = lines[chooser.next()]
        prev = line
        yield (rng.random() >= spec.read_ratio), line
