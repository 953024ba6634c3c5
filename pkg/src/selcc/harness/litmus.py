"""Memory-model litmus tests over latched line accesses.

Each test runs many rounds with persistent role threads rendezvousing on a
barrier.  Round r writes the value r, and values on a line only ever grow,
so "stale" is simply "less than the round number" — no per-round reset of
the lines is needed.  Because every access holds the line's global latch,
none of the weak-memory outcomes these tests probe for is allowed; a single
forbidden observation is a coherence bug.

sb    store buffering: both writers must not miss each other's store.
mp    message passing: a reader that sees the flag must see the payload.
iriw  independent reads of independent writes: two readers must not
      disagree on the order of two unrelated writes.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

from selcc.api import Cluster

TESTS = ("sb", "mp", "iriw")


@dataclass
class LitmusResult:
    test: str
    iters: int
    forbidden: int

    @property
    def ok(self) -> bool:
        return self.forbidden == 0


def _write(node, addr, value):
    h = node.xlock(addr)
    h.write_u64(0, value)
    h.unlock()


def _read(node, addr) -> int:
    h = node.slock(addr)
    v = h.read_u64(0)
    h.unlock()
    return v


def run_litmus(cluster: Cluster, test: str, iters: int = 1000) -> LitmusResult:
    test = test.lower()
    if test not in TESTS:
        raise ValueError(f"unknown litmus test {test!r}")
    if test == "sb":
        roles, judge = _sb(cluster)
    elif test == "mp":
        roles, judge = _mp(cluster)
    else:
        roles, judge = _iriw(cluster)

    obs: list = [None] * len(roles)
    barrier = threading.Barrier(len(roles) + 1)
    stop = False
    errors: list[BaseException] = []

    def runner(idx, fn):
        cluster.clock.register_worker()
        try:
            for r in range(1, iters + 1):
                barrier.wait()
                if stop:
                    return
                try:
                    obs[idx] = fn(r)
                except Exception as e:      # noqa: BLE001 - must not wedge the barrier
                    errors.append(e)
                    obs[idx] = None
                barrier.wait()
        except threading.BrokenBarrierError:
            return                          # the driver tore the rendezvous down

    threads = [threading.Thread(target=runner, args=(i, fn), name=f"litmus-{test}-{i}")
               for i, fn in enumerate(roles)]
    for t in threads:
        t.start()

    forbidden = 0
    try:
        for r in range(1, iters + 1):
            barrier.wait()          # release the roles into round r
            barrier.wait()          # wait for every role to finish it
            if errors:
                raise errors[0]
            if judge(r, obs):
                forbidden += 1
    finally:
        stop = True
        barrier.abort()
        for t in threads:
            t.join()
    return LitmusResult(test=test, iters=iters, forbidden=forbidden)


def _sb(cluster):
    n1, n2 = cluster.node(1), cluster.node(2)
    x = n1.allocate()
    y = n1.allocate()

    def role_a(r):
        _write(n1, x, r)
        return _read(n1, y)

    def role_b(r):
        _write(n2, y, r)
        return _read(n2, x)

    def judge(r, obs):
        # both stores "buffered": each writer missed the other's round-r store
        return obs[0] < r and obs[1] < r

    return [role_a, role_b], judge


def _mp(cluster):
    n1, n2 = cluster.node(1), cluster.node(2)
    data = n1.allocate()
    flag = n1.allocate()

    def producer(r):
        _write(n1, data, r)
        _write(n1, flag, r)
        return 0

    def consumer(r):
        f = _read(n2, flag)
        d = _read(n2, data)
        return (f, d)

    def judge(r, obs):
        f, d = obs[1]
        # flag published but the payload written before it is still stale
        return d < f

    return [producer, consumer], judge


def _iriw(cluster):
    n1, n2, n3, n4 = (cluster.node(i) for i in (1, 2, 3, 4))
    x = n1.allocate()
    y = n2.allocate()

    def w_x(r):
        _write(n1, x, r)
        return 0

    def w_y(r):
        _write(n2, y, r)
        return 0

    def r_xy(r):
        return (_read(n3, x), _read(n3, y))

    def r_yx(r):
        return (_read(n4, y), _read(n4, x))

    def judge(r, obs):
        ax, ay = obs[2]
        by, bx = obs[3]
        # readers disagree on the order of the two round-r writes
        return ax >= r and ay < r and by >= r and bx < r

    return [w_x, w_y, r_xy, r_yx], judge
