"""Brute-force serializability oracle for small transaction histories.

A program is a list of ops: ("r", key) or ("w", key, value).  Run a set of
programs concurrently through a transaction engine, record what each
committed transaction read and the final table state, then ask whether ANY
serial order of the committed transactions reproduces both.  With at most a
handful of transactions the permutation space is tiny, so the check is
exact — an engine bug shows up as "no serial order explains this history".
"""

from __future__ import annotations

import threading
from itertools import permutations

from selcc.apps.txn import Table, TxnAborted


def replay_serial(programs, order, initial):
    """Run programs back-to-back in `order`; return (reads per txn, state)."""
    state = dict(initial)
    reads = {i: [] for i in order}
    for i in order:
        for op in programs[i]:
            if op[0] == "r":
                reads[i].append(state.get(op[1], 0))
            else:
                state[op[1]] = op[2]
    return reads, state


def is_serializable(programs, committed, observed_reads, final_state, initial) -> bool:
    idxs = [i for i, ok in enumerate(committed) if ok]
    for perm in permutations(idxs):
        reads, state = replay_serial(programs, perm, initial)
        if any(reads[i] != observed_reads[i] for i in perm):
            continue
        if all(state.get(k, 0) == v for k, v in final_state.items()):
            return True
    return not idxs and all(initial.get(k, 0) == v for k, v in final_state.items())


def run_programs(engine, nodes, programs, barrier_start=True):
    """Execute programs concurrently, one thread per program.

    Returns (committed flags, reads per txn) — reads of aborted transactions
    are discarded since nothing they did is allowed to matter.
    """
    n = len(programs)
    committed = [False] * n
    observed: list[list[int]] = [[] for _ in range(n)]
    barrier = threading.Barrier(n) if (barrier_start and n > 1) else None

    def run(i):
        node = nodes[i % len(nodes)]
        node.engine.clock.register_worker()
        txn = engine.begin(node)
        reads: list[int] = []
        try:
            if barrier is not None:
                barrier.wait()
            for op in programs[i]:
                if op[0] == "r":
                    reads.append(txn.read(op[1]))
                else:
                    txn.write(op[1], op[2])
            ok = txn.commit()
        except TxnAborted:
            txn.abort()
            ok = False
        committed[i] = ok
        if ok:
            observed[i] = reads

    if n == 1:
        run(0)
    else:
        threads = [threading.Thread(target=run, args=(i,)) for i in range(n)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    return committed, observed


def check_history(engine, nodes, programs, table: Table, initial_value: int = 0):
    """Run one history and verdict it.  Returns (serializable, committed)."""
    keys = sorted({op[1] for prog in programs for op in prog})
    committed, observed = run_programs(engine, nodes, programs)
    values = table.read_all(nodes[0])
    final = {k: values[k] for k in keys}
    initial = {k: initial_value for k in keys}
    ok = is_serializable(programs, committed, observed, final, initial)
    return ok, committed
