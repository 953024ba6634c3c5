"""Transaction layers over the global latch API.

Three classic concurrency-control engines share one fixed-size tuple heap:

  * TwoPhaseLocking — no-wait 2PL.  Latches are taken with the bounded
    try-variants and held to commit; any refusal aborts, so there is nothing
    to deadlock on.
  * TimestampOrdering — each transaction draws a timestamp from a shared
    fetch-and-add word.  Reads bump a per-tuple read stamp under a short
    latch; commits latch the write set in address order, validate both
    stamps, and install the writes with the transaction's stamp.
  * OptimisticCC — reads record per-tuple versions latch-free of any global
    state; commit enters a cluster-wide critical section (an exclusive latch
    on a token line), re-latches every tuple read to compare versions, then
    latches every written tuple again to install — one latch to validate,
    one to write.

Tuples are 64-byte records: value (8B), version-or-write-stamp (8B), read
stamp (8B), padding.  A transaction runs on one compute node; application
code retries on TxnAborted / a False commit.
"""

from __future__ import annotations

import struct

from selcc.api import ComputeNode, Handle
from selcc.gcl import GlobalAddress

TUPLE_SIZE = 64
_V_OFF = 0          # value
_M1_OFF = 8         # version (OCC) or write stamp (TO)
_M2_OFF = 16        # read stamp (TO)


class TxnAborted(Exception):
    """Raised mid-transaction when continuing cannot succeed; abort and retry."""


class Table:
    """A heap of fixed-size tuples packed onto allocated cache lines."""

    def __init__(self, lines: list[GlobalAddress], tuples: int, per_line: int):
        self.lines = lines
        self.tuples = tuples
        self.per_line = per_line

    @classmethod
    def create(cls, node: ComputeNode, tuples: int) -> "Table":
        layout = node.engine.layout
        per_line = layout.data_size // TUPLE_SIZE
        n_lines = -(-tuples // per_line)
        lines = [node.allocate() for _ in range(n_lines)]
        table = cls(lines, tuples, per_line)
        table.reset(node, 0)
        return table

    def slot(self, i: int) -> tuple[GlobalAddress, int]:
        if not 0 <= i < self.tuples:
            raise IndexError(f"tuple {i} out of range")
        return self.lines[i // self.per_line], (i % self.per_line) * TUPLE_SIZE

    def reset(self, node: ComputeNode, value: int):
        """Set every tuple to (value, stamp 0, stamp 0)."""
        record = struct.pack("<QQQ", value, 0, 0) + bytes(TUPLE_SIZE - 24)
        for line_no, line in enumerate(self.lines):
            first = line_no * self.per_line
            n = min(self.per_line, self.tuples - first)
            if n <= 0:
                break
            with node.xlock(line) as h:
                h.write(0, record * n)

    def read_all(self, node: ComputeNode) -> list[int]:
        """Every tuple's value, via shared latches (use when quiescent)."""
        out: list[int] = []
        for line_no, line in enumerate(self.lines):
            first = line_no * self.per_line
            n = min(self.per_line, self.tuples - first)
            if n <= 0:
                break
            with node.slock(line) as h:
                for t in range(n):
                    out.append(int.from_bytes(h.read(t * TUPLE_SIZE, 8), "little"))
        return out

    def sum_values(self, node: ComputeNode) -> int:
        return sum(self.read_all(node))


def _read_tuple_fields(h: Handle, off: int) -> tuple[int, int, int]:
    raw = h.read(off, 24)
    return struct.unpack("<QQQ", raw)


# ----------------------------------------------------------------------
# no-wait two-phase locking

class TwoPhaseLocking:
    name = "2pl"

    def __init__(self, table: Table):
        self.table = table

    def begin(self, node: ComputeNode) -> "TplTxn":
        return TplTxn(self, node)


class TplTxn:
    def __init__(self, engine: TwoPhaseLocking, node: ComputeNode):
        self.engine = engine
        self.node = node
        self._locks: dict[GlobalAddress, Handle] = {}
        self._line_reads: dict[GlobalAddress, dict[int, int]] = {}
        self._writes: dict[int, int] = {}
        self._done = False

    def _abort_now(self):
        self.abort()
        raise TxnAborted()

    def _latched(self, line: GlobalAddress, write: bool) -> Handle:
        h = self._locks.get(line)
        if h is None:
            h = (self.node.try_xlock(line) if write else self.node.try_slock(line))
            if h is None:
                self._abort_now()
            self._locks[line] = h
            return h
        if write and h.mode != "write":
            # lock upgrade: trade the shared latch for an exclusive one, then
            # prove nothing we read from this line changed in the window
            reads = self._line_reads.get(line, {})
            h.unlock()
            del self._locks[line]
            h = self.node.try_xlock(line)
            if h is None:
                self._abort_now()
            self._locks[line] = h
            for off, seen in reads.items():
                if h.read_u64(off) != seen:
                    self._abort_now()
        return h

    def read(self, i: int) -> int:
        if i in self._writes:
            return self._writes[i]
        line, off = self.engine.table.slot(i)
        h = self._latched(line, write=False)
        value = h.read_u64(off + _V_OFF)
        self._line_reads.setdefault(line, {})[off + _V_OFF] = value
        return value

    def read_for_update(self, i: int) -> int:
        line, off = self.engine.table.slot(i)
        h = self._latched(line, write=True)
        if i in self._writes:
            return self._writes[i]
        return h.read_u64(off + _V_OFF)

    def write(self, i: int, value: int):
        line, _ = self.engine.table.slot(i)
        self._latched(line, write=True)
        self._writes[i] = value

    def commit(self) -> bool:
        if self._done:
            return False
        for i, value in self._writes.items():
            line, off = self.engine.table.slot(i)
            self._locks[line].write_u64(off + _V_OFF, value)
        self._release()
        return True

    def abort(self):
        if not self._done:
            self._release()

    def _release(self):
        self._done = True
        for h in self._locks.values():
            h.unlock()
        self._locks.clear()


# ----------------------------------------------------------------------
# timestamp ordering

class TimestampOrdering:
    name = "to"

    def __init__(self, table: Table, bootstrap: ComputeNode):
        self.table = table
        line = bootstrap.allocate()
        with bootstrap.xlock(line) as h:
            h.write_u64(0, 0)
        self.ts_word = line.word(bootstrap.engine.layout.data_offset)

    def begin(self, node: ComputeNode) -> "ToTxn":
        return ToTxn(self, node, node.atomic(self.ts_word, 1) + 1)


class ToTxn:
    def __init__(self, engine: TimestampOrdering, node: ComputeNode, ts: int):
        self.engine = engine
        self.node = node
        self.ts = ts
        self._reads: dict[int, int] = {}
        self._writes: dict[int, int] = {}
        self._done = False

    def read(self, i: int) -> int:
        if i in self._writes:
            return self._writes[i]
        if i in self._reads:
            return self._reads[i]
        line, off = self.engine.table.slot(i)
        with self.node.xlock(line) as h:
            value, wts, rts = _read_tuple_fields(h, off)
            if wts > self.ts:
                raise TxnAborted()              # a future version already exists
            if rts < self.ts:
                h.write_u64(off + _M2_OFF, self.ts)
        self._reads[i] = value
        return value

    read_for_update = read

    def write(self, i: int, value: int):
        self._writes[i] = value

    def commit(self) -> bool:
        if self._done:
            return False
        self._done = True
        if not self._writes:
            return True
        by_line: dict[GlobalAddress, list[int]] = {}
        for i in self._writes:
            by_line.setdefault(self.engine.table.slot(i)[0], []).append(i)
        handles: list[Handle] = []
        ok = True
        try:
            # address order keeps concurrent committers cycle-free
            for line in sorted(by_line):
                handles.append(self.node.xlock(line))
            for h, line in zip(handles, sorted(by_line)):
                for i in by_line[line]:
                    off = self.engine.table.slot(i)[1]
                    _, wts, rts = _read_tuple_fields(h, off)
                    if wts > self.ts or rts > self.ts:
                        ok = False              # a later transaction got here first
                        break
                if not ok:
                    break
            if ok:
                for h, line in zip(handles, sorted(by_line)):
                    for i in by_line[line]:
                        off = self.engine.table.slot(i)[1]
                        h.write_u64(off + _V_OFF, self._writes[i])
                        h.write_u64(off + _M1_OFF, self.ts)
        finally:
            for h in handles:
                h.unlock()
        return ok

    def abort(self):
        self._done = True


# ----------------------------------------------------------------------
# optimistic concurrency control

class OptimisticCC:
    name = "occ"

    def __init__(self, table: Table, bootstrap: ComputeNode):
        self.table = table
        self.token = bootstrap.allocate()
        with bootstrap.xlock(self.token) as h:
            h.write_u64(0, 0)

    def begin(self, node: ComputeNode) -> "OccTxn":
        return OccTxn(self, node)


class OccTxn:
    def __init__(self, engine: OptimisticCC, node: ComputeNode):
        self.engine = engine
        self.node = node
        self._reads: dict[int, tuple[int, int]] = {}    # i -> (value, version)
        self._writes: dict[int, int] = {}
        self._done = False

    def read(self, i: int) -> int:
        if i in self._writes:
            return self._writes[i]
        if i in self._reads:
            return self._reads[i][0]
        line, off = self.engine.table.slot(i)
        with self.node.slock(line) as h:
            value = h.read_u64(off + _V_OFF)
            version = h.read_u64(off + _M1_OFF)
        self._reads[i] = (value, version)
        return value

    read_for_update = read

    def write(self, i: int, value: int):
        self._writes[i] = value

    def commit(self) -> bool:
        if self._done:
            return False
        self._done = True
        if not self._reads and not self._writes:
            return True
        token = self.node.xlock(self.engine.token)   # cluster-wide commit section
        try:
            for i, (_, version) in self._reads.items():
                line, off = self.engine.table.slot(i)
                with self.node.slock(line) as h:     # latch one: validate
                    current = h.read_u64(off + _M1_OFF)
                if current != version:
                    return False
            for i, value in self._writes.items():
                line, off = self.engine.table.slot(i)
                with self.node.xlock(line) as h:     # latch two: install
                    h.write_u64(off + _V_OFF, value)
                    h.write_u64(off + _M1_OFF, h.read_u64(off + _M1_OFF) + 1)
        finally:
            token.unlock()
        return True

    def abort(self):
        self._done = True


ENGINES = {
    "2pl": TwoPhaseLocking,
    "to": TimestampOrdering,
    "occ": OptimisticCC,
}


def make_engine(name: str, table: Table, bootstrap: ComputeNode):
    if name == "2pl":
        return TwoPhaseLocking(table)
    if name == "to":
        return TimestampOrdering(table, bootstrap)
    if name == "occ":
        return OptimisticCC(table, bootstrap)
    raise ValueError(f"unknown transaction engine {name!r}")


def transfer(engine, node: ComputeNode, src: int, dst: int, amount: int) -> bool:
    """Move `amount` between two tuples; False means aborted (retry)."""
    txn = engine.begin(node)
    try:
        a = txn.read_for_update(src)
        b = txn.read_for_update(dst)
        if a >= amount:
            txn.write(src, a - amount)
            txn.write(dst, b + amount)
        return txn.commit()
    except TxnAborted:
        return False
