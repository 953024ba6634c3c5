"""In-process emulation of a one-sided RDMA fabric.

Memory nodes are passive byte ranges; compute nodes get a registered reply
buffer plus a bounded receive ring for small messages.  Verbs (READ, WRITE,
CAS, FAA) are posted in batches over a queue pair; one batch = one round
trip, and the whole batch executes atomically against the target region.

Time is simulated with a virtual clock: each round trip charges the posting
thread a fixed latency, local accesses charge a much smaller one.  Nothing
sleeps; the clock only accumulates, so runs are as fast as Python allows.

Completions are decoupled from posting: post_batch buffers a completion
record and poll_completions harvests it.  A queue pair refuses to exceed its
outstanding-request cap, which is what gives the eviction path its
backpressure.
"""

from __future__ import annotations

import itertools
import threading
import time
from collections import deque
from contextlib import contextmanager
from dataclasses import dataclass, field


class FabricError(Exception):
    pass


@dataclass(frozen=True)
class LatencyModel:
    remote_rtt_ns: int = 2_000
    local_access_ns: int = 100
    # when set, every remote verb also sleeps this many real ns, so wall
    # clocks price the fabric too -- for experiments where the cost ratio
    # between local and remote work is the point being measured
    rtt_wall_ns: int | None = None


class Clock:
    """Monotone event tickets plus per-thread virtual time accumulators.

    Tickets give a single total order for trace events across all threads.
    Virtual time is kept per thread so parallel work overlaps: a run's
    simulated makespan is the maximum over its worker threads.
    """

    def __init__(self):
        self._tickets = itertools.count(1)
        self._local = threading.local()
        self._lock = threading.Lock()
        self._worker_cells: list[list[int]] = []

    def next_ticket(self) -> int:
        return next(self._tickets)

    def _cell(self) -> list[int]:
        cell = getattr(self._local, "cell", None)
        if cell is None:
            cell = [0]
            self._local.cell = cell
        return cell

    def register_worker(self):
        """Mark the calling thread's accumulator as part of the makespan."""
        cell = self._cell()
        with self._lock:
            if not any(c is cell for c in self._worker_cells):
                self._worker_cells.append(cell)

    def charge(self, ns: int):
        if getattr(self._local, "absorb", 0):
            return
        self._cell()[0] += ns

    @contextmanager
    def absorbed(self):
        """Suppress charges on this thread — for running another node's
        message handler on a borrowed (waiting) worker thread."""
        self._local.absorb = getattr(self._local, "absorb", 0) + 1
        try:
            yield
        finally:
            self._local.absorb -= 1

    def thread_ns(self) -> int:
        return self._cell()[0]

    def makespan_ns(self) -> int:
        with self._lock:
            return max((c[0] for c in self._worker_cells), default=0)


# work request types; offsets are relative to the target node's region
@dataclass(frozen=True)
class Read:
    offset: int
    length: int


@dataclass(frozen=True)
class Write:
    offset: int
    payload: bytes


@dataclass(frozen=True)
class Cas:
    offset: int
    expect: int
    swap: int


@dataclass(frozen=True)
class Faa:
    offset: int
    delta: int


_U64 = (1 << 64) - 1


class MemoryRegion:
    STRIPE = 4096     # bytes per lock stripe; one cache line never spans two
    N_STRIPES = 257   # prime, so aliasing spreads evenly

    def __init__(self, node_id: int, size: int):
        self.node_id = node_id
        self.data = bytearray(size)
        self._stripes = [threading.Lock() for _ in range(self.N_STRIPES)]

    @property
    def size(self) -> int:
        return len(self.data)

    def stripe_locks(self, lo: int, hi: int) -> tuple:
        """Locks covering byte span [lo, hi), in a global acquisition order."""
        first = lo // self.STRIPE
        last = max(lo, hi - 1) // self.STRIPE
        if first == last:
            return (self._stripes[first % self.N_STRIPES],)
        idxs = sorted({i % self.N_STRIPES for i in range(first, last + 1)})
        return tuple(self._stripes[i] for i in idxs)


class ComputeEndpoint:
    """Registered state of one compute node: reply slots and a receive ring."""

    def __init__(self, node_id: int, slot_count: int, slot_payload_size: int,
                 ring_capacity: int):
        self.node_id = node_id
        self.slot_payload_size = slot_payload_size
        self.slot_stride = slot_payload_size + 1  # payload then 1 status byte
        self.slot_count = slot_count
        self.reply = bytearray(self.slot_stride * slot_count)
        self.reply_lock = threading.Lock()
        self.ring: deque[bytes] = deque()
        self.ring_capacity = ring_capacity
        self.ring_cond = threading.Condition()

    def check_slot(self, offset: int):
        if offset % self.slot_stride != 0 or not 0 <= offset < len(self.reply):
            raise FabricError(f"bad reply slot offset {offset}")

    # local (same-node) slot access; not a fabric verb, costs no round trip
    def read_slot(self, offset: int) -> tuple[int, bytes]:
        self.check_slot(offset)
        with self.reply_lock:
            status = self.reply[offset + self.slot_payload_size]
            payload = bytes(self.reply[offset:offset + self.slot_payload_size])
        return status, payload

    def slot_status(self, offset: int) -> int:
        # single-byte read is atomic enough to poll without the lock
        return self.reply[offset + self.slot_payload_size]

    def reset_slot(self, offset: int, status: int):
        self.check_slot(offset)
        with self.reply_lock:
            self.reply[offset + self.slot_payload_size] = status


class QueuePair:
    def __init__(self, local_id, remote_id, max_outstanding: int):
        self.local_id = local_id
        self.remote_id = remote_id
        self.max_outstanding = max_outstanding
        self.lock = threading.Lock()
        self.outstanding = 0
        self.outstanding_peak = 0
        self.round_trips = 0
        self.bytes_sent = 0
        self.bytes_received = 0
        self._completions: deque[tuple[int, object]] = deque()


class FabricMetrics:
    """Fabric-wide counters, sharded per thread so recording never locks."""

    _KEYS = ("round_trips", "messages_sent", "messages_ring_dropped",
             "bytes_sent", "bytes_received")

    def __init__(self):
        self.lock = threading.Lock()
        self._local = threading.local()
        self._cells: list[dict] = []

    def _cell(self) -> dict:
        cell = getattr(self._local, "cell", None)
        if cell is None:
            cell = {key: 0 for key in self._KEYS}
            cell["by_label"] = {}
            with self.lock:
                self._cells.append(cell)
            self._local.cell = cell
        return cell

    def record(self, label: str, sent: int = 0, received: int = 0):
        cell = self._cell()
        cell["round_trips"] += 1
        by = cell["by_label"]
        by[label] = by.get(label, 0) + 1
        cell["bytes_sent"] += sent
        cell["bytes_received"] += received

    def count_message(self, label: str, nbytes: int, dropped: bool):
        cell = self._cell()
        cell["round_trips"] += 1
        by = cell["by_label"]
        by[label] = by.get(label, 0) + 1
        if dropped:
            cell["messages_ring_dropped"] += 1
        else:
            cell["messages_sent"] += 1
            cell["bytes_sent"] += nbytes

    def snapshot(self) -> dict:
        with self.lock:
            cells = list(self._cells)
        out: dict = {key: 0 for key in self._KEYS}
        out["by_label"] = {}
        merged = out["by_label"]
        for cell in cells:
            for key in self._KEYS:
                out[key] += cell[key]
            for label, n in list(cell["by_label"].items()):
                merged[label] = merged.get(label, 0) + n
        return out


class Fabric:
    def __init__(self, latency: LatencyModel | None = None, clock: Clock | None = None,
                 max_outstanding: int = 16):
        self.latency = latency or LatencyModel()
        self.clock = clock or Clock()
        self.max_outstanding = max_outstanding
        self.metrics = FabricMetrics()
        self._regions: dict[int, MemoryRegion] = {}
        self._endpoints: dict[int, ComputeEndpoint] = {}
        self._qps: dict[tuple, QueuePair] = {}
        self._qp_lock = threading.Lock()
        # node_id -> callable(budget) that drains that node's message ring.
        # Lets a thread waiting on a reply run the responder's handler
        # itself instead of stalling on the scheduler.
        self.service_hooks: dict[int, object] = {}

    # ---- registration -------------------------------------------------

    def register_memory_node(self, node_id: int, size: int) -> MemoryRegion:
        if node_id in self._regions:
            raise FabricError(f"memory node {node_id} already registered")
        if size <= 0:
            raise FabricError("region size must be positive")
        region = MemoryRegion(node_id, size)
        self._regions[node_id] = region
        return region

    def register_compute_endpoint(self, node_id: int, slot_count: int,
                                  slot_payload_size: int,
                                  ring_capacity: int = 128) -> ComputeEndpoint:
        if node_id in self._endpoints:
            raise FabricError(f"compute node {node_id} already registered")
        ep = ComputeEndpoint(node_id, slot_count, slot_payload_size, ring_capacity)
        self._endpoints[node_id] = ep
        return ep

    def region(self, node_id: int) -> MemoryRegion:
        try:
            return self._regions[node_id]
        except KeyError:
            raise FabricError(f"unknown memory node {node_id}") from None

    def endpoint(self, node_id: int) -> ComputeEndpoint:
        try:
            return self._endpoints[node_id]
        except KeyError:
            raise FabricError(f"unknown compute node {node_id}") from None

    def qp(self, local_id, remote_id) -> QueuePair:
        key = (local_id, remote_id)
        pair = self._qps.get(key)     # lock-free fast path; reads are GIL-safe
        if pair is not None:
            return pair
        with self._qp_lock:
            pair = self._qps.get(key)
            if pair is None:
                pair = QueuePair(local_id, remote_id, self.max_outstanding)
                self._qps[key] = pair
            return pair

    def queue_pairs(self) -> list[QueuePair]:
        with self._qp_lock:
            return list(self._qps.values())

    # ---- one-sided verbs ----------------------------------------------

    def post_batch(self, qp: QueuePair, requests, label: str = "batch", tag=None) -> list:
        """Execute a batch of verbs against qp's remote memory node.

        The batch is applied in order under the region lock, so it is atomic
        with respect to every other batch hitting that node.  Counts as one
        round trip.  Completion stays pending until poll_completions.
        """
        if not requests:
            raise FabricError("empty batch")
        region = self.region(qp.remote_id)
        with qp.lock:
            if qp.outstanding + len(requests) > qp.max_outstanding:
                raise FabricError(
                    f"qp {qp.local_id}->{qp.remote_id}: outstanding cap "
                    f"{qp.max_outstanding} exceeded")
            qp.outstanding += len(requests)
            qp.outstanding_peak = max(qp.outstanding_peak, qp.outstanding)

        lo = hi = None
        spans = []
        for wr in requests:
            if isinstance(wr, Write):
                length = len(wr.payload)
            elif isinstance(wr, Read):
                length = wr.length
            else:
                length = 8
            spans.append(length)
            end = wr.offset + length
            lo = wr.offset if lo is None or wr.offset < lo else lo
            hi = end if hi is None or end > hi else hi

        sent = received = 0
        results = []
        # lock only the stripes the batch touches: batches for different
        # lines run in parallel, batches for the same line stay atomic
        locks = region.stripe_locks(lo, hi)
        for lk in locks:
            lk.acquire()
        try:
            for wr, length in zip(requests, spans):
                results.append(self._apply(region, wr))
                if isinstance(wr, Write):
                    sent += length
                elif isinstance(wr, Read):
                    received += length
                else:
                    sent += 8
                    received += 8
        finally:
            for lk in reversed(locks):
                lk.release()

        with qp.lock:
            qp.round_trips += 1
            qp.bytes_sent += sent
            qp.bytes_received += received
            qp._completions.append((len(requests), tag))
        self.metrics.record(label, sent, received)
        self.clock.charge(self.latency.remote_rtt_ns)
        if self.latency.rtt_wall_ns:
            time.sleep(self.latency.rtt_wall_ns / 1e9)
        return results

    def poll_completions(self, qp: QueuePair) -> list:
        """Harvest finished work requests; returns the tags posted with them."""
        tags = []
        with qp.lock:
            while qp._completions:
                count, tag = qp._completions.popleft()
                qp.outstanding -= count
                if tag is not None:
                    tags.append(tag)
        return tags

    def _apply(self, region: MemoryRegion, wr):
        data = region.data
        if isinstance(wr, Read):
            if wr.length < 0 or wr.offset < 0 or wr.offset + wr.length > len(data):
                raise FabricError("READ out of bounds")
            return bytes(data[wr.offset:wr.offset + wr.length])
        if isinstance(wr, Write):
            end = wr.offset + len(wr.payload)
            if wr.offset < 0 or end > len(data):
                raise FabricError("WRITE out of bounds")
            data[wr.offset:end] = wr.payload
            return len(wr.payload)
        if isinstance(wr, Cas):
            self._check_word(data, wr.offset)
            prior = int.from_bytes(data[wr.offset:wr.offset + 8], "little")
            if prior == wr.expect:
                data[wr.offset:wr.offset + 8] = (wr.swap & _U64).to_bytes(8, "little")
            return prior
        if isinstance(wr, Faa):
            self._check_word(data, wr.offset)
            prior = int.from_bytes(data[wr.offset:wr.offset + 8], "little")
            data[wr.offset:wr.offset + 8] = ((prior + wr.delta) & _U64).to_bytes(8, "little")
            return prior
        raise FabricError(f"unknown work request {wr!r}")

    @staticmethod
    def _check_word(data, offset):
        if offset % 8 != 0 or offset < 0 or offset + 8 > len(data):
            raise FabricError("atomic target must be an aligned in-bounds 8-byte word")

    # ---- messaging ----------------------------------------------------

    def send_message(self, src_id: int, dst_id: int, payload: bytes,
                     label: str = "send_inv") -> bool:
        """Append a message to dst's receive ring.  One round trip.

        Returns False when the ring is full; the message is dropped and the
        sender is expected to retry after its resend interval.
        """
        ep = self.endpoint(dst_id)
        qp = self.qp(src_id, dst_id)
        self.clock.charge(self.latency.remote_rtt_ns)
        if self.latency.rtt_wall_ns:
            time.sleep(self.latency.rtt_wall_ns / 1e9)
        with ep.ring_cond:
            if len(ep.ring) >= ep.ring_capacity:
                self.metrics.count_message(label, 0, dropped=True)
                return False
            ep.ring.append(bytes(payload))
            ep.ring_cond.notify()
        with qp.lock:
            qp.round_trips += 1
            qp.bytes_sent += len(payload)
        self.metrics.count_message(label, len(payload), dropped=False)
        return True

    def recv_message(self, node_id: int, timeout: float | None = None) -> bytes | None:
        ep = self.endpoint(node_id)
        with ep.ring_cond:
            if not ep.ring and timeout:
                ep.ring_cond.wait(timeout)
            if ep.ring:
                return ep.ring.popleft()
        return None

    def ring_depth(self, node_id: int) -> int:
        # advisory and lock-free: len() on a deque is atomic, and anyone who
        # acts on the answer re-checks under the ring lock in recv_message
        return len(self.endpoint(node_id).ring)

    def write_reply(self, src_id: int, dst_id: int, slot_offset: int,
                    payload: bytes, status: int, label: str = "reply"):
        """One-sided write of payload + status flag into dst's reply slot.

        Payload lands first, the status byte last, all under the region lock,
        so a poller that sees the flag also sees the payload.
        """
        ep = self.endpoint(dst_id)
        ep.check_slot(slot_offset)
        if len(payload) > ep.slot_payload_size:
            raise FabricError("reply payload exceeds slot size")
        qp = self.qp(src_id, dst_id)
        with ep.reply_lock:
            ep.reply[slot_offset:slot_offset + len(payload)] = payload
            ep.reply[slot_offset + ep.slot_payload_size] = status
        with qp.lock:
            qp.round_trips += 1
            qp.bytes_sent += len(payload) + 1
        self.metrics.record(label, sent=len(payload) + 1)
        self.clock.charge(self.latency.remote_rtt_ns)
