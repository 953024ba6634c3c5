"""Per-node coherence engine: lazy latch release over one-sided atomics.

Ownership of a line is whatever the 64-bit latch word in remote memory says;
each node additionally memoizes its own standing (Invalid / Shared /
Modified) in its cache frame so repeat accesses stay local.  Latches are
released lazily: a node keeps global ownership after unlocking locally until
somebody else asks for the line or the frame is evicted.

Conflicts are resolved peer to peer.  A failed remote acquire tells the
requester who stands in the way, and it sends each obstacle a small
invalidation message:

  * writer vs. exclusive holder: the holder forwards its copy straight into
    the requester's reply slot, then moves the exclusive field over with one
    FAA.  Dirty bytes travel with the copy; memory is not written.
  * reader vs. exclusive holder: the holder flushes its dirty range and
    demotes itself to shared — one batched round trip — then forwards the
    copy to the requester, which becomes a second sharer.
  * writer vs. readers: every reader clears its bitmap bit and acknowledges;
    the writer retries its CAS once the replies are in.

Receivers may refuse (frame already invalid, evicted, or busy under a local
access): they reply DROPPED and the sender retries after an interval that
shrinks with its retry count.  A sender never walks away from a message it
managed to enqueue — every message gets exactly one reply, which is what
keeps reply slots reusable and grants from going astray.  The only grant a
node may receive without actively waiting on a slot is a lease push, which
always flushes first, so a self-owned latch word discovered on retry can be
trusted together with the bytes read in the same batch.

Starvation is handled with three cooperating mechanisms: lease counters that
force a hot holder to hand the line to the highest-priority recorded
requester, priority aging on retries, and a reader spin gate that holds back
shared re-acquisition while a high-priority writer is starving.
"""

from __future__ import annotations

import math
import threading
import time
from dataclasses import dataclass, field

from selcc import latchword as lw
from selcc.cache import CacheFrame, CacheFull, Ownership, ShardedCache
from selcc.fabric import Cas, Faa, Fabric, Read, Write
from selcc.gcl import GclLayout, GlobalAddress
from selcc.messages import (
    REPLY_ACK, REPLY_DROPPED, REPLY_PENDING,
    InvalidationCase, InvalidationMessage, compose_reply, parse_reply,
)


class AccessMode:
    READ = "read"
    WRITE = "write"


@dataclass
class ProtocolConfig:
    layout: GclLayout = field(default_factory=GclLayout)
    l_out: int = 16                  # outstanding work requests per queue pair
    ring_capacity: int = 128         # receive ring depth per node
    resend_c: int = 16               # resend interval = c * RTT / retry_count
    gamma: float = 256.0             # lease budget; math.inf disables leases
    upgrade_attempts: int = 4        # shared->exclusive CAS tries before fallback
    shards: int = 64
    cache_frames: int = 1024         # local frame budget
    free_threshold_frac: float = 0.05
    handler_threads: int = 2
    workers_per_node: int = 8        # P in the lease formula
    reply_slots: int = 256
    spin_waiting: bool = True
    priority_matching: bool = True
    spin_unit_ns: int | None = None  # default: one RTT
    spin_priority_threshold: int = 2
    dirty_boundaries: bool = True
    caching: bool = True
    deterministic: bool = False
    wait_scale: float = 1.0          # real ns charged per virtual ns while waiting
    # fault hooks for the verification harness; never set outside tests
    fault_skip_reader_invalidation: bool = False
    fault_skip_handover_flush: bool = False


class ProtocolMetrics:
    FIELDS = (
        "accesses", "hits", "misses", "invalidations_sent", "drops_sent",
        "acks_sent", "flush_bytes", "evicted_frames", "lease_handovers",
        "starved_releases", "upgrade_fallbacks", "messages_handled",
        "grants_sent", "grants_adopted", "grants_returned",
    )

    # counters are sharded per thread so bumping one never takes a lock;
    # snapshot() merges the shards

    def __init__(self):
        self._lock = threading.Lock()
        self._local = threading.local()
        self._cells: list[dict] = []

    def _cell(self) -> dict:
        cell = getattr(self._local, "cell", None)
        if cell is None:
            cell = {name: 0 for name in self.FIELDS}
            cell["max_wait_ns"] = 0
            with self._lock:
                self._cells.append(cell)
            self._local.cell = cell
        return cell

    def add(self, name: str, delta: int = 1):
        self._cell()[name] += delta

    def note_wait(self, ns: int):
        cell = self._cell()
        if ns > cell["max_wait_ns"]:
            cell["max_wait_ns"] = ns

    def snapshot(self) -> dict:
        with self._lock:
            cells = list(self._cells)
        out = {name: 0 for name in self.FIELDS}
        out["max_wait_ns"] = 0
        for cell in cells:
            for name in self.FIELDS:
                out[name] += cell[name]
            if cell["max_wait_ns"] > out["max_wait_ns"]:
                out["max_wait_ns"] = cell["max_wait_ns"]
        return out


class ProtocolError(Exception):
    pass


class ProtocolNode:
    """Coherence engine for one compute node."""

    def __init__(self, node_id: int, fabric: Fabric, config: ProtocolConfig,
                 idle_callback=None):
        if not 1 <= node_id <= lw.MAX_NODE_ID:
            raise ProtocolError(f"compute node id must be 1..{lw.MAX_NODE_ID}")
        self.node_id = node_id
        self.fabric = fabric
        self.config = config
        self.layout = config.layout
        self.clock = fabric.clock
        self.metrics = ProtocolMetrics()
        self.idle_callback = idle_callback
        self.cache = ShardedCache(config.cache_frames, config.layout, config.shards)
        self.endpoint = fabric.register_compute_endpoint(
            node_id, config.reply_slots, config.layout.gcl_size, config.ring_capacity)
        self._slot_lock = threading.Lock()
        self._free_slots = list(range(0, config.reply_slots * self.endpoint.slot_stride,
                                      self.endpoint.slot_stride))
        self._epoch_lock = threading.Lock()
        self._epoch = 0
        self._evict_lock = threading.Lock()
        self._threads: list[threading.Thread] = []
        self._stop = threading.Event()
        self._tls = threading.local()
        self.eviction = None      # attached by api.Cluster
        fabric.service_hooks[node_id] = self.service_messages

    # ------------------------------------------------------------------
    # small plumbing

    def _qp(self, mem_id: int):
        # queue pair per posting thread keeps the outstanding cap honest.
        # Cache the lookup thread-locally: the fabric's registry takes a
        # global lock, and this runs on every post.
        cache = getattr(self._tls, "qps", None)
        if cache is None:
            cache = self._tls.qps = {}
        qp = cache.get(mem_id)
        if qp is None:
            qp = cache[mem_id] = self.fabric.qp(
                (self.node_id, threading.get_ident()), mem_id)
        return qp

    def _post(self, mem_id: int, requests, label: str):
        qp = self._qp(mem_id)
        results = self.fabric.post_batch(qp, requests, label=label)
        self.fabric.poll_completions(qp)
        return results

    def _next_epoch(self) -> int:
        with self._epoch_lock:
            self._epoch = (self._epoch + 1) & 0xFFFFFFFF
            return self._epoch

    def _take_reply_slot(self) -> int:
        while True:
            with self._slot_lock:
                if self._free_slots:
                    off = self._free_slots.pop()
                    break
            self._idle()
        self.endpoint.reset_slot(off, REPLY_PENDING)
        return off

    def _return_reply_slot(self, off: int):
        with self._slot_lock:
            self._free_slots.append(off)

    def _idle(self):
        if self.idle_callback is not None:
            self.idle_callback()
        else:
            time.sleep(0)

    def _wait_ns(self, ns: int):
        """Burn a simulated interval: virtual charge plus a real-time analogue.

        A waiting worker is idle capacity: spend the real-time wait draining
        our own message ring so invalidations aimed at this node don't sit
        behind a descheduled handler thread.  A thread with nothing to
        service parks in a real sleep — time.sleep(0) only yields, and a
        yield loop burns a full interpreter share.
        """
        self.clock.charge(ns)
        if self.config.deterministic:
            self._idle()
            return
        deadline = time.monotonic_ns() + int(ns * self.config.wait_scale)
        idles = 0
        while True:
            remaining = deadline - time.monotonic_ns()
            if remaining <= 0:
                return
            if self.fabric.ring_depth(self.node_id) > 0:
                self.service_messages(budget=4)
                idles = 0
            elif idles < 2:
                idles += 1
                self._idle()
            else:
                # park for the rest; oversleeping a backoff only makes it
                # gentler, and the ring has its own handler threads
                time.sleep(max(remaining, 20_000) / 1e9)

    def resend_interval_ns(self, retry_count: int) -> int:
        return int(self.config.resend_c * self.fabric.latency.remote_rtt_ns
                   / max(1, retry_count))

    @property
    def spin_unit_ns(self) -> int:
        return self.config.spin_unit_ns or 2 * self.fabric.latency.remote_rtt_ns

    # ------------------------------------------------------------------
    # public access path

    def access(self, addr: GlobalAddress, mode: str, max_rounds: int | None = None) -> CacheFrame | None:
        """Latch addr locally in `mode` with a valid global standing.

        Returns the frame with its local latch held (shared for READ,
        exclusive for WRITE).  With max_rounds set, gives up after that many
        conflict-resolution rounds (or any would-block) and returns None.
        """
        started = time.monotonic_ns()
        self.metrics.add("accesses")
        if not self.config.caching:
            return self._access_uncached(addr, mode, max_rounds)
        no_wait = max_rounds is not None
        while True:
            frame = self._frame_for(addr)
            if mode == AccessMode.READ:
                # hold fresh local reads back while a remote writer is starving:
                # the local latch drains, so our handler can release the share
                self._reader_gate(frame, 1)
            if mode == AccessMode.WRITE:
                if no_wait:
                    if not frame.latch.try_exclusive():
                        self.metrics.add("misses")
                        return None
                    waited = False
                else:
                    waited = frame.latch.acquire_exclusive()
            else:
                if no_wait:
                    if not frame.latch.try_shared():
                        self.metrics.add("misses")
                        return None
                    waited = False
                else:
                    waited = frame.latch.acquire_shared()
            if frame.dead:
                if mode == AccessMode.WRITE:
                    frame.latch.release_exclusive()
                else:
                    frame.latch.release_shared()
                continue
            self._note_local_wait(frame, mode, waited)

            if self._memo_satisfies(frame, mode):
                self.metrics.add("hits")
                self.clock.charge(self.fabric.latency.local_access_ns)
                return frame

            if mode == AccessMode.READ:
                # escalate to exclusive for the fetch; another thread may win it
                frame.latch.release_shared()
                if no_wait:
                    if not frame.latch.try_exclusive():
                        self.metrics.add("misses")
                        return None
                else:
                    frame.latch.acquire_exclusive()
                if frame.dead:
                    frame.latch.release_exclusive()
                    continue
                if self._memo_satisfies(frame, mode):
                    frame.latch.downgrade_to_shared()
                    self.metrics.add("hits")
                    self.clock.charge(self.fabric.latency.local_access_ns)
                    return frame

            ok = self._transition(frame, mode, max_rounds)
            if not ok:
                frame.latch.release_exclusive()
                self.metrics.add("misses")
                return None
            self.metrics.add("misses")
            self.metrics.note_wait(time.monotonic_ns() - started)
            if mode == AccessMode.READ:
                frame.latch.downgrade_to_shared()
            return frame

    def release(self, frame: CacheFrame, mode: str):
        """Drop the local latch; global ownership stays put unless a lease is due."""
        if not self.config.caching:
            self._release_uncached(frame, mode)
            return
        if mode == AccessMode.WRITE:
            if self._lease_due(frame):
                self._lease_handover(frame)
            frame.latch.release_exclusive()
        else:
            frame.latch.release_shared()
            # give the share back early for a lease, or for a starved writer
            # whose invalidation our handler had to drop while we were reading
            if (self._lease_due(frame) or self._spin_release_due(frame)) \
                    and frame.latch.try_exclusive_barge():
                try:
                    if not frame.dead and frame.memo is Ownership.SHARED:
                        if self._lease_due(frame):
                            reason = "lease_handovers"
                        elif self._spin_release_due(frame):
                            reason = "starved_releases"
                        else:
                            reason = None
                        if reason is not None:
                            self._post(frame.addr.node_id,
                                       [Faa(frame.addr.offset,
                                            lw.faa_release_shared(self.node_id))],
                                       label="lease_release")
                            frame.memo = Ownership.INVALID
                            frame.clear_dirty()
                            frame.reset_fairness()
                            self.metrics.add(reason)
                finally:
                    frame.latch.release_exclusive()

    def _spin_release_due(self, frame: CacheFrame) -> bool:
        return self.config.spin_waiting and frame.spin_flag

    def _frame_for(self, addr: GlobalAddress) -> CacheFrame:
        while True:
            try:
                return self.cache.get_or_insert(addr)
            except CacheFull:
                freed = self.evict_cycle()
                if freed == 0:
                    self._idle()

    @staticmethod
    def _memo_satisfies(frame: CacheFrame, mode: str) -> bool:
        if mode == AccessMode.READ:
            return frame.memo in (Ownership.SHARED, Ownership.MODIFIED)
        return frame.memo is Ownership.MODIFIED

    def _note_local_wait(self, frame: CacheFrame, mode: str, waited: bool):
        if not waited:
            if frame.counters_active:
                frame.reset_fairness()
            return
        with frame.meta:
            if frame.counters_active:
                if mode == AccessMode.WRITE:
                    frame.w_waits += 1
                else:
                    frame.r_waits += 1

    # ------------------------------------------------------------------
    # global transitions (caller holds the frame's exclusive local latch)

    def _transition(self, frame: CacheFrame, mode: str, max_rounds: int | None) -> bool:
        if frame.memo is Ownership.SHARED and mode == AccessMode.WRITE:
            return self._upgrade(frame, max_rounds)
        return self._acquire_global(frame, mode, max_rounds)

    def _acquire_global(self, frame: CacheFrame, mode: str, max_rounds: int | None) -> bool:
        addr = frame.addr
        epoch = self._next_epoch()
        retry = 0
        while True:
            retry += 1
            success, prior, data = self._try_latch(addr, mode)
            if success:
                # NB: a reader getting in does NOT clear the spin flag — the
                # starved writer is still out there; only seeing it hold the
                # word exclusively (the failed-FAA path below) proves relief
                self._install(frame, mode, data, dirty=None)
                return True
            excl, readers = lw.decode(prior)
            if mode == AccessMode.WRITE and excl == self.node_id \
                    and self.config.caching:
                # a lease push granted us the line; pushes always flush first,
                # so the bytes batched with the failed CAS are current.  Only
                # cached mode may claim on sight: uncached accessors leave the
                # word for the grant handler, whose CAS back to free must
                # never race a believer it cannot see.
                self._install(frame, AccessMode.WRITE, data, dirty=None)
                return True
            if mode == AccessMode.WRITE and excl == self.node_id:
                if max_rounds is not None and retry > max_rounds:
                    return False
                self._idle()   # uncached: our grant handler will free the word
                continue
            if mode == AccessMode.READ:
                self._post(addr.node_id,
                           [Faa(addr.offset, lw.faa_release_shared(self.node_id))],
                           label="compensate")
                if self.node_id in readers:
                    raise ProtocolError("reader bit already set for this node")
                if excl == self.node_id and self.config.caching:
                    # a pushed grant (answering an earlier write on this node)
                    # landed between attempts.  The word is ours and Modified
                    # serves reads, so take it rather than knock on our own door.
                    self._install(frame, AccessMode.WRITE, data, dirty=None)
                    return True
                if excl == self.node_id:
                    if max_rounds is not None and retry > max_rounds:
                        return False
                    self._idle()   # uncached: our grant handler will free the word
                    continue
                self._clear_spin(frame)   # a writer made it in
            if max_rounds is not None and retry > max_rounds:
                return False
            if mode == AccessMode.WRITE and not excl and \
                    self.config.fault_skip_reader_invalidation:
                if self._fault_stomp(frame, addr, prior):
                    return True
                continue
            if mode == AccessMode.WRITE and excl:
                targets = {excl: InvalidationCase.WRITER_INVALIDATES_MODIFIED}
            elif mode == AccessMode.WRITE:
                targets = {r: InvalidationCase.WRITER_INVALIDATES_SHARED
                           for r in readers if r != self.node_id}
                if self.node_id in readers:
                    raise ProtocolError("writer found its own reader bit set")
            else:
                targets = {excl: InvalidationCase.READER_INVALIDATES_MODIFIED}
            grant = self._invalidate_and_wait(frame, targets, retry, epoch)
            if grant == "granted":
                return True
            # "retry": loop; _invalidate_and_wait already burned the interval

    def _try_latch(self, addr: GlobalAddress, mode: str):
        off = addr.offset
        if mode == AccessMode.WRITE:
            expect, swap = lw.cas_acquire_exclusive(self.node_id)
            reqs = [Cas(off, expect, swap), Read(off, self.layout.gcl_size)]
        else:
            reqs = [Faa(off, lw.faa_acquire_shared(self.node_id)),
                    Read(off, self.layout.gcl_size)]
        prior, data = self._post(addr.node_id, reqs, label="acquire")
        if mode == AccessMode.WRITE:
            return prior == 0, prior, data
        excl, _ = lw.decode(prior)
        return excl is None, prior, data

    def _install(self, frame: CacheFrame, mode: str, data: bytes,
                 dirty: tuple[int, int] | None):
        frame.copy[:] = data
        frame.copy[0:8] = bytes(8)    # local copy of the latch word is meaningless
        frame.memo = Ownership.MODIFIED if mode == AccessMode.WRITE else Ownership.SHARED
        frame.clear_dirty()
        if dirty is not None:
            frame.d_lower, frame.d_higher = dirty

    def _upgrade(self, frame: CacheFrame, max_rounds: int | None) -> bool:
        """Promote Shared to Modified while holding the local latch throughout."""
        addr = frame.addr
        epoch = self._next_epoch()
        expect, swap = lw.cas_upgrade(self.node_id)
        for attempt in range(1, self.config.upgrade_attempts + 1):
            prior, = self._post(addr.node_id, [Cas(addr.offset, expect, swap)],
                                label="upgrade")
            if prior == expect:
                frame.memo = Ownership.MODIFIED
                return True
            excl, readers = lw.decode(prior)
            if excl is not None:
                raise ProtocolError("exclusive holder appeared while we hold a shared bit")
            if max_rounds is not None and attempt >= max_rounds:
                return False
            targets = {r: InvalidationCase.WRITER_INVALIDATES_SHARED
                       for r in readers if r != self.node_id}
            if targets:
                self._invalidate_and_wait(frame, targets, attempt, epoch)
        # fallback for upgrade deadlocks: release our bit, acquire exclusive fresh
        self.metrics.add("upgrade_fallbacks")
        self._post(addr.node_id, [Faa(addr.offset, lw.faa_release_shared(self.node_id))],
                   label="upgrade_fallback")
        frame.memo = Ownership.INVALID
        return self._acquire_global(frame, AccessMode.WRITE, max_rounds)

    def _fault_stomp(self, frame: CacheFrame, addr: GlobalAddress, seen: int) -> bool:
        # test hook: claim the line without invalidating its readers
        prior, data = self._post(addr.node_id,
                                 [Cas(addr.offset, seen, lw.encode(self.node_id, ())),
                                  Read(addr.offset, self.layout.gcl_size)],
                                 label="fault")
        if prior == seen:
            self._install(frame, AccessMode.WRITE, data, dirty=None)
            return True
        return False

    # ------------------------------------------------------------------
    # invalidation round

    def _invalidate_and_wait(self, frame: CacheFrame, targets: dict, retry: int,
                             epoch: int) -> str:
        """Send one invalidation per obstacle and wait for every reply.

        Returns "granted" if a reply carried ownership (the frame is
        installed), else "retry" after burning the resend interval when any
        target refused.
        """
        sent: list[tuple[int, int, InvalidationCase]] = []  # (slot, target, case)
        any_ring_full = False
        for target, case in targets.items():
            slot = self._take_reply_slot()
            msg = InvalidationMessage(
                target=frame.addr, case=case, sender=self.node_id,
                priority=retry, epoch=epoch,
                reply_slot=GlobalAddress(self.node_id, slot))
            if self.fabric.send_message(self.node_id, target, msg.pack()):
                self.metrics.add("invalidations_sent")
                sent.append((slot, target, case))
            else:
                self._return_reply_slot(slot)
                any_ring_full = True

        granted = None
        any_dropped = any_ring_full
        any_acked = False
        for slot, target, case in sent:
            status = self._await_reply(slot, peer=target)
            if status == REPLY_ACK and case is not InvalidationCase.WRITER_INVALIDATES_SHARED:
                _, payload = self.endpoint.read_slot(slot)
                echo, dirty, body = parse_reply(payload)
                if echo != (epoch & 0xFFFFFFFF):
                    raise ProtocolError("reply slot echo does not match our epoch")
                granted = (case, dirty, body)
            elif status == REPLY_ACK:
                any_acked = True
            elif status == REPLY_DROPPED:
                any_dropped = True
            self._return_reply_slot(slot)

        if granted is not None:
            case, dirty, body = granted
            mode = (AccessMode.WRITE
                    if case is InvalidationCase.WRITER_INVALIDATES_MODIFIED
                    else AccessMode.READ)
            self._install(frame, mode, bytes(8) + body, dirty=dirty)
            return "granted"
        if any_dropped and not any_acked:
            # nobody budged: back off before resending.  After partial
            # progress, race straight back — a released reader bit is only
            # ours until someone re-latches it.
            self._wait_ns(self.resend_interval_ns(retry))
        return "retry"

    def _service_node(self, node_id: int, budget: int = 4) -> int:
        """Drain up to `budget` messages from `node_id`'s ring on this thread."""
        if node_id == self.node_id:
            return self.service_messages(budget=budget)
        hook = self.fabric.service_hooks.get(node_id)
        return hook(budget=budget) if hook else 0

    def _await_reply(self, slot: int, peer: int | None = None) -> int:
        spins = 0
        while True:
            status = self.endpoint.slot_status(slot)
            if status != REPLY_PENDING:
                return status
            spins += 1
            if self.config.deterministic:
                self._idle()
                continue
            # the peer that owes us the reply may have no free cycles of its
            # own — run its handler here rather than stall on the scheduler.
            # Handlers never block, so borrowing the thread cannot deadlock.
            serviced = 0
            if peer is not None and self.fabric.ring_depth(peer) > 0:
                serviced = self._service_node(peer)
            if self.fabric.ring_depth(self.node_id) > 0:
                serviced += self.service_messages(budget=4)
            if serviced == 0:
                self._idle()
            if spins % 4096 == 0:
                time.sleep(0.0002)
                if spins > 4096 * 25_000:   # ~ tens of seconds: a reply went missing
                    raise ProtocolError("no reply on slot; handler wedged?")

    # ------------------------------------------------------------------
    # reader spin gate

    def _reader_gate(self, frame: CacheFrame, my_priority: int):
        """Hold a fresh read back while a writer is starving on this line.

        Must only be called with NO local latch held on the frame: the whole
        point is to leave the frame free for our handler to claim.  Waits one
        unit at a time so a cleared flag releases us promptly.
        """
        if not self.config.spin_waiting or not frame.spin_flag:
            return
        if self.config.priority_matching:
            # age our own urgency until it matches the starved writer's
            effective = my_priority
            while frame.spin_flag and effective < frame.starved_writer_priority:
                self._wait_ns(self.spin_unit_ns)
                effective += 1
        else:
            for _ in range(frame.starved_writer_priority):
                if not frame.spin_flag:
                    break
                self._wait_ns(self.spin_unit_ns)

    @staticmethod
    def _clear_spin(frame: CacheFrame):
        if frame.spin_flag:
            with frame.meta:
                frame.spin_flag = False
                frame.starved_writer_priority = 0

    # ------------------------------------------------------------------
    # lease machinery

    def _lease_due(self, frame: CacheFrame) -> bool:
        if math.isinf(self.config.gamma):
            return False
        with frame.meta:
            if not frame.counters_active:
                return False
            score = frame.r_waits / self.config.workers_per_node + frame.w_waits
            return score > self.config.gamma

    def _lease_handover(self, frame: CacheFrame):
        """Hand a hot Modified line over; called with the local latch exclusive."""
        if frame.memo is not Ownership.MODIFIED or frame.dead:
            frame.reset_fairness()
            return
        with frame.meta:
            pending = dict(frame.pending_requests)
        addr = frame.addr
        wrs = []
        dirty = frame.dirty_range()
        if dirty:
            lo, hi = dirty if self.config.dirty_boundaries else (8, self.layout.gcl_size)
            wrs.append(Write(addr.offset + lo, bytes(frame.copy[lo:hi])))
            self.metrics.add("flush_bytes", hi - lo)
        # push only to writers: a freed word grants a waiting reader on its
        # very next optimistic attempt, while pushing exclusivity at a node
        # that only wants to read would strand the latch with no claimant
        writers = {k: v for k, v in pending.items() if v[1]}
        target = None
        if writers:
            target = max(writers.items(), key=lambda kv: kv[1][0])[0]
            wrs.append(Faa(addr.offset, lw.handover_exclusive_delta(target, self.node_id)))
        else:
            wrs.append(Faa(addr.offset, lw.faa_release_exclusive(self.node_id)))
        self._post(addr.node_id, wrs, label="lease_handover")
        if target is not None:
            # tell the grantee outright.  Its requesting thread may have been
            # served through some other holder and moved on; the node itself
            # must claim the word or the line is stranded in its name.  An
            # unclaimed grant is worse than a slow push, so wait out the ring.
            grant = InvalidationMessage(
                target=addr, case=InvalidationCase.EXCLUSIVE_GRANT,
                sender=self.node_id, priority=0, epoch=0,
                reply_slot=GlobalAddress(self.node_id, 0))
            payload = grant.pack()
            while not self.fabric.send_message(self.node_id, target, payload):
                self._idle()
            self.metrics.add("grants_sent")
        frame.memo = Ownership.INVALID
        frame.clear_dirty()
        frame.reset_fairness()
        self.metrics.add("lease_handovers")

    # ------------------------------------------------------------------
    # message handling

    def service_messages(self, budget: int | None = None, block_s: float | None = None) -> int:
        handled = 0
        while budget is None or handled < budget:
            raw = self.fabric.recv_message(self.node_id,
                                           timeout=block_s if handled == 0 else None)
            if raw is None:
                break
            # handler work belongs to this node, not to whichever thread
            # happens to pump the ring for it
            with self.clock.absorbed():
                self._handle(InvalidationMessage.unpack(raw))
            handled += 1
        return handled

    def _reply(self, msg: InvalidationMessage, status: int, payload: bytes):
        self.fabric.write_reply(self.node_id, msg.reply_slot.node_id,
                                msg.reply_slot.offset, payload, status)
        self.metrics.add("acks_sent" if status == REPLY_ACK else "drops_sent")

    def _handle(self, msg: InvalidationMessage):
        self.metrics.add("messages_handled")
        if msg.case is InvalidationCase.EXCLUSIVE_GRANT:
            self._adopt_grant(msg)
            return
        frame = self.cache.lookup(msg.target) if self.config.caching else None
        dropped = compose_reply(msg.epoch)

        if frame is not None and msg.case is InvalidationCase.WRITER_INVALIDATES_SHARED \
                and self.config.spin_waiting \
                and msg.priority >= self.config.spin_priority_threshold:
            with frame.meta:
                frame.spin_flag = True
                frame.starved_writer_priority = max(frame.starved_writer_priority,
                                                    msg.priority)

        if frame is None:
            self._reply(msg, REPLY_DROPPED, dropped)   # absent or already evicted
            return
        if not frame.latch.try_exclusive():
            # ongoing local access: remember the request, arm the lease counters
            frame.record_request(msg.sender, msg.priority, msg.case.wants_write)
            self._reply(msg, REPLY_DROPPED, dropped)
            return
        try:
            wanted = (Ownership.SHARED
                      if msg.case is InvalidationCase.WRITER_INVALIDATES_SHARED
                      else Ownership.MODIFIED)
            if frame.dead or frame.memo is not wanted:
                self._reply(msg, REPLY_DROPPED, dropped)
                return
            addr = frame.addr
            if msg.case is InvalidationCase.WRITER_INVALIDATES_MODIFIED:
                # hand the word over BEFORE the ACK goes out: the moment the
                # new owner sees the payload it may write and even release,
                # and its release must never reach memory ahead of this
                # handover -- out-of-order field arithmetic walks the word
                # through transient states naming innocent nodes as holder,
                # and a writer on such a node would claim a grant it never got
                payload = compose_reply(msg.epoch, bytes(frame.copy[8:]),
                                        frame.dirty_range())
                self._post(addr.node_id,
                           [Faa(addr.offset,
                                lw.handover_exclusive_delta(msg.sender, self.node_id))],
                           label="handover")
                self._reply(msg, REPLY_ACK, payload)
                frame.memo = Ownership.INVALID
                frame.clear_dirty()
                frame.reset_fairness()
            elif msg.case is InvalidationCase.READER_INVALIDATES_MODIFIED:
                wrs = []
                dirty = frame.dirty_range()
                if dirty and not self.config.fault_skip_handover_flush:
                    lo, hi = dirty if self.config.dirty_boundaries else (8, self.layout.gcl_size)
                    wrs.append(Write(addr.offset + lo, bytes(frame.copy[lo:hi])))
                    self.metrics.add("flush_bytes", hi - lo)
                wrs.append(Faa(addr.offset,
                               lw.downgrade_shared_delta(msg.sender, self.node_id)))
                self._post(addr.node_id, wrs, label="handover_flush")
                self._reply(msg, REPLY_ACK, compose_reply(msg.epoch, bytes(frame.copy[8:])))
                frame.memo = Ownership.SHARED
                frame.clear_dirty()
                frame.reset_fairness()
            else:  # WRITER_INVALIDATES_SHARED
                self._post(addr.node_id,
                           [Faa(addr.offset, lw.faa_release_shared(self.node_id))],
                           label="release_shared")
                frame.memo = Ownership.INVALID
                frame.reset_fairness()
                self._reply(msg, REPLY_ACK, compose_reply(msg.epoch))
        finally:
            frame.latch.release_exclusive()

    def _adopt_grant(self, msg: InvalidationMessage):
        """Claim a line whose exclusive word a releasing holder pushed at us.

        The push answers a request this node made earlier, but by the time it
        lands the thread that asked may have been served through some other
        holder and moved on.  A word held in our name with no frame behind it
        strands the line -- every other node knocks forever against a node
        answering "not holder".  So: install the line as Modified if the frame
        is quiet, leave it to an active local acquirer if one holds the latch
        (its next failed CAS spots our id in the word), and put the word back
        to free if we cannot host the line at all.
        """
        if not self.config.caching:
            # the only safe place for a CAS back to free: with caching off no
            # local access path ever claims a pushed word on sight, so nobody
            # can believe the word is theirs while we erase it
            self._give_back(msg.target)
            return
        while True:
            frame = self._frame_for(msg.target)
            if not frame.latch.try_exclusive():
                return
            if not frame.dead:
                break
            frame.latch.release_exclusive()
        try:
            if frame.memo is not Ownership.INVALID:
                return   # a racing local acquire already claimed it
            (data,) = self._post(msg.target.node_id,
                                 [Read(msg.target.offset, self.layout.gcl_size)],
                                 label="grant_adopt")
            excl, _ = lw.decode(int.from_bytes(data[:8], "little"))
            if excl != self.node_id:
                return   # grant consumed by our own worker in the meantime
            # while we hold the local latch the word cannot move again: every
            # exclusive transition is made by the holding node under it
            self._install(frame, AccessMode.WRITE, data, dirty=None)
            self.metrics.add("grants_adopted")
        finally:
            frame.latch.release_exclusive()

    def _give_back(self, addr: GlobalAddress):
        """Return a pushed word to free.  CAS, never FAA: if the grant was
        consumed meanwhile the word is not ours to subtract from."""
        expect = lw.encode(self.node_id, ())
        while True:
            prior, = self._post(addr.node_id, [Cas(addr.offset, expect, 0)],
                                label="grant_return")
            if prior == expect:
                self.metrics.add("grants_returned")
                return
            excl, _ = lw.decode(prior)
            if excl != self.node_id:
                return   # nothing of ours left in the word
            self._idle()  # transient reader bits ride alongside; let them clear

    # ------------------------------------------------------------------
    # cache-disabled mode: acquire eagerly, release eagerly, never memoize

    def _access_uncached(self, addr: GlobalAddress, mode: str,
                         max_rounds: int | None) -> CacheFrame | None:
        frame = CacheFrame(addr, self.layout)
        frame.latch.acquire_exclusive()
        if self._acquire_global(frame, mode, max_rounds):
            self.metrics.add("misses")
            if mode == AccessMode.READ:
                frame.latch.downgrade_to_shared()
            return frame
        frame.latch.release_exclusive()
        return None

    def _release_uncached(self, frame: CacheFrame, mode: str):
        addr = frame.addr
        if mode == AccessMode.WRITE:
            wrs = []
            dirty = frame.dirty_range()
            if dirty:
                lo, hi = dirty
                wrs.append(Write(addr.offset + lo, bytes(frame.copy[lo:hi])))
                self.metrics.add("flush_bytes", hi - lo)
            wrs.append(Faa(addr.offset, lw.faa_release_exclusive(self.node_id)))
            self._post(addr.node_id, wrs, label="sel_release")
            frame.memo = Ownership.INVALID
            frame.latch.release_exclusive()
        else:
            self._post(addr.node_id,
                       [Faa(addr.offset, lw.faa_release_shared(self.node_id))],
                       label="sel_release")
            frame.memo = Ownership.INVALID
            frame.latch.release_shared()

    # ------------------------------------------------------------------
    # eviction entry points (the worker lives in eviction.py)

    def evict_cycle(self) -> int:
        if self.eviction is None:
            return 0
        with self._evict_lock:
            return self.eviction.cycle()

    # ------------------------------------------------------------------
    # background threads

    def start(self):
        if self.config.deterministic:
            return
        self._stop.clear()
        for i in range(self.config.handler_threads):
            t = threading.Thread(target=self._handler_loop,
                                 name=f"selcc-n{self.node_id}-handler{i}", daemon=True)
            t.start()
            self._threads.append(t)
        t = threading.Thread(target=self._evict_loop,
                             name=f"selcc-n{self.node_id}-evict", daemon=True)
        t.start()
        self._threads.append(t)

    def _handler_loop(self):
        while not self._stop.is_set():
            if self.service_messages(budget=64, block_s=0.01) == 0:
                time.sleep(0)

    def _evict_loop(self):
        while not self._stop.is_set():
            if self.evict_cycle() == 0:
                time.sleep(0.0002)

    def drain(self):
        """Handle everything still queued; used at shutdown and in tests."""
        while self.service_messages() > 0:
            pass

    def stop(self):
        self._stop.set()
        for t in self._threads:
            t.join(timeout=5)
        self._threads.clear()
        self.drain()
