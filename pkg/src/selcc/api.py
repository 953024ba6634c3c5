"""User-facing abstraction: clusters, compute nodes, latched line handles.

A Cluster wires up the emulated fabric, the passive memory regions, and one
coherence engine per compute node.  Application code asks a ComputeNode for
global cache lines and latches them:

    with cluster.node(1).xlock(addr) as h:
        h.write_u64(0, 42)

Latches are shared/exclusive and global: an xlock means no other latch holder
anywhere in the cluster, an slock means no exclusive holder anywhere.  The
data seen through a Handle is the node's cached copy, kept coherent by the
engine.  try_xlock/try_slock are the no-wait variants used by the
transaction layers; they give up after a bounded number of conflict rounds.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, replace

from selcc import latchword as lw
from selcc.cache import Ownership
from selcc.eviction import EvictionWorker
from selcc.fabric import Clock, Faa, Fabric, LatencyModel
from selcc.gcl import GclAllocator, GclLayout, GlobalAddress
from selcc.protocol import AccessMode, ProtocolConfig, ProtocolNode


class ApiError(Exception):
    pass


@dataclass
class ClusterConfig:
    compute_nodes: int = 4
    memory_nodes: int = 1
    gcl_capacity: int = 4096          # total lines the pool holds (split over memory nodes)
    pool_slack: int = 64              # extra lines for internal bookkeeping allocations
    cache_frames: int = 1024          # per compute node
    gcl_size: int = 2048
    header_size: int = 16
    remote_rtt_ns: int = 2_000
    local_access_ns: int = 100
    rtt_wall_ns: int | None = None   # real sleep per remote verb, for
                                     # experiments that price the fabric in wall time
    l_out: int = 16
    ring_capacity: int = 128
    resend_c: int = 16
    gamma: float = 256.0
    upgrade_attempts: int = 4
    free_threshold_frac: float = 0.05
    handler_threads: int = 2
    workers_per_node: int = 8
    reply_slots: int = 256
    spin_waiting: bool = True
    priority_matching: bool = True
    spin_unit_ns: int | None = None
    spin_priority_threshold: int = 2
    dirty_boundaries: bool = True
    caching: bool = True
    deterministic: bool = False
    wait_scale: float = 1.0
    fault_skip_reader_invalidation: bool = False
    fault_skip_handover_flush: bool = False

    def protocol_config(self) -> ProtocolConfig:
        layout = GclLayout(self.gcl_size, self.header_size)
        return ProtocolConfig(
            layout=layout, l_out=self.l_out, ring_capacity=self.ring_capacity,
            resend_c=self.resend_c, gamma=self.gamma,
            upgrade_attempts=self.upgrade_attempts,
            cache_frames=self.cache_frames,
            free_threshold_frac=self.free_threshold_frac,
            handler_threads=self.handler_threads,
            workers_per_node=self.workers_per_node, reply_slots=self.reply_slots,
            spin_waiting=self.spin_waiting, priority_matching=self.priority_matching,
            spin_unit_ns=self.spin_unit_ns,
            spin_priority_threshold=self.spin_priority_threshold,
            dirty_boundaries=self.dirty_boundaries, caching=self.caching,
            deterministic=self.deterministic, wait_scale=self.wait_scale,
            fault_skip_reader_invalidation=self.fault_skip_reader_invalidation,
            fault_skip_handover_flush=self.fault_skip_handover_flush,
        )


class Handle:
    """A latched global cache line: read/write its header and data locally.

    Offsets in read/write/read_u64/write_u64 are relative to the data area;
    header accessors address the small user header after the latch word.
    Handles are single-use: unlock once, then every method raises.
    """

    __slots__ = ("node", "frame", "mode", "acquire_ticket", "unlock_ticket",
                 "released")

    def __init__(self, node: "ComputeNode", frame, mode: str, acquire_ticket: int):
        self.node = node
        self.frame = frame
        self.mode = mode
        self.acquire_ticket = acquire_ticket
        self.unlock_ticket: int | None = None
        self.released = False

    # -- plumbing ---------------------------------------------------------

    @property
    def addr(self) -> GlobalAddress:
        return self.frame.addr

    @property
    def layout(self) -> GclLayout:
        return self.frame.layout

    def _check(self, write: bool = False):
        if self.released:
            raise ApiError("handle already unlocked")
        if write and self.mode != AccessMode.WRITE:
            raise ApiError("writing through a shared-latch handle")

    def _span(self, offset: int, length: int, base: int, limit: int) -> int:
        if offset < 0 or length < 0 or offset + length > limit:
            raise ApiError(f"range [{offset}, {offset + length}) outside area of {limit}")
        return base + offset

    # -- data area ----------------------------------------------------------

    def read(self, offset: int, length: int) -> bytes:
        self._check()
        start = self._span(offset, length, self.layout.data_offset, self.layout.data_size)
        return bytes(self.frame.copy[start:start + length])

    def write(self, offset: int, data: bytes):
        self._check(write=True)
        start = self._span(offset, len(data), self.layout.data_offset, self.layout.data_size)
        self.frame.copy[start:start + len(data)] = data
        self.frame.mark_dirty(start, start + len(data))

    def read_u64(self, offset: int) -> int:
        return int.from_bytes(self.read(offset, 8), "little")

    def write_u64(self, offset: int, value: int):
        self.write(offset, (value & ((1 << 64) - 1)).to_bytes(8, "little"))

    # -- header area --------------------------------------------------------

    def read_header(self, offset: int = 0, length: int | None = None) -> bytes:
        self._check()
        length = self.layout.header_size - offset if length is None else length
        start = self._span(offset, length, self.layout.header_offset,
                           self.layout.header_size)
        return bytes(self.frame.copy[start:start + length])

    def write_header(self, offset: int, data: bytes):
        self._check(write=True)
        start = self._span(offset, len(data), self.layout.header_offset,
                           self.layout.header_size)
        self.frame.copy[start:start + len(data)] = data
        self.frame.mark_dirty(start, start + len(data))

    # -- lifecycle ------------------------------------------------------------

    def unlock(self):
        self.node.unlock(self)

    def __enter__(self) -> "Handle":
        return self

    def __exit__(self, exc_type, exc, tb):
        if not self.released:
            self.unlock()


class ComputeNode:
    """One application-facing compute node: allocation plus global latching."""

    def __init__(self, cluster: "Cluster", engine: ProtocolNode,
                 allocator: GclAllocator):
        self.cluster = cluster
        self.engine = engine
        self.allocator = allocator
        self.node_id = engine.node_id
        self.clock = cluster.clock

    # -- pool -----------------------------------------------------------------

    def allocate(self) -> GlobalAddress:
        return self.allocator.allocate()

    def free(self, addr: GlobalAddress):
        frame = self.engine.cache.lookup(addr)
        if frame is not None:
            if not frame.latch.try_exclusive():
                raise ApiError(f"freeing {addr} while it is latched locally")
            try:
                if frame.memo is Ownership.SHARED:
                    self.engine._post(addr.node_id,
                                      [Faa(addr.offset, lw.faa_release_shared(self.node_id))],
                                      label="free")
                elif frame.memo is Ownership.MODIFIED:
                    self.engine._post(addr.node_id,
                                      [Faa(addr.offset, lw.faa_release_exclusive(self.node_id))],
                                      label="free")
                self.engine.cache.remove(frame)
            finally:
                frame.latch.release_exclusive()
        self.allocator.free(addr)

    # -- latches ----------------------------------------------------------------

    def _handle(self, frame, mode: str) -> Handle:
        return Handle(self, frame, mode, self.clock.next_ticket())

    def xlock(self, addr: GlobalAddress) -> Handle:
        frame = self.engine.access(addr, AccessMode.WRITE)
        return self._handle(frame, AccessMode.WRITE)

    def slock(self, addr: GlobalAddress) -> Handle:
        frame = self.engine.access(addr, AccessMode.READ)
        return self._handle(frame, AccessMode.READ)

    def try_xlock(self, addr: GlobalAddress, rounds: int = 1) -> Handle | None:
        frame = self.engine.access(addr, AccessMode.WRITE, max_rounds=rounds)
        return None if frame is None else self._handle(frame, AccessMode.WRITE)

    def try_slock(self, addr: GlobalAddress, rounds: int = 1) -> Handle | None:
        frame = self.engine.access(addr, AccessMode.READ, max_rounds=rounds)
        return None if frame is None else self._handle(frame, AccessMode.READ)

    def unlock(self, handle: Handle):
        if handle.released:
            raise ApiError("handle already unlocked")
        handle.unlock_ticket = self.clock.next_ticket()
        handle.released = True
        self.engine.release(handle.frame, handle.mode)

    def xunlock(self, handle: Handle):
        if handle.mode != AccessMode.WRITE:
            raise ApiError("xunlock on a shared handle")
        self.unlock(handle)

    def sunlock(self, handle: Handle):
        if handle.mode != AccessMode.READ:
            raise ApiError("sunlock on an exclusive handle")
        self.unlock(handle)

    # -- raw fetch-and-add on a data word (timestamps, counters) ------------------

    def atomic(self, word_addr: GlobalAddress, delta: int) -> int:
        if word_addr.offset % 8 != 0:
            raise ApiError("atomic target must be 8-byte aligned")
        if word_addr.offset % self.engine.layout.gcl_size == 0:
            raise ApiError("atomic target collides with a latch word")
        prior, = self.engine._post(word_addr.node_id,
                                   [Faa(word_addr.offset, delta)], label="atomic")
        return prior

    def metrics(self) -> dict:
        return self.engine.metrics.snapshot()


class Cluster:
    """Everything needed for one simulated deployment, in one process."""

    def __init__(self, config: ClusterConfig | None = None, **overrides):
        base = config or ClusterConfig()
        self.config = replace(base, **overrides) if overrides else base
        cfg = self.config
        if not 1 <= cfg.compute_nodes <= 58:
            raise ApiError("compute nodes must be 1..58")
        if cfg.memory_nodes < 1:
            raise ApiError("need at least one memory node")
        self.layout = GclLayout(cfg.gcl_size, cfg.header_size)
        self.clock = Clock()
        self.fabric = Fabric(LatencyModel(cfg.remote_rtt_ns, cfg.local_access_ns,
                                          cfg.rtt_wall_ns),
                             self.clock, max_outstanding=cfg.l_out)
        self.memory_ids = list(range(1, cfg.memory_nodes + 1))
        lines_total = cfg.gcl_capacity + cfg.pool_slack
        per_node = -(-lines_total // cfg.memory_nodes)   # ceil division
        for mem in self.memory_ids:
            self.fabric.register_memory_node(mem, per_node * cfg.gcl_size + 8)

        pconf = cfg.protocol_config()
        self._nodes: dict[int, ComputeNode] = {}
        idle = self.service_all if cfg.deterministic else None
        self._servicing = False
        for i in range(1, cfg.compute_nodes + 1):
            engine = ProtocolNode(i, self.fabric, pconf, idle_callback=idle)
            engine.eviction = EvictionWorker(engine)
            allocator = GclAllocator(self.fabric, i, self.memory_ids, self.layout,
                                     rr_start=i - 1)
            self._nodes[i] = ComputeNode(self, engine, allocator)
        self._started = False
        self._old_switch = None

    # -- lifecycle --------------------------------------------------------------

    def start(self) -> "Cluster":
        if not self._started:
            if not self.config.deterministic:
                # handler threads must see the GIL promptly or reply latency
                # balloons under busy worker loops
                self._old_switch = sys.getswitchinterval()
                sys.setswitchinterval(0.001)
            for node in self._nodes.values():
                node.engine.start()
            self._started = True
        return self

    def stop(self):
        if self._started:
            for node in self._nodes.values():
                node.engine.stop()
            self._started = False
            if self._old_switch is not None:
                sys.setswitchinterval(self._old_switch)
                self._old_switch = None
        else:
            for node in self._nodes.values():
                node.engine.drain()

    def __enter__(self) -> "Cluster":
        return self.start()

    def __exit__(self, exc_type, exc, tb):
        self.stop()

    # -- access -------------------------------------------------------------------

    def node(self, node_id: int) -> ComputeNode:
        try:
            return self._nodes[node_id]
        except KeyError:
            raise ApiError(f"no compute node {node_id}") from None

    def nodes(self) -> list[ComputeNode]:
        return list(self._nodes.values())

    def service_all(self):
        """Deterministic-mode pump: handle queued messages on every node."""
        if self._servicing:
            return
        self._servicing = True
        try:
            for node in self._nodes.values():
                node.engine.service_messages()
        finally:
            self._servicing = False

    def metrics(self) -> dict:
        out = {
            "fabric": self.fabric.metrics.snapshot(),
            "makespan_ns": self.clock.makespan_ns(),
            "nodes": {i: n.metrics() for i, n in self._nodes.items()},
        }
        agg = {}
        for snap in out["nodes"].values():
            for key, value in snap.items():
                if key == "max_wait_ns":
                    agg[key] = max(agg.get(key, 0), value)
                else:
                    agg[key] = agg.get(key, 0) + value
        out["totals"] = agg
        return out
