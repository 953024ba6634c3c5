"""Coherence checking over version-token traces.

Every write stamps its line with a token (writer node, sequence number); the
sequence is read-modify-write under the exclusive latch, so a correct run
numbers a line's writes 1..k.  Each access also records two global event
tickets: one drawn right after the latch was acquired, one right before it
was released.  Tickets come from a single atomic counter, so they embed the
true cross-thread order of latch transitions.

Three checks per line:

  * write order — sorted by unlock ticket, sequences must be exactly 1..k;
  * write exclusivity — exclusive holds must not overlap in ticket order;
  * read values — a read that acquired at ticket t must return the token of
    the latest write unlocked before t (or the zero token if none), because
    any such write provably preceded the read's shared hold and no other
    write can have intervened.

A protocol that serves stale copies or loses updates fails at least one of
these; the trace format keeps enough context to say which access went wrong.
"""

from __future__ import annotations

from bisect import bisect_left
from dataclasses import dataclass


@dataclass(frozen=True)
class TraceEvent:
    node: int
    thread: int
    op: str            # "r" or "w"
    line: int          # workload line index
    writer: int        # token: writing node (0 = initial)
    seq: int           # token: per-line write sequence (0 = initial)
    t_acquire: int
    t_unlock: int


@dataclass
class CheckResult:
    ok: bool
    events: int
    lines: int
    violations: list[str]

    def summary(self) -> str:
        verdict = "OK" if self.ok else f"FAIL ({len(self.violations)} violations)"
        return (f"coherence check: {verdict} over {self.events} events "
                f"on {self.lines} lines")


def check_coherence(events: list[TraceEvent], max_violations: int = 20) -> CheckResult:
    by_line: dict[int, list[TraceEvent]] = {}
    for ev in events:
        by_line.setdefault(ev.line, []).append(ev)

    violations: list[str] = []

    def complain(msg: str):
        if len(violations) < max_violations:
            violations.append(msg)

    for line, evs in by_line.items():
        writes = sorted((e for e in evs if e.op == "w"), key=lambda e: e.t_unlock)
        for i, w in enumerate(writes, start=1):
            if w.seq != i:
                complain(f"line {line}: write #{i} (node {w.node} thread {w.thread}) "
                         f"carries sequence {w.seq}")
        for prev, cur in zip(writes, writes[1:]):
            if cur.t_acquire < prev.t_unlock:
                complain(f"line {line}: exclusive holds overlap "
                         f"(unlock {prev.t_unlock} vs acquire {cur.t_acquire})")
        unlock_tickets = [w.t_unlock for w in writes]
        for e in evs:
            if e.op != "r":
                continue
            idx = bisect_left(unlock_tickets, e.t_acquire) - 1
            want = (writes[idx].writer, writes[idx].seq) if idx >= 0 else (0, 0)
            if (e.writer, e.seq) != want:
                complain(f"line {line}: read at ticket {e.t_acquire} "
                         f"(node {e.node} thread {e.thread}) saw token "
                         f"{(e.writer, e.seq)}, expected {want}")

    return CheckResult(ok=not violations, events=len(events),
                       lines=len(by_line), violations=violations)


def write_counts(events: list[TraceEvent]) -> dict[int, int]:
    """Number of exclusive writes per line, straight from the trace."""
    counts: dict[int, int] = {}
    for ev in events:
        if ev.op == "w":
            counts[ev.line] = counts.get(ev.line, 0) + 1
    return counts


# ---------------------------------------------------------------------------
# trace files: one whitespace-separated record per line of text

_FIELDS = ("node", "thread", "op", "line", "writer", "seq", "t_acquire", "t_unlock")


def save_trace(path: str, events: list[TraceEvent]):
    with open(path, "w", encoding="ascii") as f:
        f.write("# " + " ".join(_FIELDS) + "\n")
        for e in events:
            f.write(f"{e.node} {e.thread} {e.op} {e.line} "
                    f"{e.writer} {e.seq} {e.t_acquire} {e.t_unlock}\n")


def load_trace(path: str) -> list[TraceEvent]:
    events: list[TraceEvent] = []
    with open(path, "r", encoding="ascii") as f:
        for raw in f:
            raw = raw.strip()
            if not raw or raw.startswith("#"):
                continue
            parts = raw.split()
            if len(parts) != len(_FIELDS):
                raise ValueError(f"bad trace record: {raw!r}")
            events.append(TraceEvent(
                node=int(parts[0]), thread=int(parts[1]), op=parts[2],
                line=int(parts[3]), writer=int(parts[4]), seq=int(parts[5]),
                t_acquire=int(parts[6]), t_unlock=int(parts[7])))
    return events
