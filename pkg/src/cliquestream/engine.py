"""Deterministic discrete-event core.

One Engine instance drives one scenario: a virtual clock, a priority event
queue with stable FIFO tie-break, message delivery with latency equal to
geometric distance, and named RNG sub-streams so all randomness flows from
the scenario seed. Instances share nothing, so distinct scenarios may run
on different threads or processes.
"""

from __future__ import annotations

import hashlib
import heapq
import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

from .geometry import distance

# Zero-distance request/reply still needs a causal order.
MIN_PROCESSING_DELTA = 1e-6
DEFAULT_EVENT_CAP = 100_000_000


class EventKind(Enum):
    MESSAGE_DELIVERY = "message_delivery"
    TIMER = "timer"
    NODE_JOIN = "node_join"
    NODE_LEAVE = "node_leave"
    NODE_CRASH = "node_crash"
    MAINTENANCE = "maintenance"


class MsgClass(Enum):
    CONTROL = "control"      # tree/membership protocol
    DATA = "data"            # segments, buffer pulls
    HEARTBEAT = "heartbeat"  # steady-state liveness traffic


@dataclass
class Event:
    fire_time: float
    seq: int
    kind: EventKind
    fn: Callable
    args: tuple = ()
    desc: str = ""
    cancelled: bool = False

    def cancel(self) -> None:
        self.cancelled = True

    def __lt__(self, other: "Event") -> bool:
        return (self.fire_time, self.seq) < (other.fire_time, other.seq)


@dataclass
class ChurnSchedule:
    """Drives joins, departures and crash injection for a scenario."""
    join_rate: float = 0.0
    leave_rate: float = 0.0
    crash_fraction: float = 0.0
    crash_list: list = field(default_factory=list)  # (node_id, time) pairs
    target_selector: str = "random"  # random | relay_only | non_stable_only

    def validate(self, horizon: float) -> None:
        if self.target_selector not in ("random", "relay_only", "non_stable_only"):
            raise ValueError(f"unknown target_selector {self.target_selector!r}")
        for node, t in self.crash_list:
            if not 0.0 <= t <= horizon:
                raise ValueError(f"crash time {t} for node {node} outside horizon")


class RngStreams:
    """Named random sub-streams, each derived from the scenario seed."""

    def __init__(self, seed: int):
        self.seed = seed
        self._streams: dict[str, random.Random] = {}

    def stream(self, name: str) -> random.Random:
        rng = self._streams.get(name)
        if rng is None:
            digest = hashlib.sha256(f"{self.seed}:{name}".encode()).digest()
            rng = random.Random(int.from_bytes(digest[:8], "big"))
            self._streams[name] = rng
        return rng


class Trace:
    """Rolling digest plus counters; optionally keeps full per-message records."""

    def __init__(self, keep_records: bool = False):
        self.keep_records = keep_records
        self.records: list[tuple] = []
        self._hash = hashlib.sha256()
        self.sent = 0
        self.delivered = 0
        self.dropped_to_crashed = 0
        self.by_class = {cls: 0 for cls in MsgClass}
        self.by_type: dict[str, int] = {}

    def note(self, t: float, what: str, detail: str = "") -> None:
        line = f"{t:.9f}|{what}|{detail}"
        self._hash.update(line.encode())
        if self.keep_records:
            self.records.append((t, what, detail))

    def count_send(self, cls: MsgClass, mtype: str) -> None:
        self.sent += 1
        self.by_class[cls] += 1
        self.by_type[mtype] = self.by_type.get(mtype, 0) + 1

    def digest(self) -> str:
        return self._hash.hexdigest()


class LivelockError(RuntimeError):
    """Raised when a run exceeds its configured event cap."""


class Engine:
    def __init__(self, seed: int = 0, latency_scale: float = 1.0,
                 event_cap: int = DEFAULT_EVENT_CAP, keep_records: bool = False):
        self.now = 0.0
        self.latency_scale = latency_scale
        self.event_cap = event_cap
        self.rngs = RngStreams(seed)
        self.trace = Trace(keep_records=keep_records)
        self._heap: list[Event] = []
        self._seq = 0
        self.events_processed = 0
        # In-flight protocol work; quiescence means both control and data hit zero
        # with nothing but maintenance timers left queued.
        self.pending = {MsgClass.CONTROL: 0, MsgClass.DATA: 0, MsgClass.HEARTBEAT: 0}
        self.deliver_fn: Optional[Callable] = None

    # -- scheduling ---------------------------------------------------------

    def schedule(self, event: Event) -> Event:
        if event.fire_time < self.now:
            raise ValueError(f"event at {event.fire_time} is in the past (now={self.now})")
        heapq.heappush(self._heap, event)
        return event

    def schedule_at(self, time: float, kind: EventKind, fn: Callable, *args,
                    desc: str = "") -> Event:
        self._seq += 1
        return self.schedule(Event(time, self._seq, kind, fn, args, desc))

    def after(self, delay: float, kind: EventKind, fn: Callable, *args,
              desc: str = "") -> Event:
        return self.schedule_at(self.now + delay, kind, fn, *args, desc=desc)

    # -- message transport --------------------------------------------------

    def latency(self, src_node, dst_node) -> float:
        return distance(src_node.position, dst_node.position) * self.latency_scale \
            + MIN_PROCESSING_DELTA

    def send(self, msg, src_node, dst_node) -> None:
        """Schedule delivery of msg; messages to crashed nodes silently vanish."""
        if not src_node.alive:
            raise RuntimeError(f"dead node {src_node.node_id} attempted to send")
        cls = msg.cls
        self.trace.count_send(cls, msg.mtype.value)
        self.trace.note(self.now, "send",
                        f"{msg.mtype.value}|{src_node.node_id}->{dst_node.node_id}|{msg.channel or ''}")
        if not dst_node.alive:
            self.trace.dropped_to_crashed += 1
            return
        self.pending[cls] += 1
        when = self.now + self.latency(src_node, dst_node)

        def deliver():
            self.pending[cls] -= 1
            self.trace.delivered += 1
            self.trace.note(self.now, "deliver",
                            f"{msg.mtype.value}|->{dst_node.node_id}|{msg.channel or ''}")
            if dst_node.alive and self.deliver_fn is not None:
                self.deliver_fn(msg, dst_node)

        self.schedule_at(when, EventKind.MESSAGE_DELIVERY, deliver,
                         desc=msg.mtype.value)

    # -- main loop ----------------------------------------------------------

    def quiescent(self) -> bool:
        if self.pending[MsgClass.CONTROL] or self.pending[MsgClass.DATA]:
            return False
        return all(ev.cancelled or ev.kind is EventKind.MAINTENANCE
                   for ev in self._heap)

    def run(self, horizon: Optional[float] = None,
            stop_on_quiescence: bool = True) -> None:
        while self._heap:
            if stop_on_quiescence and self.quiescent():
                break
            ev = self._heap[0]
            if horizon is not None and ev.fire_time > horizon:
                break
            heapq.heappop(self._heap)
            if ev.cancelled:
                continue
            self.events_processed += 1
            if self.events_processed > self.event_cap:
                raise LivelockError(
                    f"event cap {self.event_cap} exceeded at t={self.now}")
            self.now = max(self.now, ev.fire_time)
            ev.fn(*ev.args)
        if horizon is not None and self.now < horizon:
            self.now = horizon
