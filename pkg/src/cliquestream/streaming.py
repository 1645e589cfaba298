"""Streaming layer over the clustered substrate.

Per channel, one stable node per participating clique acts as relay and the
relays form a push tree rooted at the source with fan-out capped at 2^b.
Inside a clique, recipients pull segments from mesh partners. A backup
relay per clique enables one-step takeover when a relay crashes; splits and
merges of cliques trigger localized tree repair.

All state machines here are driven exclusively by the owning simulation's
event loop; handlers run to completion and share nothing across instances.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .engine import Engine, EventKind, MsgClass
from .ids import CliqueId
from .substrate import Clique, NodeRecord, Substrate
from .geometry import distance


class MessageType(Enum):
    JOIN = "join"
    JOIN_REPLY = "joinReply"
    JOIN_REMOTE = "joinRemote"
    ADD_NODE = "addNode"
    ADD_NODE_FWD = "addNodeFwd"
    ADD_NODE_ACK = "addNodeAck"
    LEAVE = "leave"
    IS_ALIVE = "isAlive"
    ALIVE = "alive"
    RECOVER_TREE = "recoverTree"
    HAND_OVER = "handOver"
    HEARTBEAT = "heartbeat"
    SEGMENT_REQUEST = "segmentRequest"
    SEGMENT_DATA = "segmentData"
    REJOIN = "rejoin"
    REJOIN_CONFIRM = "rejoinConfirm"
    CHANNEL_UPDATE = "channelUpdate"
    PARTNER_REFRESH = "partnerRefresh"


# Message types billed to a failure's recovery episode (steady-state
# heartbeats and replication chatter are excluded, matching the accounting
# that recovery overhead is measured against).
RECOVERY_CONTROL_TYPES = {
    MessageType.IS_ALIVE, MessageType.ALIVE,
    MessageType.RECOVER_TREE, MessageType.HAND_OVER,
}

CONTROL_TYPES = {
    MessageType.JOIN, MessageType.JOIN_REPLY, MessageType.JOIN_REMOTE,
    MessageType.ADD_NODE, MessageType.ADD_NODE_FWD, MessageType.ADD_NODE_ACK,
    MessageType.LEAVE, MessageType.IS_ALIVE, MessageType.ALIVE,
    MessageType.RECOVER_TREE, MessageType.HAND_OVER, MessageType.REJOIN,
    MessageType.REJOIN_CONFIRM, MessageType.CHANNEL_UPDATE,
    MessageType.PARTNER_REFRESH,
}


@dataclass
class Message:
    """Simulated wire message; dst_node None is the all-zero ANY address and
    dst_clique None is the NULL sentinel that stops forwarding."""
    mtype: MessageType
    src_clique: Optional[CliqueId]
    src_node: int
    dst_clique: Optional[CliqueId]
    dst_node: Optional[int]
    channel: Optional[str] = None
    payload: dict = field(default_factory=dict)

    @property
    def cls(self) -> MsgClass:
        if self.mtype in (MessageType.SEGMENT_REQUEST, MessageType.SEGMENT_DATA):
            return MsgClass.DATA
        if self.mtype is MessageType.HEARTBEAT:
            return MsgClass.HEARTBEAT
        return MsgClass.CONTROL


@dataclass
class StreamConfig:
    partner_min: int = 4
    partner_subset: int = 8
    partner_max: int = 16
    exchange_interval: float = 1.0
    playback_window: int = 16
    segment_rate: float = 1.0
    # Timeouts, in multiples of the per-link round-trip estimate.
    stoppage_threshold_rtt: float = 1.0
    probe_timeout_rtt: float = 2.0
    rejoin_threshold_rtt: float = 10.0
    feed_timeout_rtt: float = 30.0
    # Heartbeat interval in absolute time units; scenarios set this to a
    # multiple of the measured mean adjacent-clique RTT.
    heartbeat_interval: float = 100.0
    relay_policy: str = "bandwidth"  # bandwidth | receiver
    relay_channel_cost: float = 1.0
    join_retry_interval: float = 25.0
    join_timeout: float = 400.0
    leave_grace: float = 50.0

    def validate(self) -> None:
        if self.relay_policy not in ("bandwidth", "receiver"):
            raise ValueError(f"unknown relay_policy {self.relay_policy!r}")
        if self.partner_min < 1 or self.partner_subset < 1:
            raise ValueError("partner parameters must be positive")
        if self.playback_window < 1:
            raise ValueError("playback_window must be positive")


@dataclass
class ChannelInfo:
    relay: Optional[int] = None
    backup: Optional[int] = None
    child_list: list[int] = field(default_factory=list)
    parent: Optional[int] = None
    backup_parent: Optional[int] = None
    degraded: bool = False
    # Fan-out slots reserved for cliques we forwarded an addNode to and whose
    # relay has not acked yet: clique id -> expiry time.
    pending_children: dict = field(default_factory=dict)

    def snapshot(self) -> tuple:
        return (self.relay, self.backup, tuple(sorted(self.child_list)),
                self.parent, self.backup_parent)

    def clone(self) -> "ChannelInfo":
        return ChannelInfo(self.relay, self.backup, list(self.child_list),
                           self.parent, self.backup_parent, self.degraded,
                           dict(self.pending_children))


@dataclass
class StreamState:
    """Per-node, per-received-channel stream bookkeeping."""
    buffer: dict[int, float] = field(default_factory=dict)  # segment -> arrival
    gen_times: dict[int, float] = field(default_factory=dict)
    partners: list[int] = field(default_factory=list)
    watching: bool = False
    play_pos: int = 0
    latest: int = -1
    # relay-side state
    recipient_list: list[int] = field(default_factory=list)
    last_push_arrival: float = -1.0
    suspect: dict[int, int] = field(default_factory=dict)
    outstanding: dict[int, tuple[int, float]] = field(default_factory=dict)  # seg -> (provider, t)

    def buffer_map(self, window_start: int, window: int) -> list[bool]:
        return [(window_start + i) in self.buffer for i in range(window)]

    def hold(self, seg: int, now: float, gen_t: float) -> bool:
        if seg in self.buffer:
            return False
        self.buffer[seg] = now
        self.gen_times[seg] = gen_t
        self.latest = max(self.latest, seg)
        return True


@dataclass
class SourceState:
    channel: str
    node: int
    rate: float
    next_seq: int = 0
    windows: list[tuple[float, float]] = field(default_factory=list)
    children: list[int] = field(default_factory=list)
    gen_times: dict[int, float] = field(default_factory=dict)

    def active(self, t: float) -> bool:
        return any(a <= t < b for a, b in self.windows)


@dataclass
class JoinOutcome:
    node: int
    channel: str
    messages_used: int = 0
    startup_delay: float = 0.0
    partners: tuple = ()
    completed: bool = False
    rejoin: bool = False
    started_at: float = 0.0


@dataclass
class RecoveryReport:
    failed_node: int
    channel: str
    detect_time: float = -1.0
    recovered_time: float = -1.0
    control_messages: int = 0
    segments_lost: int = 0
    crash_time: float = 0.0
    probing_child: Optional[int] = None
    detected_by: str = ""            # probe | heartbeat
    parent_resumed: float = -1.0
    rtt_legs: list[float] = field(default_factory=list)
    recovered: bool = False
    taken_over_by: Optional[int] = None

    @property
    def rtt_ref(self) -> float:
        return max(self.rtt_legs) if self.rtt_legs else 0.0


class StreamingLayer:
    def __init__(self, engine: Engine, substrate: Substrate, cfg: StreamConfig):
        cfg.validate()
        self.engine = engine
        self.substrate = substrate
        self.cfg = cfg
        self.rng_partner = engine.rngs.stream("partner")
        self.rng_relay = engine.rngs.stream("relay")
        self.directory: dict[str, int] = {}
        self.sources: dict[str, SourceState] = {}
        self.channel_lists: dict[int, dict[str, ChannelInfo]] = {}
        self.streams: dict[tuple[int, str], StreamState] = {}
        self.relay_load: dict[int, int] = {}
        self.join_outcomes: dict[tuple[int, str], JoinOutcome] = {}
        self.pending_local: dict[tuple[int, str], list[tuple[int, float]]] = {}
        self.remote_pending: set[tuple[int, str]] = set()
        self.mesh_timers: dict[tuple[int, str], object] = {}
        self.stoppage_timers: dict[tuple[int, str], object] = {}
        self.probe_pending: dict[tuple[int, str], object] = {}
        self.hb_last: dict[tuple[int, int], float] = {}
        self.hb_watch: dict[tuple[int, int], int] = {}  # (watcher, watched) -> refcount
        self.reports: list[RecoveryReport] = []
        self.active_reports: dict[tuple[int, str], RecoveryReport] = {}
        self._pending_confirm: dict[tuple[int, str], int] = {}
        # Displaced children being fed until rejoin confirmation or timeout:
        # (feeder, channel) -> {target: deadline}. Central so a relay losing
        # its role in a merge keeps feeding its invalidated children.
        self.displaced: dict[tuple[int, str], dict[int, float]] = {}
        # Losing relays that must LEAVE their old parent once feeds resolve:
        # (feeder, channel) -> old parent.
        self.retiring: dict[tuple[int, str], Optional[int]] = {}
        engine.deliver_fn = self.deliver
        substrate.split_listeners.append(self.repair_on_split)
        substrate.merge_listeners.append(self.repair_on_merge)
        substrate.stable_listeners.append(self._on_stable_change)

    # ------------------------------------------------------------------
    # small helpers

    def node(self, nid: int) -> NodeRecord:
        return self.substrate.nodes[nid]

    def clique(self, cid: CliqueId) -> Optional[Clique]:
        return self.substrate.cliques.get(cid)

    def rtt_est(self, a: int, b: int) -> float:
        na, nb = self.node(a), self.node(b)
        return 2.0 * (distance(na.position, nb.position) * self.engine.latency_scale
                      + 1e-6)

    def info_of(self, nid: int, channel: str) -> Optional[ChannelInfo]:
        return self.channel_lists.get(nid, {}).get(channel)

    def _set_info(self, nid: int, channel: str, info: ChannelInfo) -> None:
        self.channel_lists.setdefault(nid, {})[channel] = info

    def _drop_info(self, nid: int, channel: str) -> None:
        lst = self.channel_lists.get(nid)
        if lst and channel in lst:
            del lst[channel]

    def stream_of(self, nid: int, channel: str, create: bool = False
                  ) -> Optional[StreamState]:
        st = self.streams.get((nid, channel))
        if st is None and create:
            st = StreamState()
            self.streams[(nid, channel)] = st
        return st

    def _send(self, mtype: MessageType, src: int, dst: int, channel: str = None,
              payload: dict = None) -> None:
        src_rec, dst_rec = self.node(src), self.node(dst)
        msg = Message(mtype, src_rec.clique, src, dst_rec.clique, dst,
                      channel, payload or {})
        self.engine.send(msg, src_rec, dst_rec)
        if mtype in RECOVERY_CONTROL_TYPES or mtype is MessageType.CHANNEL_UPDATE:
            self._bill_recovery(msg)

    def _bill_recovery(self, msg: Message) -> None:
        if not self.active_reports or msg.channel is None:
            return
        report = None
        for (failed, ch), rep in self.active_reports.items():
            if ch == msg.channel and not rep.recovered:
                report = rep
                break
        if report is None:
            return
        if msg.mtype in RECOVERY_CONTROL_TYPES:
            report.control_messages += 1
        elif msg.mtype is MessageType.CHANNEL_UPDATE and \
                msg.payload.get("takeover"):
            report.control_messages += 1

    def relay_of(self, clique: Clique, channel: str) -> Optional[ChannelInfo]:
        """The clique's view of a channel: any live stable replica, else any."""
        holders = list(clique.stable_nodes) or sorted(clique.members)
        for nid in holders:
            info = self.info_of(nid, channel)
            if info is not None:
                return info
        return None

    def _relay_alive(self, info: Optional[ChannelInfo]) -> bool:
        if info is None or info.relay is None:
            return False
        rec = self.substrate.nodes.get(info.relay)
        return rec is not None and rec.alive

    def _replicate(self, clique: Clique, channel: str, info: ChannelInfo,
                   origin: int, takeover: bool = False) -> None:
        """Relay-initiated ChannelInfo propagation to the other stable nodes."""
        self._set_info(origin, channel, info)
        payload = {"info": info.snapshot(), "takeover": takeover}
        for nid in clique.stable_nodes:
            if nid != origin and self.node(nid).alive:
                self._send(MessageType.CHANNEL_UPDATE, origin, nid, channel,
                           dict(payload))
        src = self.sources.get(channel)
        if src is not None and src.node in clique.members and src.node != origin:
            self._send(MessageType.CHANNEL_UPDATE, origin, src.node, channel,
                       dict(payload))

    # ------------------------------------------------------------------
    # channel registration and segment generation

    def register_channel(self, name: str, source_node: int,
                         rate: Optional[float] = None) -> SourceState:
        if name in self.directory:
            raise ValueError(f"channel {name!r} already registered")
        self.directory[name] = source_node
        src = SourceState(name, source_node, rate or self.cfg.segment_rate)
        self.sources[name] = src
        return src

    def start_streaming(self, channel: str, until: float,
                        start: Optional[float] = None) -> None:
        src = self.sources[channel]
        begin = self.engine.now if start is None else start
        src.windows.append((begin, until))
        self.engine.schedule_at(max(begin, self.engine.now), EventKind.TIMER,
                                self._generate, channel, desc=f"gen:{channel}")

    def _generate(self, channel: str) -> None:
        src = self.sources[channel]
        now = self.engine.now
        if not src.active(now):
            nxt = min((a for a, b in src.windows if a > now), default=None)
            if nxt is not None:
                self.engine.schedule_at(nxt, EventKind.TIMER, self._generate,
                                        channel, desc=f"gen:{channel}")
            return
        seg = src.next_seq
        src.next_seq += 1
        src.gen_times[seg] = now
        if not self.node(src.node).alive:
            return
        pair = (None, None)
        for child in list(src.children):
            if self.node(child).alive:
                self._push_segment(src.node, child, channel, seg, now, pair)
        self.engine.after(1.0 / src.rate, EventKind.TIMER, self._generate,
                          channel, desc=f"gen:{channel}")

    def _push_segment(self, src: int, dst: int, channel: str, seg: int,
                      gen_t: float, pair: tuple) -> None:
        self._send(MessageType.SEGMENT_DATA, src, dst, channel,
                   {"seg": seg, "gen": gen_t, "push": True, "pair": pair})

    # ------------------------------------------------------------------
    # join protocol

    def pick_join_stable(self, nid: int) -> Optional[int]:
        """A node addresses its join to the nearest stable node of its clique."""
        clique = self.substrate.clique_of(nid)
        me = self.node(nid)
        best = None
        for sid in clique.stable_nodes:
            rec = self.node(sid)
            if not rec.alive:
                continue
            key = (distance(me.position, rec.position), sid)
            if best is None or key < best:
                best = key
        return best[1] if best else None

    def initiate_join(self, nid: int, channel: str, rejoin: bool = False) -> JoinOutcome:
        if channel not in self.directory:
            raise KeyError(f"unknown channel {channel!r}")
        outcome = JoinOutcome(nid, channel, started_at=self.engine.now,
                              rejoin=rejoin)
        self.join_outcomes[(nid, channel)] = outcome
        self._try_join(nid, channel)
        return outcome

    def join_channel(self, nid: int, channel: str) -> JoinOutcome:
        """Synchronous convenience wrapper: join and run until quiescence."""
        outcome = self.initiate_join(nid, channel)
        self.engine.run(stop_on_quiescence=True)
        return outcome

    def _try_join(self, nid: int, channel: str) -> None:
        rec = self.substrate.nodes.get(nid)
        if rec is None or not rec.alive:
            return
        stable = self.pick_join_stable(nid)
        if stable is None:
            self.engine.after(self.cfg.join_retry_interval, EventKind.MAINTENANCE,
                              self._try_join, nid, channel, desc="join-retry")
            return
        if stable == nid:
            self._handle_join_request(nid, channel, nid)
            return
        self._send(MessageType.JOIN, nid, stable, channel,
                   {"requester": nid})

    def _handle_join_request(self, stable: int, channel: str, requester: int) -> None:
        clique = self.substrate.clique_of(stable)
        info = self.relay_of(clique, channel)
        if self._relay_alive(info) and info.relay in clique.members:
            if info.relay != stable:
                self._send(MessageType.JOIN, stable, info.relay, channel,
                           {"requester": requester})
            else:
                self._accept_recipient(stable, channel, requester)
            return
        # Channel not carried here yet: queue the requester and fetch the tree.
        key = (stable, channel)
        queue = self.pending_local.setdefault(key, [])
        queue.append((requester, self.engine.now))
        if key not in self.remote_pending:
            self.remote_pending.add(key)
            source = self.directory[channel]
            if not self.node(source).alive:
                return
            self._send(MessageType.JOIN_REMOTE, stable, source, channel,
                       {"joining_stable": stable, "chain": 1})

    def _accept_recipient(self, relay: int, channel: str, requester: int,
                          chain: int = 1) -> None:
        st = self.stream_of(relay, channel, create=True)
        if relay not in st.recipient_list:
            st.recipient_list.append(relay)
        if requester != relay and requester not in st.recipient_list:
            st.recipient_list.append(requester)
        pool = sorted(n for n in st.recipient_list if n != requester)
        sub = min(self.cfg.partner_subset, len(pool))
        partners = sorted(self.rng_partner.sample(pool, sub)) if sub else []
        payload = {"partners": partners, "latest": st.latest,
                   "relay": relay, "chain": chain}
        if requester == relay:
            self._complete_join(relay, channel, payload)
        else:
            self._send(MessageType.JOIN_REPLY, relay, requester, channel, payload)
        self._ensure_mesh_round(relay, channel)

    def _complete_join(self, nid: int, channel: str, payload: dict) -> None:
        st = self.stream_of(nid, channel, create=True)
        st.watching = True
        for p in payload.get("partners", []):
            if p != nid and p not in st.partners:
                st.partners.append(p)
        st.play_pos = max(0, payload.get("latest", -1) - self.cfg.playback_window + 1)
        outcome = self.join_outcomes.get((nid, channel))
        if outcome is not None and not outcome.completed:
            outcome.completed = True
            outcome.messages_used = payload.get("chain", 1)
            outcome.startup_delay = self.engine.now - outcome.started_at
            outcome.partners = tuple(payload.get("partners", []))
        feeder = payload.get("confirm_to")
        if feeder is not None and self.node(feeder).alive and self.node(nid).alive:
            self._send(MessageType.REJOIN_CONFIRM, nid, feeder, channel,
                       {"child": nid})

    # -- remote join: source side and the addNode walk -----------------------

    def _handle_join_remote(self, source: int, channel: str, msg: Message) -> None:
        dest_stable = msg.payload["joining_stable"]
        dest_rec = self.substrate.nodes.get(dest_stable)
        if dest_rec is None or not dest_rec.alive or dest_rec.clique is None:
            return
        payload = {
            "dest_clique": dest_rec.clique, "dest_node": dest_stable,
            "chain": msg.payload.get("chain", 1),
            "upstream_pair": (source, None),
            "visited": (), "force_descend": False,
        }
        if msg.payload.get("confirm_to") is not None:
            payload["confirm_to"] = msg.payload["confirm_to"]
        self._forward_add_node(source, channel, payload)

    def _forward_add_node(self, holder: int, channel: str, payload: dict) -> None:
        """Move an addNode one step toward the joining clique.

        holder is the source or the local relay. Enforces the 2^b fan-out
        cap by reusing existing child links or redirecting down the tree.
        """
        sub = self.substrate
        me = self.substrate.nodes.get(holder)
        if me is None or not me.alive or me.clique is None:
            return
        dest_cid: CliqueId = payload["dest_clique"]
        dest_node: int = payload["dest_node"]
        dest_rec = sub.nodes.get(dest_node)
        if dest_rec is None or not dest_rec.alive:
            return
        if dest_rec.clique != dest_cid:
            # The joining clique split or merged while the message traveled;
            # follow the node.
            dest_cid = dest_rec.clique
            payload = dict(payload, dest_clique=dest_cid)
        my_clique = sub.clique_of(holder)
        pair = self._pair_of(holder, channel)
        payload = dict(payload, upstream_pair=pair)
        if my_clique.id == dest_cid:
            self._send_add_node(holder, dest_node, channel, payload)
            return
        info = self.info_of(holder, channel)
        if payload.get("force_descend") and info is not None:
            self._descend_add_node(holder, info, channel, payload)
            return
        nxt, target_cid = sub.next_hop(holder, dest_cid)
        if info is None:
            # The source itself: no fan-out bookkeeping at this end.
            self._send_add_node(holder, nxt, channel, payload)
            return
        child_cliques = {sub.nodes[c].clique: c for c in info.child_list
                         if sub.nodes[c].clique is not None}
        if target_cid in child_cliques:
            self._send_add_node(holder, child_cliques[target_cid], channel, payload)
            return
        now = self.engine.now
        info.pending_children = {cid: t for cid, t in info.pending_children.items()
                                 if t > now}
        slots = len(info.child_list) + len(info.pending_children)
        if slots < sub.cfg.fanout or target_cid in info.pending_children:
            info.pending_children[target_cid] = now + self.cfg.join_timeout
            self._send_add_node(holder, nxt, channel, payload)
            return
        self._descend_add_node(holder, info, channel, payload)

    def _descend_add_node(self, holder: int, info: ChannelInfo, channel: str,
                          payload: dict) -> None:
        """Fan-out cap hit: push the addNode down the existing tree."""
        sub = self.substrate
        visited = set(payload.get("visited", ()))
        dest_lo = payload["dest_clique"].lo
        live = [c for c in info.child_list if sub.nodes[c].alive
                and sub.nodes[c].clique is not None]
        if not live:
            return
        fresh = [c for c in live if sub.nodes[c].clique not in visited]
        if fresh:
            def affinity(c):
                cid = sub.nodes[c].clique
                return (-cid.shared_bits(dest_lo), c)
            target = min(fresh, key=affinity)
            self._send_add_node(holder, target, channel, payload)
        else:
            payload = dict(payload, force_descend=True)
            self._send_add_node(holder, min(live), channel, payload)

    def _send_add_node(self, src: int, dst: int, channel: str, payload: dict) -> None:
        src_cid = self.substrate.nodes[src].clique
        payload = dict(payload)
        payload["visited"] = tuple(payload.get("visited", ())) + (src_cid,)
        if self.substrate.nodes[dst].clique != src_cid:
            payload["chain"] = payload.get("chain", 1) + 1
        self._send(MessageType.ADD_NODE, src, dst, channel, payload)

    def _pair_of(self, nid: int, channel: str) -> tuple:
        info = self.info_of(nid, channel)
        if info is None:
            return (nid, None)  # the source node
        return (info.relay, info.backup)

    def _handle_add_node(self, nid: int, channel: str, msg: Message) -> None:
        """Forward hook: runs at every node an addNode message reaches."""
        sub = self.substrate
        rec = self.node(nid)
        if rec.clique is None:
            return
        clique = sub.clique_of(nid)
        payload = msg.payload
        dest_node = payload["dest_node"]
        dest_rec = sub.nodes.get(dest_node)
        if dest_rec is None or not dest_rec.alive or dest_rec.clique is None:
            return
        if nid == dest_node:
            self._attach_joining_relay(nid, channel, msg)
            return
        if clique.id == dest_rec.clique:
            # Inside the joining clique: hand the message to its target.
            self._send(MessageType.ADD_NODE, nid, dest_node, channel, dict(payload))
            return
        holder = clique.table_holder()
        if not rec.is_stable and holder is not None and holder != nid:
            # Non-stable receiver hands the message to a stable clique mate.
            self._send(MessageType.ADD_NODE_FWD, nid, holder, channel, dict(payload))
            return
        info = self.relay_of(clique, channel)
        if not self._relay_alive(info) or info.relay not in clique.members:
            relay, backup = self.relay_election(clique, channel, receiver=nid)
            if relay is None:
                return
            up_relay, up_backup = payload.get("upstream_pair", (msg.src_node, None))
            info = ChannelInfo(relay=relay, backup=backup,
                               parent=up_relay if up_relay is not None else msg.src_node,
                               backup_parent=up_backup,
                               degraded=backup is None)
            self.relay_load[relay] = self.relay_load.get(relay, 0) + 1
            self._replicate(clique, channel, info, relay)
            self.stream_of(relay, channel, create=True)
            self._send(MessageType.ADD_NODE_ACK, relay, info.parent, channel,
                       {"child": relay})
            self._start_heartbeats(info)
            if relay != nid:
                self._send(MessageType.ADD_NODE_FWD, nid, relay, channel,
                           dict(payload))
                return
            self._forward_add_node(relay, channel, dict(payload))
            return
        if info.relay != nid:
            self._send(MessageType.ADD_NODE_FWD, nid, info.relay, channel,
                       dict(payload))
            return
        self._forward_add_node(nid, channel, dict(payload))

    def _attach_joining_relay(self, nid: int, channel: str, msg: Message) -> None:
        """Final addNode delivery at the stable node that asked to join."""
        sub = self.substrate
        clique = sub.clique_of(nid)
        payload = msg.payload
        up_relay, up_backup = payload.get("upstream_pair", (msg.src_node, None))
        parent = up_relay if up_relay is not None else msg.src_node
        info = self.info_of(nid, channel)
        if info is not None and info.relay == nid:
            # Re-attachment of an existing relay (rejoin path).
            old_parent = info.parent
            info.parent = parent
            info.backup_parent = up_backup
            self._replicate(clique, channel, info, nid)
        else:
            backup = self._pick_backup(clique, nid)
            info = ChannelInfo(relay=nid, backup=backup, parent=parent,
                               backup_parent=up_backup, degraded=backup is None)
            self.relay_load[nid] = self.relay_load.get(nid, 0) + 1
            self._replicate(clique, channel, info, nid)
            self._start_heartbeats(info)
        self._send(MessageType.ADD_NODE_ACK, nid, parent, channel, {"child": nid})
        st = self.stream_of(nid, channel, create=True)
        if nid not in st.recipient_list:
            st.recipient_list.append(nid)
        chain = payload.get("chain", 1)
        key = (nid, channel)
        self.remote_pending.discard(key)
        for requester, t0 in self.pending_local.pop(key, []):
            if self.node(requester).alive:
                self._accept_recipient(nid, channel, requester, chain=chain)
        rejoin_confirm = payload.get("confirm_to")
        if rejoin_confirm is not None and self.node(rejoin_confirm).alive:
            self._send(MessageType.REJOIN_CONFIRM, nid, rejoin_confirm, channel,
                       {"child": nid})
        self._ensure_mesh_round(nid, channel)
        self._arm_stoppage(nid, channel)

    def _handle_add_node_ack(self, nid: int, channel: str, msg: Message) -> None:
        child = msg.payload["child"]
        src = self.sources.get(channel)
        if src is not None and src.node == nid:
            if child not in src.children:
                src.children.append(child)
            return
        info = self.info_of(nid, channel)
        if info is None or info.relay != nid:
            return
        child_cid = self.substrate.nodes[child].clique
        info.pending_children.pop(child_cid, None)
        if child not in info.child_list:
            info.child_list.append(child)
        clique = self.substrate.clique_of(nid)
        self._replicate(clique, channel, info, nid)

    # ------------------------------------------------------------------
    # relay election

    def relay_election(self, clique: Clique, channel: str,
                       receiver: Optional[int] = None) -> tuple:
        """Pick (relay, backup) among the clique's stable nodes.

        Default policy: highest available uplink bandwidth (ties by id).
        With fewer than two stable nodes the relay is still elected and the
        backup deferred; the ChannelInfo is flagged degraded.
        """
        stables = [s for s in clique.stable_nodes if self.node(s).alive]
        if not stables:
            self._recruit_stable(clique)
            stables = [s for s in clique.stable_nodes if self.node(s).alive]
            if not stables:
                return None, None
        if all(self._available_uplink(s) <= 0 for s in stables):
            if self._recruit_stable(clique):
                stables = [s for s in clique.stable_nodes if self.node(s).alive]
        if self.cfg.relay_policy == "receiver" and receiver in stables:
            relay = receiver
        else:
            relay = min(stables, key=lambda s: (-self._available_uplink(s), s))
        backup = self._pick_backup(clique, relay)
        return relay, backup

    def _available_uplink(self, nid: int) -> float:
        rec = self.node(nid)
        return rec.uplink_bandwidth - \
            self.relay_load.get(nid, 0) * self.cfg.relay_channel_cost

    def _pick_backup(self, clique: Clique, relay: int) -> Optional[int]:
        cands = [s for s in clique.stable_nodes
                 if s != relay and self.node(s).alive]
        if not cands:
            return None
        return min(cands, key=lambda s: (-self._available_uplink(s), s))

    def _recruit_stable(self, clique: Clique) -> bool:
        """Relay load exceeded capacity: promote the best eligible member."""
        now = self.engine.now
        cands = [rec for rec in clique.members.values()
                 if not rec.is_stable
                 and rec.eligible(now, self.substrate.cfg.stable_age)]
        if not cands:
            cands = [rec for rec in clique.members.values() if not rec.is_stable]
        if not cands:
            return False
        best = min(cands, key=lambda r: (-r.uplink_bandwidth, r.node_id))
        best.is_stable = True
        clique.stable_nodes.append(best.node_id)
        self.substrate.tables_dirty = True
        self._on_stable_change(clique, [best.node_id], [])
        return True

    def _on_stable_change(self, clique: Clique, added: list, removed: list) -> None:
        """New stable nodes receive ChannelList replicas from each relay."""
        for ch in sorted(self._clique_channels(clique)):
            info = self.relay_of(clique, ch)
            if info is None:
                continue
            relay = info.relay
            if relay is None or relay not in clique.members or \
                    not self.node(relay).alive:
                continue
            for nid in added:
                if nid != relay and self.node(nid).alive:
                    self._send(MessageType.CHANNEL_UPDATE, relay, nid, ch,
                               {"info": info.snapshot(), "takeover": False})

    def _clique_channels(self, clique: Clique) -> set[str]:
        chans: set[str] = set()
        for nid in clique.members:
            chans.update(self.channel_lists.get(nid, ()))
        return chans

    # ------------------------------------------------------------------
    # mesh: buffer maps, pull rounds, partner upkeep

    def _ensure_mesh_round(self, relay: int, channel: str) -> None:
        key = (relay, channel)
        if key in self.mesh_timers:
            return
        ev = self.engine.after(self.cfg.exchange_interval, EventKind.MAINTENANCE,
                               self._mesh_round, relay, channel, desc="mesh")
        self.mesh_timers[key] = ev

    def _mesh_round(self, relay: int, channel: str) -> None:
        key = (relay, channel)
        self.mesh_timers.pop(key, None)
        info = self.info_of(relay, channel)
        rec = self.substrate.nodes.get(relay)
        if info is None or info.relay != relay or rec is None or not rec.alive:
            return
        st = self.stream_of(relay, channel)
        if st is None:
            return
        clique = self.substrate.cliques.get(rec.clique)
        if clique is None:
            return
        st.recipient_list = [n for n in st.recipient_list
                             if n in clique.members and self.node(n).alive]
        if relay not in st.recipient_list:
            st.recipient_list.insert(0, relay)
        for nid in list(st.recipient_list):
            nst = self.stream_of(nid, channel)
            if nst is not None and (nst.watching or nid == relay):
                self.pull_round(nid, channel, self.engine.now)
        if len(st.recipient_list) > 1 or info.child_list or \
                self.displaced.get((relay, channel)):
            ev = self.engine.after(self.cfg.exchange_interval,
                                   EventKind.MAINTENANCE, self._mesh_round,
                                   relay, channel, desc="mesh")
            self.mesh_timers[key] = ev

    def pull_round(self, nid: int, channel: str, now: float) -> list[tuple[int, int]]:
        """Request every missing window segment from one advertising partner.

        Buffer maps are modeled as a snapshot read at round time; the
        requests themselves are real timed messages. Returns the
        (segment, provider) pairs requested this round.
        """
        st = self.stream_of(nid, channel)
        rec = self.substrate.nodes.get(nid)
        if st is None or rec is None or not rec.alive:
            return []
        self._prune_partners(nid, channel, st)
        horizon = st.latest
        maps: dict[int, StreamState] = {}
        for p in st.partners:
            ps = self.stream_of(p, channel)
            if ps is not None:
                maps[p] = ps
                horizon = max(horizon, ps.latest)
        st.play_pos = max(st.play_pos, horizon - self.cfg.playback_window + 1, 0)
        sent: list[Message] = []
        for seg in range(st.play_pos, horizon + 1):
            if seg in st.buffer:
                continue
            prev = st.outstanding.get(seg)
            if prev is not None and now - prev[1] < self.cfg.exchange_interval:
                continue
            if prev is not None:
                st.suspect[prev[0]] = st.suspect.get(prev[0], 0) + 1
            providers = sorted(p for p, ps in maps.items() if seg in ps.buffer)
            if not providers:
                continue
            pick = self.rng_partner.choice(providers)
            st.outstanding[seg] = (pick, now)
            self._send(MessageType.SEGMENT_REQUEST, nid, pick, channel,
                       {"seg": seg})
            sent.append((seg, pick))
        if len(st.partners) < self.cfg.partner_min and st.watching:
            self._request_partner_refresh(nid, channel)
        return sent

    def _prune_partners(self, nid: int, channel: str, st: StreamState) -> None:
        dropped = [p for p, n in st.suspect.items() if n >= 2]
        for p in dropped:
            if p in st.partners:
                st.partners.remove(p)
            del st.suspect[p]

    def _request_partner_refresh(self, nid: int, channel: str) -> None:
        clique = self.substrate.clique_of(nid)
        info = self.relay_of(clique, channel)
        if self._relay_alive(info) and info.relay != nid and \
                info.relay in clique.members:
            self._send(MessageType.PARTNER_REFRESH, nid, info.relay, channel,
                       {"requester": nid})

    def _handle_partner_refresh(self, relay: int, channel: str, msg: Message) -> None:
        requester = msg.payload["requester"]
        st = self.stream_of(relay, channel)
        if st is None:
            return
        if requester not in st.recipient_list:
            st.recipient_list.append(requester)
        pool = sorted(n for n in st.recipient_list
                      if n != requester and self.node(n).alive)
        sub = min(self.cfg.partner_subset, len(pool))
        partners = sorted(self.rng_partner.sample(pool, sub)) if sub else []
        self._send(MessageType.JOIN_REPLY, relay, requester, channel,
                   {"partners": partners, "latest": st.latest, "relay": relay,
                    "chain": 1, "refresh": True})

    def _handle_segment_request(self, nid: int, channel: str, msg: Message) -> None:
        st = self.stream_of(nid, channel)
        if st is None:
            return
        seg = msg.payload["seg"]
        if seg not in st.buffer:
            return
        requester = msg.src_node
        if requester not in st.partners and requester != nid and \
                len(st.partners) < self.cfg.partner_max:
            st.partners.append(requester)
        self._send(MessageType.SEGMENT_DATA, nid, requester, channel,
                   {"seg": seg, "gen": st.gen_times.get(seg, 0.0),
                    "push": False, "pair": (None, None)})

    # ------------------------------------------------------------------
    # segment arrival, pushing down the tree, stoppage detection

    def _handle_segment_data(self, nid: int, channel: str, msg: Message) -> None:
        st = self.stream_of(nid, channel, create=True)
        seg = msg.payload["seg"]
        gen_t = msg.payload.get("gen", 0.0)
        now = self.engine.now
        fresh = st.hold(seg, now, gen_t)
        st.outstanding.pop(seg, None)
        st.suspect.pop(msg.src_node, None)
        info = self.info_of(nid, channel)
        is_push = msg.payload.get("push", False)
        if info is not None and info.relay == nid:
            if is_push:
                st.last_push_arrival = now
                pair = msg.payload.get("pair", (None, None))
                if pair[0] is not None and pair[0] != nid and \
                        info.parent != pair[0]:
                    info.parent = pair[0]
                    info.backup_parent = pair[1]
                clique = self.substrate.cliques.get(self.node(nid).clique)
                self._arm_stoppage(nid, channel)
            if fresh:
                my_pair = (nid, info.backup)
                for child in list(info.child_list):
                    if self.node(child).alive:
                        self._push_segment(nid, child, channel, seg, gen_t, my_pair)
        feeds = self.displaced.get((nid, channel))
        if feeds and fresh:
            pair = (info.relay, info.backup) if info is not None else (nid, None)
            for target, deadline in list(feeds.items()):
                if deadline < now or not self.node(target).alive:
                    del feeds[target]
                else:
                    self._push_segment(nid, target, channel, seg, gen_t, pair)
            if not feeds:
                self._finish_feeding(nid, channel)
        self._note_recovery_delivery(nid, channel, now)

    def _arm_stoppage(self, relay: int, channel: str) -> None:
        key = (relay, channel)
        old = self.stoppage_timers.pop(key, None)
        if old is not None:
            old.cancel()
        info = self.info_of(relay, channel)
        if info is None or info.parent is None:
            return
        src = self.sources.get(channel)
        rate = src.rate if src else self.cfg.segment_rate
        parent = info.parent
        if src is not None and parent == src.node:
            return  # root relay: the source is not probed
        if not (parent in self.substrate.nodes):
            return
        theta = self.cfg.stoppage_threshold_rtt * self.rtt_est(relay, parent)
        delay = 1.0 / rate + theta
        ev = self.engine.after(delay, EventKind.MAINTENANCE,
                               self._check_stoppage, relay, channel,
                               self.engine.now, desc="stoppage")
        self.stoppage_timers[key] = ev

    def _check_stoppage(self, relay: int, channel: str, armed_at: float) -> None:
        key = (relay, channel)
        self.stoppage_timers.pop(key, None)
        rec = self.substrate.nodes.get(relay)
        if rec is None or not rec.alive:
            return
        info = self.info_of(relay, channel)
        if info is None or info.relay != relay or info.parent is None:
            return
        st = self.stream_of(relay, channel)
        if st is None or st.last_push_arrival > armed_at:
            return
        src = self.sources.get(channel)
        if src is not None and info.parent == src.node:
            # Root relay: the source is not probed; re-arm lazily on next push.
            return
        if key in self.probe_pending:
            return
        self._send(MessageType.IS_ALIVE, relay, info.parent, channel,
                   {"prober": relay, "latest": st.latest})
        timeout = self.cfg.probe_timeout_rtt * self.rtt_est(relay, info.parent)
        ev = self.engine.after(timeout, EventKind.MAINTENANCE,
                               self._probe_timeout, relay, channel, info.parent,
                               desc="probe-timeout")
        self.probe_pending[key] = ev
        self._note_probe(relay, channel, info.parent)

    def _handle_is_alive(self, nid: int, channel: str, msg: Message) -> None:
        st = self.stream_of(nid, channel)
        latest = st.latest if st is not None else -1
        self._send(MessageType.ALIVE, nid, msg.src_node, channel,
                   {"latest": latest})

    def _handle_alive(self, nid: int, channel: str, msg: Message) -> None:
        key = (nid, channel)
        ev = self.probe_pending.pop(key, None)
        if ev is not None:
            ev.cancel()
        st = self.stream_of(nid, channel)
        if st is None:
            return
        # Parent is alive. If it holds newer segments than we do, something
        # upstream of us is being repaired; rejoin independently if the
        # stream stays silent past the secondary threshold.
        if msg.payload.get("latest", -1) > st.latest:
            self._arm_rejoin_timer(nid, channel)

    def _probe_timeout(self, relay: int, channel: str, parent: int) -> None:
        key = (relay, channel)
        self.probe_pending.pop(key, None)
        rec = self.substrate.nodes.get(relay)
        if rec is None or not rec.alive:
            return
        info = self.info_of(relay, channel)
        if info is None or info.parent != parent:
            return
        self._note_detection(relay, channel, parent, "probe")
        backup_parent = info.backup_parent
        if backup_parent is not None and self.node(backup_parent).alive:
            self._send(MessageType.RECOVER_TREE, relay, backup_parent, channel,
                       {"failed": parent, "child": relay})
            self._arm_rejoin_timer(relay, channel)
        else:
            self._independent_rejoin(relay, channel)

    def _arm_rejoin_timer(self, relay: int, channel: str) -> None:
        info = self.info_of(relay, channel)
        if info is None:
            return
        ref = info.parent if info.parent in self.substrate.nodes else relay
        wait = self.cfg.rejoin_threshold_rtt * max(self.rtt_est(relay, ref), 1e-6)
        marker = self.engine.now
        self.engine.after(wait, EventKind.MAINTENANCE, self._rejoin_check,
                          relay, channel, marker, desc="rejoin-check")

    def _rejoin_check(self, relay: int, channel: str, marker: float) -> None:
        rec = self.substrate.nodes.get(relay)
        if rec is None or not rec.alive:
            return
        info = self.info_of(relay, channel)
        st = self.stream_of(relay, channel)
        if info is None or info.relay != relay or st is None:
            return
        if st.last_push_arrival >= marker:
            return
        self._independent_rejoin(relay, channel)

    def _independent_rejoin(self, relay: int, channel: str,
                            confirm_to: Optional[int] = None) -> None:
        """Both relay and backup upstream are gone: rejoin from scratch."""
        source = self.directory.get(channel)
        if source is None or not self.node(source).alive:
            return
        if not self.node(relay).alive:
            return
        payload = {"joining_stable": relay, "chain": 1}
        if confirm_to is not None:
            payload["confirm_to"] = confirm_to
        self._send(MessageType.JOIN_REMOTE, relay, source, channel, payload)
        self._arm_rejoin_timer(relay, channel)

    # ------------------------------------------------------------------
    # heartbeats and backup takeover

    def _start_heartbeats(self, info: ChannelInfo) -> None:
        if info.relay is None or info.backup is None:
            return
        self._watch_pair(info.relay, info.backup)
        self._watch_pair(info.backup, info.relay)

    def _watch_pair(self, watcher: int, watched: int) -> None:
        key = (watcher, watched)
        self.hb_watch[key] = self.hb_watch.get(key, 0) + 1
        if self.hb_watch[key] > 1:
            return
        self.hb_last[key] = self.engine.now
        self.engine.after(self.cfg.heartbeat_interval, EventKind.MAINTENANCE,
                          self._hb_tick, watcher, watched, desc="hb")

    def _unwatch_pair(self, watcher: int, watched: int) -> None:
        key = (watcher, watched)
        if key in self.hb_watch:
            self.hb_watch[key] -= 1
            if self.hb_watch[key] <= 0:
                del self.hb_watch[key]
                self.hb_last.pop(key, None)

    def _hb_tick(self, watcher: int, watched: int) -> None:
        key = (watcher, watched)
        if key not in self.hb_watch:
            return
        wrec = self.substrate.nodes.get(watcher)
        if wrec is None or not wrec.alive:
            del self.hb_watch[key]
            return
        target = self.substrate.nodes.get(watched)
        if target is not None and target.alive:
            self._send(MessageType.HEARTBEAT, watcher, watched)
        grace = 2.0 * self.rtt_est(watcher, watched) if target is not None else 0.0
        if self.engine.now - self.hb_last.get(key, 0.0) > \
                self.cfg.heartbeat_interval + grace:
            self._peer_presumed_dead(watcher, watched)
            return
        self.engine.after(self.cfg.heartbeat_interval, EventKind.MAINTENANCE,
                          self._hb_tick, watcher, watched, desc="hb")

    def _handle_heartbeat(self, nid: int, msg: Message) -> None:
        self.hb_last[(nid, msg.src_node)] = self.engine.now

    def _peer_presumed_dead(self, watcher: int, dead: int) -> None:
        self.hb_watch.pop((watcher, dead), None)
        for ch, info in sorted(self.channel_lists.get(watcher, {}).items()):
            if info.relay == dead and info.backup == watcher:
                self._note_detection(watcher, ch, dead, "heartbeat")
                self._takeover(watcher, ch, dead)
            elif info.relay == watcher and info.backup == dead:
                self._redesignate_backup(watcher, ch)

    def _handle_recover_tree(self, nid: int, channel: str, msg: Message) -> None:
        failed = msg.payload["failed"]
        info = self.info_of(nid, channel)
        if info is None:
            return
        if info.relay == failed:
            self._takeover(nid, channel, failed)
        # If the takeover already happened this is a late recoverTree; the
        # child will resume via the pushes already restarted.

    def _takeover(self, backup: int, channel: str, failed: int) -> None:
        """Backup assumes the relay role: two messages leave this node."""
        rec = self.substrate.nodes.get(backup)
        if rec is None or not rec.alive or rec.clique is None:
            return
        info = self.info_of(backup, channel)
        if info is None or info.relay != failed:
            return
        clique = self.substrate.cliques[rec.clique]
        info.relay = backup
        info.backup = self._pick_backup(clique, backup)
        info.degraded = info.backup is None
        self.relay_load[backup] = self.relay_load.get(backup, 0) + 1
        rep = self.active_reports.get((failed, channel))
        if rep is not None:
            rep.taken_over_by = backup
        st = self.stream_of(backup, channel, create=True)
        if backup not in st.recipient_list:
            st.recipient_list.insert(0, backup)
        parent = info.parent
        src = self.sources.get(channel)
        if parent is not None and self.substrate.nodes.get(parent) is not None \
                and self.node(parent).alive:
            self._send(MessageType.HAND_OVER, backup, parent, channel,
                       {"new_relay": backup, "failed": failed})
        self._replicate(clique, channel, info, backup, takeover=True)
        self._start_heartbeats(info)
        self._unwatch_pair(backup, failed)
        # Serve the children from the local buffer immediately; the parent
        # resumes pushing once the handOver lands.
        if st.latest >= 0:
            pair = (backup, info.backup)
            for child in list(info.child_list):
                if self.node(child).alive:
                    self._push_segment(backup, child, channel, st.latest,
                                       st.gen_times.get(st.latest, 0.0), pair)
        self._ensure_mesh_round(backup, channel)
        self._arm_stoppage(backup, channel)

    def _handle_hand_over(self, nid: int, channel: str, msg: Message) -> None:
        new_relay = msg.payload["new_relay"]
        old = msg.payload.get("failed") or msg.payload.get("old_relay")
        src = self.sources.get(channel)
        if src is not None and src.node == nid:
            if old in src.children:
                src.children.remove(old)
            if new_relay not in src.children:
                src.children.append(new_relay)
            self._note_parent_resumed(channel, old)
            return
        info = self.info_of(nid, channel)
        if info is None or info.relay != nid:
            return
        if old in info.child_list:
            info.child_list.remove(old)
        if new_relay not in info.child_list:
            info.child_list.append(new_relay)
        clique = self.substrate.clique_of(nid)
        self._replicate(clique, channel, info, nid)
        self._note_parent_resumed(channel, old)
        # Bridge the gap until the next generated segment reaches the taker.
        st = self.stream_of(nid, channel)
        if st is not None and st.latest >= 0 and self.node(new_relay).alive:
            self._push_segment(nid, new_relay, channel, st.latest,
                               st.gen_times.get(st.latest, 0.0),
                               self._pair_of(nid, channel))

    def _redesignate_backup(self, relay: int, channel: str) -> None:
        rec = self.substrate.nodes.get(relay)
        if rec is None or rec.clique is None:
            return
        clique = self.substrate.cliques[rec.clique]
        info = self.info_of(relay, channel)
        if info is None or info.relay != relay:
            return
        old = info.backup
        info.backup = self._pick_backup(clique, relay)
        info.degraded = info.backup is None
        if old is not None:
            self._unwatch_pair(relay, old)
        self._replicate(clique, channel, info, relay)
        self._start_heartbeats(info)

    # ------------------------------------------------------------------
    # graceful departure

    def leave_channel(self, nid: int, channel: str) -> None:
        """Stop receiving a channel; mesh neighbors and the relay are told."""
        st = self.stream_of(nid, channel)
        clique = self.substrate.clique_of(nid)
        info = self.relay_of(clique, channel)
        if st is not None and st.watching:
            st.watching = False
            for p in sorted(set(st.partners)):
                if self.node(p).alive:
                    self._send(MessageType.LEAVE, nid, p, channel,
                               {"who": nid, "role": "partner"})
            if self._relay_alive(info) and info.relay != nid:
                self._send(MessageType.LEAVE, nid, info.relay, channel,
                           {"who": nid, "role": "recipient"})
        if info is not None and info.relay == nid:
            self._maybe_release_relay(nid, channel)

    def _handle_leave(self, nid: int, channel: str, msg: Message) -> None:
        who = msg.payload["who"]
        role = msg.payload.get("role")
        st = self.stream_of(nid, channel)
        if st is None:
            return
        if who in st.partners:
            st.partners.remove(who)
        if role in ("recipient", "child") or who in st.recipient_list:
            if who in st.recipient_list:
                st.recipient_list.remove(who)
        info = self.info_of(nid, channel)
        if info is not None and info.relay == nid:
            if role == "child" and who in info.child_list:
                info.child_list.remove(who)
                self._replicate(self.substrate.clique_of(nid), channel, info, nid)
            self._maybe_release_relay(nid, channel)
        elif st.watching and len(st.partners) < self.cfg.partner_min:
            self._request_partner_refresh(nid, channel)

    def _maybe_release_relay(self, relay: int, channel: str) -> None:
        """A relay stops only once recipients, children and feeds are gone."""
        info = self.info_of(relay, channel)
        st = self.stream_of(relay, channel)
        if info is None or info.relay != relay or st is None:
            return
        watchers = [n for n in st.recipient_list if n != relay
                    and self.node(n).alive
                    and (self.stream_of(n, channel) or StreamState()).watching]
        if watchers or info.child_list or self.displaced.get((relay, channel)):
            return
        src = self.sources.get(channel)
        parent = info.parent
        if parent is not None and parent in self.substrate.nodes and \
                self.node(parent).alive and self.node(relay).alive:
            role = "child"
            if src is not None and src.node == parent:
                if relay in src.children:
                    src.children.remove(relay)
            else:
                self._send(MessageType.LEAVE, relay, parent, channel,
                           {"who": relay, "role": role})
        clique = self.substrate.cliques.get(self.node(relay).clique)
        self.relay_load[relay] = max(0, self.relay_load.get(relay, 0) - 1)
        if info.backup is not None:
            self._unwatch_pair(relay, info.backup)
            self._unwatch_pair(info.backup, relay)
        if clique is not None:
            for sid in list(clique.stable_nodes):
                other = self.info_of(sid, channel)
                if other is not None and other.relay == relay:
                    self._drop_info(sid, channel)
        self._drop_info(relay, channel)
        key = (relay, channel)
        ev = self.mesh_timers.pop(key, None)
        if ev is not None:
            ev.cancel()
        ev = self.stoppage_timers.pop(key, None)
        if ev is not None:
            ev.cancel()

    def handover_relay(self, departing: int, channel: str) -> Optional[int]:
        """Transfer the relay role before the departing node leaves.

        Returns the new relay id, or None when no candidate exists (the
        channel is then left to the failure-recovery path).
        """
        rec = self.substrate.nodes.get(departing)
        info = self.info_of(departing, channel)
        if rec is None or rec.clique is None or info is None or \
                info.relay != departing:
            return None
        clique = self.substrate.cliques[rec.clique]
        cands = [s for s in clique.stable_nodes
                 if s != departing and self.node(s).alive]
        if not cands:
            return None
        new_relay = min(cands, key=lambda s: (-self._available_uplink(s), s))
        st = self.stream_of(departing, channel)
        old_backup = info.backup
        info.relay = new_relay
        if info.backup == new_relay or info.backup == departing:
            info.backup = None
        new_info = info
        self.relay_load[new_relay] = self.relay_load.get(new_relay, 0) + 1
        self.relay_load[departing] = max(0, self.relay_load.get(departing, 0) - 1)
        # Hand the relay-side stream state across.
        nst = self.stream_of(new_relay, channel, create=True)
        if st is not None:
            nst.recipient_list = [n for n in st.recipient_list if n != departing]
            st.recipient_list = []
        feeds = self.displaced.pop((departing, channel), None)
        if feeds:
            self.displaced.setdefault((new_relay, channel), {}).update(feeds)
        if new_relay not in nst.recipient_list:
            nst.recipient_list.insert(0, new_relay)
        info.backup = self._pick_backup(clique, new_relay)
        info.degraded = info.backup is None
        parent = info.parent
        src = self.sources.get(channel)
        if parent is not None and self.node(departing).alive and \
                parent in self.substrate.nodes and self.node(parent).alive:
            if not (src is not None and src.node == parent and
                    src.node in clique.members):
                self._send(MessageType.HAND_OVER, departing, parent, channel,
                           {"new_relay": new_relay, "failed": departing,
                            "old_relay": departing})
            else:
                # Root case: the source sits in this clique and learns the new
                # relay from the replicated update; no parent message needed.
                if departing in src.children:
                    src.children.remove(departing)
                if new_relay not in src.children:
                    src.children.append(new_relay)
        self._replicate(clique, channel, info, new_relay)
        if old_backup is not None:
            self._unwatch_pair(departing, old_backup)
            self._unwatch_pair(old_backup, departing)
        self._start_heartbeats(info)
        key = (departing, channel)
        ev = self.mesh_timers.pop(key, None)
        if ev is not None:
            ev.cancel()
        ev = self.stoppage_timers.pop(key, None)
        if ev is not None:
            ev.cancel()
        self._drop_info(departing, channel)
        self._set_info(new_relay, channel, info)
        self._ensure_mesh_round(new_relay, channel)
        self._arm_stoppage(new_relay, channel)
        return new_relay

    def graceful_leave(self, nid: int) -> None:
        """Leave the platform: hand over relayed channels, tell mesh peers,
        then depart after a short grace during which pushes keep forwarding."""
        for ch in sorted(self.channel_lists.get(nid, {})):
            info = self.info_of(nid, ch)
            if info is not None and info.relay == nid:
                self.handover_relay(nid, ch)
        for (n, ch), st in list(self.streams.items()):
            if n == nid and st.watching:
                self.leave_channel(nid, ch)

    # ------------------------------------------------------------------
    # rejoin notices (split/merge displacement)

    def _notify_rejoin(self, feeder: int, target: int, channel: str) -> None:
        deadline = self.engine.now + \
            self.cfg.feed_timeout_rtt * max(self.rtt_est(feeder, target), 1e-6)
        self.displaced.setdefault((feeder, channel), {})[target] = deadline
        self.engine.schedule_at(deadline + 1e-6, EventKind.MAINTENANCE,
                                self._feed_sweep, feeder, channel,
                                desc="feed-sweep")
        if self.node(target).alive and self.node(feeder).alive:
            self._send(MessageType.REJOIN, feeder, target, channel,
                       {"feeder": feeder})

    def _feed_sweep(self, feeder: int, channel: str) -> None:
        feeds = self.displaced.get((feeder, channel))
        if feeds is None:
            return
        now = self.engine.now
        for target, deadline in list(feeds.items()):
            if deadline <= now or not self.node(target).alive:
                del feeds[target]
        if not feeds:
            self._finish_feeding(feeder, channel)

    def _finish_feeding(self, feeder: int, channel: str) -> None:
        self.displaced.pop((feeder, channel), None)
        parent = self.retiring.pop((feeder, channel), None)
        if parent is not None and self.node(feeder).alive and \
                parent in self.substrate.nodes and self.node(parent).alive:
            src = self.sources.get(channel)
            if src is not None and src.node == parent:
                if feeder in src.children:
                    src.children.remove(feeder)
            else:
                self._send(MessageType.LEAVE, feeder, parent, channel,
                           {"who": feeder, "role": "child"})
        info = self.info_of(feeder, channel)
        if info is not None and info.relay == feeder:
            self._maybe_release_relay(feeder, channel)

    def _handle_rejoin(self, nid: int, channel: str, msg: Message) -> None:
        feeder = msg.payload["feeder"]
        info = self.info_of(nid, channel)
        if info is not None and info.relay == nid:
            self._independent_rejoin(nid, channel, confirm_to=feeder)
            return
        self.initiate_join(nid, channel, rejoin=True)
        self._pending_confirm[(nid, channel)] = feeder

    def _handle_rejoin_confirm(self, nid: int, channel: str, msg: Message) -> None:
        child = msg.payload["child"]
        st = self.stream_of(nid, channel)
        if st is not None and child in st.recipient_list:
            st.recipient_list.remove(child)
        feeds = self.displaced.get((nid, channel))
        if feeds is not None:
            feeds.pop(child, None)
            if not feeds:
                self._finish_feeding(nid, channel)
        info = self.info_of(nid, channel)
        if info is not None and info.relay == nid and child in info.child_list:
            info.child_list.remove(child)
            clique = self.substrate.cliques.get(self.node(nid).clique)
            if clique is not None:
                self._replicate(clique, channel, info, nid)
        if info is not None and info.relay == nid:
            self._maybe_release_relay(nid, channel)

    # ------------------------------------------------------------------
    # split and merge repair

    def repair_on_split(self, old_id: CliqueId, primary: Clique,
                        offspring: Clique) -> None:
        """Re-point trees after a clique split.

        Channels whose relay landed in the offspring and that feed children
        are handed to a primary stable node; offspring recipients rejoin
        under the new clique id and are fed until they confirm.
        """
        channels = sorted(self._clique_channels(primary) |
                          self._clique_channels(offspring))
        for ch in channels:
            infos = {}
            for nid in list(primary.members) + list(offspring.members):
                info = self.info_of(nid, ch)
                if info is not None and info.relay is not None:
                    infos.setdefault(info.relay, info)
            relay = None
            for cand in sorted(infos):
                rec = self.substrate.nodes.get(cand)
                if rec is not None and rec.alive and \
                        (cand in primary.members or cand in offspring.members):
                    relay = cand
                    break
            if relay is None:
                continue
            info = infos[relay]
            in_primary = relay in primary.members
            home = primary if in_primary else offspring
            away = offspring if in_primary else primary
            st = self.stream_of(relay, ch, create=True)
            # Partner lists never span cliques: prune both sides.
            self._prune_cross_partners(primary, offspring, ch)
            displaced = [n for n in st.recipient_list
                         if n != relay and n in away.members
                         and self.node(n).alive]
            if in_primary:
                for w in displaced:
                    self._notify_rejoin(relay, w, ch)
            else:
                if displaced:
                    for w in displaced:
                        self._notify_rejoin(relay, w, ch)
                local_watchers = [n for n in st.recipient_list
                                  if n != relay and n in home.members
                                  and self.node(n).alive]
                if local_watchers:
                    # Re-join under the new clique id before handing over.
                    self._independent_rejoin(relay, ch)
                if info.child_list:
                    self._handover_to_primary(relay, ch, info, primary)
                elif not local_watchers:
                    self._maybe_release_relay(relay, ch)
            # Each surviving relay's backup must live in its own half.
            for half in (primary, offspring):
                for sid in list(half.stable_nodes):
                    cinfo = self.info_of(sid, ch)
                    if cinfo is None or cinfo.relay != sid:
                        continue
                    if sid not in half.members:
                        continue
                    bad = (cinfo.backup is None
                           or cinfo.backup not in half.members
                           or not self.node(cinfo.backup).alive)
                    if bad:
                        self._redesignate_backup(sid, ch)

    def _prune_cross_partners(self, a: Clique, b: Clique, channel: str) -> None:
        for clique in (a, b):
            for nid in clique.members:
                st = self.streams.get((nid, channel))
                if st is None:
                    continue
                st.partners = [p for p in st.partners if p in clique.members]
                st.recipient_list = [r for r in st.recipient_list
                                     if r in clique.members]

    def _handover_to_primary(self, relay: int, channel: str, info: ChannelInfo,
                             primary: Clique) -> None:
        new_relay, backup = self.relay_election(primary, channel)
        if new_relay is None:
            return
        children = [c for c in info.child_list if self.node(c).alive]
        new_info = ChannelInfo(relay=new_relay, backup=backup,
                               child_list=children, parent=info.parent,
                               backup_parent=info.backup_parent,
                               degraded=backup is None)
        self.relay_load[new_relay] = self.relay_load.get(new_relay, 0) + 1
        self._replicate(primary, channel, new_info, new_relay)
        nst = self.stream_of(new_relay, channel, create=True)
        if new_relay not in nst.recipient_list:
            nst.recipient_list.insert(0, new_relay)
        parent = info.parent
        src = self.sources.get(channel)
        if parent is not None and parent in self.substrate.nodes and \
                self.node(parent).alive and self.node(relay).alive:
            if src is not None and src.node == parent:
                if relay in src.children:
                    src.children.remove(relay)
                if new_relay not in src.children:
                    src.children.append(new_relay)
            else:
                self._send(MessageType.HAND_OVER, relay, parent, channel,
                           {"new_relay": new_relay, "failed": relay,
                            "old_relay": relay})
        info.child_list = []
        self._start_heartbeats(new_info)
        self._ensure_mesh_round(new_relay, channel)
        self._arm_stoppage(new_relay, channel)
        self.relay_load[relay] = max(0, self.relay_load.get(relay, 0) - 1)
        offspring_watchers = [n for n in (self.stream_of(relay, channel) or
                                          StreamState()).recipient_list
                              if n != relay]
        if not offspring_watchers:
            self._maybe_release_relay(relay, channel)

    def repair_on_merge(self, survivor: Clique, old_id: CliqueId,
                        absorbed: list[tuple[CliqueId, list[int]]]) -> None:
        """Reconcile ChannelInfo after cliques collapse into one.

        Duplicate relays resolve in favor of the merging clique's relay;
        children of relays from vanished cliques are kept only when their
        clique id still matches a routing-table entry, others rejoin while
        being fed until confirmation or timeout.
        """
        if self.substrate.tables_dirty:
            self.substrate.rebuild_tables()
        valid_targets = {e.target for e in survivor.routing_table.values()}
        absorbed_members: set[int] = set()
        for _cid, members in absorbed:
            absorbed_members.update(members)
        channels = sorted(self._clique_channels(survivor))
        for ch in channels:
            infos: dict[int, ChannelInfo] = {}
            for nid in survivor.members:
                info = self.info_of(nid, ch)
                if info is not None and info.relay is not None and \
                        info.relay in survivor.members and \
                        self.node(info.relay).alive:
                    infos.setdefault(info.relay, info)
            if not infos:
                continue
            # The relay from the merging clique prevails over relays from
            # the vanished cliques.
            merging = [r for r in sorted(infos) if r not in absorbed_members]
            keep = merging[0] if merging else sorted(infos)[0]
            keep_info = infos[keep]
            self._set_info(keep, ch, keep_info)
            for r in sorted(infos):
                if r == keep:
                    continue
                self._absorb_duplicate_relay(survivor, ch, keep, keep_info,
                                             r, infos[r], valid_targets)
            if keep in absorbed_members:
                self._filter_children(survivor, ch, keep, keep_info,
                                      valid_targets)
            if keep_info.backup is None or \
                    keep_info.backup not in survivor.members or \
                    not self.node(keep_info.backup).alive:
                self._redesignate_backup(keep, ch)
            else:
                self._replicate(survivor, ch, keep_info, keep)
            st = self.stream_of(keep, ch, create=True)
            if keep not in st.recipient_list:
                st.recipient_list.insert(0, keep)
            self._ensure_mesh_round(keep, ch)

    def _absorb_duplicate_relay(self, survivor: Clique, channel: str, keep: int,
                                keep_info: ChannelInfo, other: int,
                                other_info: ChannelInfo,
                                valid_targets: set) -> None:
        ost = self.stream_of(other, channel)
        kst = self.stream_of(keep, channel, create=True)
        fanout = self.substrate.cfg.fanout
        for child in list(other_info.child_list):
            crec = self.substrate.nodes.get(child)
            if crec is None or not crec.alive:
                other_info.child_list.remove(child)
                continue
            if crec.clique in valid_targets and \
                    len(keep_info.child_list) < fanout and \
                    child not in keep_info.child_list:
                keep_info.child_list.append(child)
                other_info.child_list.remove(child)
                if self.node(keep).alive and kst.latest >= 0:
                    self._push_segment(keep, child, channel, kst.latest,
                                       kst.gen_times.get(kst.latest, 0.0),
                                       (keep, keep_info.backup))
            else:
                self._notify_rejoin(other, child, channel)
                other_info.child_list.remove(child)
        # Watchers of the vanished relay now live in the survivor clique.
        if ost is not None:
            for w in ost.recipient_list:
                if w != other and w not in kst.recipient_list:
                    kst.recipient_list.append(w)
            ost.recipient_list = []
            if ost.watching and other not in kst.recipient_list:
                kst.recipient_list.append(other)
        if other_info.backup is not None:
            self._unwatch_pair(other, other_info.backup)
            self._unwatch_pair(other_info.backup, other)
        self.relay_load[other] = max(0, self.relay_load.get(other, 0) - 1)
        key = (other, channel)
        ev = self.mesh_timers.pop(key, None)
        if ev is not None:
            ev.cancel()
        ev = self.stoppage_timers.pop(key, None)
        if ev is not None:
            ev.cancel()
        # The losing relay keeps feeding invalidated children until they
        # confirm their rejoin (or the feed times out), then leaves the tree.
        self._drop_info(other, channel)
        if self.displaced.get((other, channel)):
            self.retiring[(other, channel)] = other_info.parent
        else:
            self._finish_feeding_now(other, channel, other_info.parent)

    def _finish_feeding_now(self, feeder: int, channel: str,
                            parent: Optional[int]) -> None:
        self.retiring[(feeder, channel)] = parent
        self._finish_feeding(feeder, channel)

    def _filter_children(self, survivor: Clique, channel: str, relay: int,
                         info: ChannelInfo, valid_targets: set) -> None:
        for child in list(info.child_list):
            crec = self.substrate.nodes.get(child)
            if crec is None or not crec.alive:
                info.child_list.remove(child)
                continue
            if crec.clique not in valid_targets:
                info.child_list.remove(child)
                self._notify_rejoin(relay, child, channel)

    # ------------------------------------------------------------------
    # failure instrumentation

    def register_failure(self, nid: int, crash_time: float) -> list[RecoveryReport]:
        """Called by the scenario when it crashes a node; opens reports for
        every channel the node was relaying."""
        reports = []
        for ch, info in sorted(self.channel_lists.get(nid, {}).items()):
            if info.relay == nid:
                rep = RecoveryReport(failed_node=nid, channel=ch,
                                     crash_time=crash_time)
                self.reports.append(rep)
                self.active_reports[(nid, ch)] = rep
                reports.append(rep)
        return reports

    def _report_for(self, channel: str) -> Optional[RecoveryReport]:
        for (failed, ch), rep in self.active_reports.items():
            if ch == channel and not rep.recovered:
                return rep
        return None

    def _note_probe(self, prober: int, channel: str, parent: int) -> None:
        rep = self.active_reports.get((parent, channel))
        if rep is not None and rep.probing_child is None:
            rep.probing_child = prober
            rep.rtt_legs.append(self.rtt_est(prober, parent))

    def _note_detection(self, detector: int, channel: str, failed: int,
                        how: str) -> None:
        rep = self.active_reports.get((failed, channel))
        if rep is not None and rep.detect_time < 0:
            rep.detect_time = self.engine.now
            rep.detected_by = how

    def _note_parent_resumed(self, channel: str, failed: int) -> None:
        rep = self.active_reports.get((failed, channel))
        if rep is not None and rep.parent_resumed < 0:
            rep.parent_resumed = self.engine.now

    def _note_recovery_delivery(self, nid: int, channel: str, now: float) -> None:
        for (failed, ch), rep in list(self.active_reports.items()):
            if ch != channel or rep.recovered or rep.detect_time < 0:
                continue
            hit = rep.probing_child == nid or \
                (rep.probing_child is None and rep.taken_over_by == nid)
            if hit and now >= rep.detect_time:
                rep.recovered_time = now
                rep.recovered = True
                if rep.probing_child is not None:
                    back = self.info_of(rep.probing_child, ch)
                    if back is not None and back.parent is not None and \
                            self.substrate.nodes.get(back.parent) is not None:
                        rep.rtt_legs.append(
                            self.rtt_est(rep.probing_child, back.parent))

    def finalize_report(self, rep: RecoveryReport) -> RecoveryReport:
        """Fill loss accounting once the episode is over."""
        src = self.sources.get(rep.channel)
        self.active_reports.pop((rep.failed_node, rep.channel), None)
        if src is None:
            return rep
        end = rep.parent_resumed if rep.parent_resumed >= 0 else rep.recovered_time
        if end < 0:
            end = self.engine.now
        lost = 0
        child = rep.probing_child
        cst = self.stream_of(child, rep.channel) if child is not None else None
        for seg, t in src.gen_times.items():
            if rep.crash_time <= t < end:
                if cst is None or seg not in cst.buffer:
                    lost += 1
        rep.segments_lost = lost
        return rep

    # ------------------------------------------------------------------
    # dispatch

    def deliver(self, msg: Message, node: NodeRecord) -> None:
        nid = node.node_id
        ch = msg.channel
        mt = msg.mtype
        if mt is MessageType.JOIN:
            self._handle_join_request(nid, ch, msg.payload["requester"])
        elif mt is MessageType.JOIN_REPLY:
            if msg.payload.get("refresh"):
                st = self.stream_of(nid, ch)
                if st is not None:
                    for p in msg.payload.get("partners", []):
                        if p != nid and p not in st.partners and \
                                len(st.partners) < self.cfg.partner_max:
                            st.partners.append(p)
            else:
                self._complete_join(nid, ch, msg.payload)
                feeder = self._pending_confirm.pop((nid, ch), None)
                if feeder is not None and self.node(feeder).alive:
                    self._send(MessageType.REJOIN_CONFIRM, nid, feeder, ch,
                               {"child": nid})
        elif mt is MessageType.JOIN_REMOTE:
            self._handle_join_remote(nid, ch, msg)
        elif mt is MessageType.ADD_NODE:
            self._handle_add_node(nid, ch, msg)
        elif mt is MessageType.ADD_NODE_FWD:
            self._handle_add_node(nid, ch, msg)
        elif mt is MessageType.ADD_NODE_ACK:
            self._handle_add_node_ack(nid, ch, msg)
        elif mt is MessageType.LEAVE:
            self._handle_leave(nid, ch, msg)
        elif mt is MessageType.IS_ALIVE:
            self._handle_is_alive(nid, ch, msg)
        elif mt is MessageType.ALIVE:
            self._handle_alive(nid, ch, msg)
        elif mt is MessageType.RECOVER_TREE:
            self._handle_recover_tree(nid, ch, msg)
        elif mt is MessageType.HAND_OVER:
            self._handle_hand_over(nid, ch, msg)
        elif mt is MessageType.HEARTBEAT:
            self._handle_heartbeat(nid, msg)
        elif mt is MessageType.SEGMENT_REQUEST:
            self._handle_segment_request(nid, ch, msg)
        elif mt is MessageType.SEGMENT_DATA:
            self._handle_segment_data(nid, ch, msg)
        elif mt is MessageType.REJOIN:
            self._handle_rejoin(nid, ch, msg)
        elif mt is MessageType.REJOIN_CONFIRM:
            self._handle_rejoin_confirm(nid, ch, msg)
        elif mt is MessageType.CHANNEL_UPDATE:
            self._handle_channel_update(nid, ch, msg)
        elif mt is MessageType.PARTNER_REFRESH:
            self._handle_partner_refresh(nid, ch, msg)

    def _handle_channel_update(self, nid: int, channel: str, msg: Message) -> None:
        snap = msg.payload.get("info")
        if snap is None:
            self._drop_info(nid, channel)
            return
        relay, backup, children, parent, backup_parent = snap
        src = self.sources.get(channel)
        if src is not None and src.node == nid:
            # The source tracks its root relay through replica updates.
            src.children = [c for c in src.children
                            if self.substrate.nodes.get(c) is not None
                            and self.substrate.nodes[c].alive]
            if relay is not None and parent == nid:
                rc = self.substrate.nodes.get(relay)
                if rc is not None:
                    src.children = [c for c in src.children
                                    if c == relay or
                                    self.substrate.nodes[c].clique != rc.clique]
                if relay not in src.children:
                    src.children.append(relay)
            return
        info = self.info_of(nid, channel)
        if info is None:
            info = ChannelInfo()
            self._set_info(nid, channel, info)
        info.relay = relay
        info.backup = backup
        info.child_list = list(children)
        info.parent = parent
        info.backup_parent = backup_parent
