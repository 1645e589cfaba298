"""Modified clustered DHT substrate.

Nodes cluster into cliques with proximity-correlated bit-prefix ids that
tile the 64-bit id space. Each clique elects up to t stable nodes (eligible
after age T, ranked by uplink bandwidth) which hold the replicated routing
table. Prefix routing fixes b bits per inter-clique hop and prefers stable
nodes in each routing entry.

Membership maintenance (joins, splits, merges, elections, table rebuilds)
is instantaneous bookkeeping owned by the simulation event loop; split and
merge notifications are surfaced to listeners so the streaming layer can
repair its trees.
"""

from __future__ import annotations

import math
import random
from bisect import bisect_right, insort
from dataclasses import dataclass, field
from typing import Callable, Optional

from .geometry import Position, distance, median_split
from .ids import ID_LENGTH, ROOT_ID, CliqueId


class RoutingError(Exception):
    pass


class MalformedDestination(RoutingError):
    """Destination clique id or node address does not name anything live."""


class UnreachableDestination(RoutingError):
    """Destination exists but no live route could be completed."""


@dataclass
class SubstrateConfig:
    id_length: int = ID_LENGTH
    b: int = 2                 # bits matched per routing hop
    k: int = 4                 # node addresses per routing entry
    t: int = 2                 # stable nodes per clique
    stable_age: float = 50.0   # eligibility age T
    clique_min: int = 32
    clique_max: int = 128

    def validate(self) -> None:
        if self.id_length != ID_LENGTH:
            raise ValueError(f"id_length must be {ID_LENGTH}")
        if not 1 <= self.b <= 8:
            raise ValueError("b must be in [1, 8]")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.t < 2:
            raise ValueError("t must be >= 2")
        if not 0 < self.clique_min < self.clique_max:
            raise ValueError("need 0 < clique_min < clique_max")
        if self.clique_max < 2 * self.clique_min:
            raise ValueError("clique_max must be >= 2 * clique_min")

    @property
    def fanout(self) -> int:
        return 1 << self.b

    @property
    def max_route_hops(self) -> int:
        return math.ceil(self.id_length / self.b)


@dataclass
class NodeRecord:
    node_id: int
    position: Position
    join_time: float
    uplink_bandwidth: float
    is_stable: bool = False
    clique: Optional[CliqueId] = None
    alive: bool = True
    bootstrap_stable: bool = False

    def eligible(self, now: float, stable_age: float) -> bool:
        return self.alive and (self.bootstrap_stable
                               or now - self.join_time >= stable_age)


@dataclass
class RouteEntry:
    target: CliqueId
    addresses: list[int] = field(default_factory=list)


class Clique:
    def __init__(self, cid: CliqueId):
        self.id = cid
        self.members: dict[int, NodeRecord] = {}
        self.stable_nodes: list[int] = []
        self.routing_table: dict[tuple[int, int], RouteEntry] = {}
        self._sx = 0.0
        self._sy = 0.0

    def __repr__(self):
        return f"Clique({self.id}, n={len(self.members)})"

    @property
    def size(self) -> int:
        return len(self.members)

    def centroid(self) -> Position:
        n = len(self.members)
        if n == 0:
            return Position(0.0, 0.0)
        return Position(self._sx / n, self._sy / n)

    def _add(self, rec: NodeRecord) -> None:
        self.members[rec.node_id] = rec
        self._sx += rec.position.x
        self._sy += rec.position.y
        rec.clique = self.id

    def _remove(self, rec: NodeRecord) -> None:
        del self.members[rec.node_id]
        self._sx -= rec.position.x
        self._sy -= rec.position.y

    def table_holder(self) -> Optional[int]:
        """Node answering for the routing table: first stable, else lowest id."""
        if self.stable_nodes:
            return self.stable_nodes[0]
        if self.members:
            return min(self.members)
        return None


@dataclass
class PathHop:
    node_id: int
    clique: CliqueId
    length: float


@dataclass
class Path:
    hops: list[PathHop]

    @property
    def total_length(self) -> float:
        return sum(h.length for h in self.hops)

    @property
    def inter_clique_hops(self) -> int:
        return sum(1 for a, b in zip(self.hops, self.hops[1:])
                   if a.clique != b.clique)

    def nodes(self) -> list[int]:
        return [h.node_id for h in self.hops]


class CentroidGrid:
    """Exact nearest-centroid index over a sparse grid of plane cells."""

    def __init__(self, plane_side: float, cells: int = 64):
        self.cell = max(plane_side, 1e-9) / cells
        self.cells = cells
        self.buckets: dict[tuple[int, int], set[CliqueId]] = {}
        self.where: dict[CliqueId, tuple[int, int]] = {}

    def _cell_of(self, p: Position) -> tuple[int, int]:
        cx = min(self.cells - 1, max(0, int(p.x / self.cell)))
        cy = min(self.cells - 1, max(0, int(p.y / self.cell)))
        return cx, cy

    def put(self, cid: CliqueId, centroid: Position) -> None:
        cell = self._cell_of(centroid)
        old = self.where.get(cid)
        if old == cell:
            return
        if old is not None:
            self.buckets[old].discard(cid)
            if not self.buckets[old]:
                del self.buckets[old]
        self.buckets.setdefault(cell, set()).add(cid)
        self.where[cid] = cell

    def drop(self, cid: CliqueId) -> None:
        old = self.where.pop(cid, None)
        if old is not None:
            self.buckets[old].discard(cid)
            if not self.buckets[old]:
                del self.buckets[old]

    def nearest(self, p: Position, centroid_of: Callable[[CliqueId], Position]
                ) -> Optional[CliqueId]:
        if not self.where:
            return None
        cx, cy = self._cell_of(p)
        best: Optional[tuple[float, int, CliqueId]] = None
        ring = 0
        max_ring = 2 * self.cells
        while ring <= max_ring:
            # Any candidate beyond this ring is at least (ring-1)*cell away.
            if best is not None and (ring - 1) * self.cell > best[0]:
                break
            lo_x, hi_x = cx - ring, cx + ring
            lo_y, hi_y = cy - ring, cy + ring
            for x in range(lo_x, hi_x + 1):
                for y in range(lo_y, hi_y + 1):
                    if ring and not (x in (lo_x, hi_x) or y in (lo_y, hi_y)):
                        continue
                    for cid in self.buckets.get((x, y), ()):
                        d = distance(p, centroid_of(cid))
                        cand = (d, cid.lo, cid)
                        if best is None or cand[:2] < best[:2]:
                            best = cand
            ring += 1
        return best[2] if best else None


class Substrate:
    def __init__(self, cfg: SubstrateConfig, plane_side: float,
                 rng: Optional[random.Random] = None):
        cfg.validate()
        self.cfg = cfg
        self.plane_side = plane_side
        self.rng = rng or random.Random(0)
        self.nodes: dict[int, NodeRecord] = {}
        self.cliques: dict[CliqueId, Clique] = {}
        self._segment_los: list[int] = []
        self._segment_ids: list[CliqueId] = []
        self.grid = CentroidGrid(plane_side)
        self.tables_dirty = True
        self.now = 0.0
        self._next_id = 0
        self.split_listeners: list[Callable] = []
        self.merge_listeners: list[Callable] = []
        self.stable_listeners: list[Callable] = []

    # -- registry helpers -----------------------------------------------------

    def clique_of(self, node_id: int) -> Clique:
        return self.cliques[self.nodes[node_id].clique]

    def clique_at(self, point: int) -> Clique:
        idx = bisect_right(self._segment_los, point) - 1
        return self.cliques[self._segment_ids[idx]]

    def live_clique(self, cid: CliqueId) -> Optional[Clique]:
        return self.cliques.get(cid)

    def ring_order(self) -> list[Clique]:
        return [self.cliques[cid] for cid in self._segment_ids]

    def _register(self, clique: Clique) -> None:
        self.cliques[clique.id] = clique
        insort(self._segment_los, clique.id.lo)
        idx = self._segment_los.index(clique.id.lo)
        self._segment_ids.insert(idx, clique.id)
        self.grid.put(clique.id, clique.centroid())

    def _unregister(self, clique: Clique) -> None:
        del self.cliques[clique.id]
        idx = self._segment_los.index(clique.id.lo)
        # lo values are unique across live segments
        if self._segment_ids[idx] != clique.id:
            idx = self._segment_ids.index(clique.id)
        del self._segment_los[idx]
        del self._segment_ids[idx]
        self.grid.drop(clique.id)

    def _centroid_of(self, cid: CliqueId) -> Position:
        return self.cliques[cid].centroid()

    # -- membership ------------------------------------------------------------

    def join_node(self, position: Position, join_time: float,
                  uplink_bandwidth: float = 1.0,
                  node_id: Optional[int] = None) -> CliqueId:
        """Add a node to the centroid-nearest clique, splitting on overflow."""
        if node_id is None:
            node_id = self._next_id
        self._next_id = max(self._next_id, node_id) + 1
        rec = NodeRecord(node_id, position, join_time, uplink_bandwidth)
        self.nodes[node_id] = rec
        if not self.cliques:
            clique = Clique(ROOT_ID)
            rec.is_stable = True
            rec.bootstrap_stable = True
            clique._add(rec)
            clique.stable_nodes = [node_id]
            self._register(clique)
            self.tables_dirty = True
            return clique.id
        target = self.grid.nearest(position, self._centroid_of)
        clique = self.cliques[target]
        clique._add(rec)
        self.grid.put(clique.id, clique.centroid())
        if clique.size > self.cfg.clique_max:
            primary, offspring = self.split_clique(clique)
            return self.nodes[node_id].clique
        return clique.id

    def remove_node(self, node_id: int, now: Optional[float] = None) -> None:
        """Take a node out of the substrate (departure or crash bookkeeping)."""
        rec = self.nodes[node_id]
        if rec.clique is None:
            rec.alive = False
            return
        clique = self.cliques[rec.clique]
        clique._remove(rec)
        rec.alive = False
        rec.clique = None
        was_stable = rec.is_stable
        rec.is_stable = False
        if node_id in clique.stable_nodes:
            clique.stable_nodes.remove(node_id)
        self.grid.put(clique.id, clique.centroid())
        when = self.now if now is None else now
        if was_stable and clique.members:
            self.elect_stable_nodes(clique, when)
        if clique.size < self.cfg.clique_min and len(self.cliques) > 1:
            self.merge_clique(clique)
        self.tables_dirty = True

    # -- split / merge ----------------------------------------------------------

    def split_clique(self, clique: Clique) -> tuple[Clique, Clique]:
        """Split an overfull clique; both halves extend the parent id by one bit.

        The half whose centroid is nearer the pre-split centroid is the
        primary and appends bit 0; the offspring appends bit 1. A split
        notification fires so the streaming layer can repair its trees.
        """
        if clique.size <= self.cfg.clique_max:
            raise ValueError("split requires more members than clique_max")
        if clique.id.depth >= self.cfg.id_length:
            raise ValueError("cannot split: id space exhausted at this depth")
        pts = [(nid, rec.position) for nid, rec in clique.members.items()]
        half_a, half_b = median_split(pts)
        old_centroid = clique.centroid()

        def centroid_of(half):
            n = len(half)
            return Position(sum(p.x for _, p in half) / n,
                            sum(p.y for _, p in half) / n)

        ca, cb = centroid_of(half_a), centroid_of(half_b)
        da, db = distance(ca, old_centroid), distance(cb, old_centroid)
        a_primary = (da, ca.x, ca.y) <= (db, cb.x, cb.y)
        primary_half, offspring_half = (half_a, half_b) if a_primary else (half_b, half_a)

        primary = Clique(clique.id.child(0))
        offspring = Clique(clique.id.child(1))
        old_id = clique.id
        old_stables = list(clique.stable_nodes)
        self._unregister(clique)
        for half, child in ((primary_half, primary), (offspring_half, offspring)):
            for nid, _ in half:
                child._add(clique.members[nid])
            child.stable_nodes = [s for s in old_stables if s in child.members]
            self._register(child)
        for child in (primary, offspring):
            self.elect_stable_nodes(child, self.now)
        self.tables_dirty = True
        for fn in self.split_listeners:
            fn(old_id, primary, offspring)
        return primary, offspring

    def merge_clique(self, clique: Clique) -> Clique:
        """Fold an underfull clique together with the rest of its parent region.

        All live cliques under the parent prefix collapse into the merging
        clique, which takes the parent prefix as its id (for a plain sibling
        merge this keeps the merging clique's numeric id and drops the
        successor's, as required). Oversized results re-split immediately.
        """
        if len(self.cliques) <= 1:
            raise ValueError("merge needs a successor clique; lone clique persists")
        parent = clique.id.parent()
        absorbed = [c for cid, c in sorted(self.cliques.items(),
                                           key=lambda kv: kv[0].lo)
                    if parent.is_prefix_of(cid) and c is not clique]
        old_id = clique.id
        self._unregister(clique)
        absorbed_info: list[tuple[CliqueId, list[int]]] = []
        for other in absorbed:
            self._unregister(other)
            moved = list(other.members.values())
            absorbed_info.append((other.id, [rec.node_id for rec in moved]))
            for rec in moved:
                other._remove(rec)
                clique._add(rec)
            clique.stable_nodes.extend(
                s for s in other.stable_nodes if s not in clique.stable_nodes)
        clique.id = parent
        for rec in clique.members.values():
            rec.clique = parent
        self._register(clique)
        self.tables_dirty = True
        for fn in self.merge_listeners:
            fn(clique, old_id, absorbed_info)
        survivor = clique
        while survivor.size > self.cfg.clique_max:
            survivor, _ = self.split_clique(survivor)
        return survivor

    # -- stable node election ----------------------------------------------------

    def elect_stable_nodes(self, clique: Clique, current_time: float) -> list[int]:
        """Elect the top-t eligible members by uplink bandwidth (ties by id)."""
        eligible = [rec for rec in clique.members.values()
                    if rec.eligible(current_time, self.cfg.stable_age)]
        eligible.sort(key=lambda r: (-r.uplink_bandwidth, r.node_id))
        chosen = [r.node_id for r in eligible[:self.cfg.t]]
        before = set(clique.stable_nodes)
        after = set(chosen)
        for nid in before - after:
            self.nodes[nid].is_stable = False
        for nid in after - before:
            self.nodes[nid].is_stable = True
        clique.stable_nodes = chosen
        if before != after:
            self.tables_dirty = True
            for fn in self.stable_listeners:
                fn(clique, sorted(after - before), sorted(before - after))
        return chosen

    # -- routing tables ------------------------------------------------------------

    def rebuild_tables(self) -> None:
        """Recompute every clique's prefix routing table from the live tiling."""
        b = self.cfg.b
        for clique in self.cliques.values():
            table: dict[tuple[int, int], RouteEntry] = {}
            d = clique.id.depth
            rows = math.ceil(d / b)
            origin = clique.centroid()
            for row in range(rows):
                w = min(b, d - row * b)
                own = clique.id.prefix_bits(row * b + w) & ((1 << w) - 1)
                region_depth = min(row * b + b, ID_LENGTH)
                vb = region_depth - row * b
                for v in range(1 << b):
                    if (v >> (b - w)) == own:
                        continue
                    rv = v >> (b - vb)
                    region = CliqueId(
                        (clique.id.prefix_bits(row * b) << vb) | rv, region_depth)
                    target = self._nearest_in_region(region, origin)
                    if target is not None:
                        table[(row, v)] = RouteEntry(target=target)
            clique.routing_table = table
        self.tables_dirty = False

    def _nearest_in_region(self, region: CliqueId, origin: Position
                           ) -> Optional[CliqueId]:
        idx = bisect_right(self._segment_los, region.lo) - 1
        best = None
        while idx < len(self._segment_ids):
            cid = self._segment_ids[idx]
            if cid.lo >= region.hi:
                break
            cand = (distance(origin, self.cliques[cid].centroid()), cid.lo, cid)
            if best is None or cand[:2] < best[:2]:
                best = cand
            idx += 1
        return best[2] if best else None

    def refresh_routing_entry(self, clique: Clique, row: int,
                              entry: RouteEntry) -> RouteEntry:
        """Repopulate an entry with <= k live addresses, one stable when possible."""
        target = self.cliques.get(entry.target)
        if target is None or not target.members:
            raise UnreachableDestination(f"routing target {entry.target} vanished")
        addrs: list[int] = []
        if target.stable_nodes:
            addrs.append(target.stable_nodes[0])
        pool = sorted(nid for nid in target.members if nid not in addrs)
        want = self.cfg.k - len(addrs)
        if want >= len(pool):
            addrs.extend(pool)
        elif want > 0:
            addrs.extend(sorted(self.rng.sample(pool, want)))
        entry.addresses = addrs
        return entry

    def _entry_stale(self, entry: RouteEntry) -> bool:
        if not entry.addresses:
            return True
        target = self.cliques.get(entry.target)
        if target is None:
            return True
        for nid in entry.addresses:
            rec = self.nodes.get(nid)
            if rec is None or not rec.alive or rec.clique != entry.target:
                return True
        if target.stable_nodes:
            first = self.nodes[entry.addresses[0]]
            if not first.is_stable:
                return True
        return False

    def _lookup_entry(self, clique: Clique, point: int) -> RouteEntry:
        b = self.cfg.b
        m = clique.id.shared_bits(point)
        row = m // b
        width = min(b, ID_LENGTH - row * b)
        v = (point >> (ID_LENGTH - row * b - width)) & ((1 << width) - 1)
        v <<= (b - width)
        entry = clique.routing_table.get((row, v))
        if entry is None:
            raise UnreachableDestination(
                f"no routing entry at row {row} digit {v} in clique {clique.id}")
        if self._entry_stale(entry):
            self.refresh_routing_entry(clique, row, entry)
        return entry

    def next_hop(self, from_node: int, dest: CliqueId) -> tuple[int, CliqueId]:
        """One prefix-routing step: the next node toward dest and its clique.

        The stable address in the matching entry is preferred; otherwise a
        random listed node is chosen.
        """
        if self.tables_dirty:
            self.rebuild_tables()
        clique = self.clique_of(from_node)
        if clique.id == dest:
            raise ValueError("already at destination clique")
        entry = self._lookup_entry(clique, dest.lo)
        first = self.nodes[entry.addresses[0]]
        if first.is_stable:
            nxt = first.node_id
        else:
            nxt = self.rng.choice(entry.addresses)
        return nxt, entry.target

    # -- full routing ---------------------------------------------------------------

    def route(self, origin: int, dest_clique: CliqueId,
              dest_node: Optional[int] = None) -> Path:
        """Trace a full prefix route; hop lengths are euclidean link lengths.

        dest_node None means the all-zero wildcard: deliver to any stable node
        of the destination clique.
        """
        rec = self.nodes.get(origin)
        if rec is None or not rec.alive:
            raise ValueError("origin must be a live node")
        if dest_clique not in self.cliques:
            raise MalformedDestination(f"no live clique with id {dest_clique}")
        if dest_node is not None:
            drec = self.nodes.get(dest_node)
            if drec is None or drec.clique != dest_clique:
                raise MalformedDestination(
                    f"node {dest_node} is not a member of {dest_clique}")
            if not drec.alive:
                raise UnreachableDestination(f"destination node {dest_node} is dead")
        if self.tables_dirty:
            self.rebuild_tables()

        cur = rec
        clique = self.cliques[cur.clique]
        hops = [PathHop(cur.node_id, clique.id, 0.0)]

        def step_to(nid: int, cid: CliqueId):
            nonlocal cur
            nxt = self.nodes[nid]
            hops.append(PathHop(nid, cid, distance(cur.position, nxt.position)))
            cur = nxt

        def forward_to_stable():
            # A non-stable receiving node hands the message to a stable one.
            if not cur.is_stable and clique.stable_nodes:
                holder = clique.stable_nodes[0]
                if holder != cur.node_id:
                    step_to(holder, clique.id)

        if clique.id != dest_clique:
            forward_to_stable()
        guard = self.cfg.max_route_hops + 8
        while clique.id != dest_clique:
            if len(hops) > 3 * guard:
                raise UnreachableDestination("routing failed to converge")
            entry = self._lookup_entry(clique, dest_clique.lo)
            first = self.nodes[entry.addresses[0]]
            if first.is_stable:
                nxt = first.node_id
            else:
                nxt = self.rng.choice(entry.addresses)
            step_to(nxt, entry.target)
            clique = self.cliques[entry.target]
            if clique.id != dest_clique:
                forward_to_stable()
        if dest_node is None:
            forward_to_stable()
        elif cur.node_id != dest_node:
            step_to(dest_node, clique.id)
        return Path(hops)

    # -- invariol helpers --------------------------------------------------------

    def tiles_id_space(self) -> bool:
        if not self._segment_los:
            return False
        if self._segment_los[0] != 0:
            return False
        prev_hi = 0
        for cid in self._segment_ids:
            if cid.lo != prev_hi:
                return False
            prev_hi = cid.hi
        return prev_hi == (1 << ID_LENGTH)

    def mean_adjacent_distance(self) -> float:
        """Mean centroid distance between ring-successor cliques."""
        order = self.ring_order()
        if len(order) < 2:
            return 0.0
        total = 0.0
        for a, b in zip(order, order[1:] + order[:1]):
            total += distance(a.centroid(), b.centroid())
        return total / len(order)


def bootstrap(cfg: SubstrateConfig, placements: list[Position],
              bandwidths: Optional[list[float]] = None,
              plane_side: Optional[float] = None,
              rng: Optional[random.Random] = None,
              mature: bool = True) -> Substrate:
    """Build a substrate by joining every placement sequentially.

    With mature=True (the default) nodes are backdated by the eligibility
    age so the substrate starts with full stable sets at time zero; the
    first node is immediately stable either way.
    """
    cfg.validate()
    if not placements:
        raise ValueError("bootstrap needs at least one placement")
    if bandwidths is not None and len(bandwidths) != len(placements):
        raise ValueError("bandwidths must match placements")
    if plane_side is None:
        plane_side = max(max(p.x for p in placements),
                         max(p.y for p in placements), 1.0)
    sub = Substrate(cfg, plane_side, rng=rng)
    join_time = -cfg.stable_age if mature else 0.0
    for i, pos in enumerate(placements):
        bw = bandwidths[i] if bandwidths is not None else 1.0
        sub.join_node(pos, join_time, uplink_bandwidth=bw)
    if mature:
        for clique in list(sub.cliques.values()):
            sub.elect_stable_nodes(clique, 0.0)
    return sub
