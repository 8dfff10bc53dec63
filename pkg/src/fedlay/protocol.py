"""Neighbor discovery and maintenance: join, leave, failure repair.

Each node runs the same handlers over its private state; all coordination
happens through messages. Greedy discovery routes toward a target coordinate
by circular distance; directional repair routes around a failed node by
one-sided arc length. Handlers are deterministic functions of
(state, message, now) and return the messages to send.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum

from .rings import ccw_arc_length, circular_distance, cw_arc_length

HOP_LIMIT = 64

JOINING = "joining"
ACTIVE = "active"
LEFT = "left"
FAILED = "failed"


class Kind(IntEnum):
    NEIGHBOR_DISCOVERY = 1
    DISCOVERY_RESULT = 2
    NEIGHBOR_REPAIR = 3
    REPAIR_RESULT = 4
    LEAVE_NOTICE = 5
    HEARTBEAT = 6
    JOIN_SPLICE = 7
    UNLINK = 8


class Direction(IntEnum):
    NONE = 0
    CW = 1
    CCW = 2


@dataclass(slots=True)
class Message:
    kind: Kind
    space: int = 0
    target: float = 0.0
    origin_id: int = 0
    origin_coords: tuple[float, ...] = ()
    direction: Direction = Direction.NONE
    hop_count: int = 0
    partner_id: int | None = None
    partner_coords: tuple[float, ...] = ()


@dataclass(slots=True)
class NeighborEntry:
    id: int
    coords: tuple[float, ...]
    spaces: set[int]
    last_heartbeat: int
    confidence: float = 0.0
    model_fingerprint: int | None = None


@dataclass
class NodeState:
    id: int
    coords: tuple[float, ...]
    heartbeat_period: int
    status: str = JOINING
    neighbors: dict[int, NeighborEntry] = field(default_factory=dict)
    pending_spaces: set[int] = field(default_factory=set)

    @property
    def num_spaces(self) -> int:
        return len(self.coords)


Outbox = list[tuple[int, Message]]


# ---------------------------------------------------------------------------
# Pure routing steps, shared by the live handlers and the static analyzers.


def discovery_step(
    x_at: float, candidates, target: float
) -> tuple[bool, int, float]:
    """One greedy-discovery decision.

    candidates is an iterable of (coord, id) pairs. Returns
    (terminate, best_id, best_distance): forward to best_id unless the
    current node is at least as close to the target as every candidate.
    """
    best_d = 2.0
    best_id = -1
    for coord, nid in candidates:
        d = coord - target if coord > target else target - coord
        if d > 0.5:
            d = 1.0 - d
        if d < best_d or (d == best_d and nid < best_id):
            best_d = d
            best_id = nid
    return circular_distance(x_at, target) <= best_d, best_id, best_d


def repair_step(
    x_at: float, candidates, target: float, direction: Direction
) -> tuple[bool, int, float]:
    """One directional-repair decision.

    A counterclockwise repair only considers candidates that lie beyond the
    target on the clockwise side (so every hop keeps counterclockwise order)
    and greedily minimizes the counterclockwise arc to the target; clockwise
    is the mirror image. Returns (terminate, best_id, best_arc); terminate
    when no candidate is strictly closer in directional arc, or when the
    candidate subset is empty (the current node is the extremal one).
    """
    if direction == Direction.CCW:
        gate = cw_arc_length(x_at, target)
        my_arc = ccw_arc_length(x_at, target)
    else:
        gate = ccw_arc_length(x_at, target)
        my_arc = cw_arc_length(x_at, target)
    best_arc = 2.0
    best_id = -1
    for coord, nid in candidates:
        if direction == Direction.CCW:
            if (coord - x_at) % 1.0 <= gate:
                continue
            arc = (coord - target) % 1.0
        else:
            if (x_at - coord) % 1.0 <= gate:
                continue
            arc = (target - coord) % 1.0
        if arc < best_arc or (arc == best_arc and nid < best_id):
            best_arc = arc
            best_id = nid
    return my_arc <= best_arc, best_id, best_arc


# ---------------------------------------------------------------------------
# Local neighbor-table maintenance.


def make_node(node_id: int, coords: tuple[float, ...], heartbeat_period: int,
              status: str = JOINING) -> NodeState:
    return NodeState(id=node_id, coords=coords, heartbeat_period=heartbeat_period,
                     status=status)


def space_candidates(node: NodeState, space: int) -> list[NeighborEntry]:
    return [e for e in node.neighbors.values() if space in e.spaces]


def space_sides(
    node: NodeState, space: int
) -> tuple[NeighborEntry | None, NeighborEntry | None]:
    """(clockwise adjacent, counterclockwise adjacent) beliefs for a space."""
    succ = pred = None
    succ_key = pred_key = (2.0, -1)
    x = node.coords[space]
    for e in space_candidates(node, space):
        xe = e.coords[space]
        ck = (cw_arc_length(x, xe), e.id)
        if ck < succ_key:
            succ_key, succ = ck, e
        ak = (ccw_arc_length(x, xe), e.id)
        if ak < pred_key:
            pred_key, pred = ak, e
    return succ, pred


def _resolve_space(node: NodeState, space: int) -> list[int]:
    # Keep only the nearest believed adjacent per side; entries that lose
    # their last space are dropped entirely. Returns the displaced ids.
    succ, pred = space_sides(node, space)
    keep = {e.id for e in (succ, pred) if e is not None}
    displaced = []
    for e in list(node.neighbors.values()):
        if space in e.spaces and e.id not in keep:
            e.spaces.discard(space)
            displaced.append(e.id)
            if not e.spaces:
                del node.neighbors[e.id]
    return displaced


def install_adjacent(
    node: NodeState, peer_id: int, peer_coords: tuple[float, ...],
    space: int, now: int,
) -> bool:
    """Adopt peer as a believed adjacent in one space, evicting whichever
    existing claim it supersedes. A peer farther than current beliefs on
    both sides is rejected immediately; returns whether the peer was kept.
    """
    if peer_id == node.id:
        return False
    entry = node.neighbors.get(peer_id)
    if entry is None:
        entry = NeighborEntry(id=peer_id, coords=peer_coords, spaces=set(),
                              last_heartbeat=now)
        node.neighbors[peer_id] = entry
    entry.coords = peer_coords
    entry.spaces.add(space)
    _resolve_space(node, space)
    kept = node.neighbors.get(peer_id)
    return kept is not None and space in kept.spaces


def remove_space(node: NodeState, peer_id: int, space: int) -> None:
    entry = node.neighbors.get(peer_id)
    if entry is None:
        return
    entry.spaces.discard(space)
    if not entry.spaces:
        del node.neighbors[peer_id]


def neighbor_refs(node: NodeState, space: int, exclude: int = -1):
    return [
        (e.coords[space], e.id)
        for e in node.neighbors.values()
        if e.id != exclude
    ]


# ---------------------------------------------------------------------------
# Join.


def initiate_join(joiner: NodeState, bootstrap_id: int) -> Outbox:
    """Hand one discovery per ring space to the bootstrap node for routing."""
    if joiner.status != JOINING:
        raise ValueError(f"node {joiner.id} is {joiner.status}, not joining")
    if bootstrap_id == joiner.id:
        raise ValueError("a node cannot bootstrap through itself")
    joiner.pending_spaces = set(range(joiner.num_spaces))
    out: Outbox = []
    for i in range(joiner.num_spaces):
        out.append((bootstrap_id, Message(
            kind=Kind.NEIGHBOR_DISCOVERY, space=i, target=joiner.coords[i],
            origin_id=joiner.id, origin_coords=joiner.coords,
        )))
    return out


def _straddle_partner(
    node: NodeState, space: int, target: float
) -> NeighborEntry | None:
    """The adjacent node on whose side of us the target coordinate falls."""
    succ, pred = space_sides(node, space)
    if succ is None:
        return None
    x = node.coords[space]
    if pred is not succ:
        if cw_arc_length(x, target) < cw_arc_length(x, succ.coords[space]):
            return succ
        if ccw_arc_length(x, target) < ccw_arc_length(x, pred.coords[space]):
            return pred
    else:
        # Only one adjacent: it brackets us on both sides.
        return succ
    # Target coincides with us or an adjacent; fall back to the closer side.
    ds = circular_distance(succ.coords[space], target)
    dp = circular_distance(pred.coords[space], target)
    if ds < dp or (ds == dp and succ.id < pred.id):
        return succ
    return pred


def _handle_discovery(node: NodeState, msg: Message, now: int) -> Outbox:
    if msg.origin_id == node.id:
        return []
    candidates = neighbor_refs(node, msg.space, exclude=msg.origin_id)
    terminate, best_id, _ = discovery_step(
        node.coords[msg.space], candidates, msg.target
    )
    if not terminate:
        if msg.hop_count + 1 > HOP_LIMIT:
            return []
        msg.hop_count += 1
        return [(best_id, msg)]
    partner = _straddle_partner(node, msg.space, msg.target)
    reply = Message(
        kind=Kind.DISCOVERY_RESULT, space=msg.space, target=msg.target,
        origin_id=node.id, origin_coords=node.coords,
    )
    if partner is not None:
        reply.partner_id = partner.id
        reply.partner_coords = partner.coords
    return [(msg.origin_id, reply)]


def _handle_discovery_result(node: NodeState, msg: Message, now: int) -> Outbox:
    i = msg.space
    out: Outbox = []
    install_adjacent(node, msg.origin_id, msg.origin_coords, i, now)
    splice = dict(kind=Kind.JOIN_SPLICE, space=i, target=node.coords[i],
                  origin_id=node.id, origin_coords=node.coords)
    if msg.partner_id is not None:
        install_adjacent(node, msg.partner_id, msg.partner_coords, i, now)
        out.append((msg.origin_id, Message(
            **splice, partner_id=msg.partner_id, partner_coords=msg.partner_coords)))
        out.append((msg.partner_id, Message(
            **splice, partner_id=msg.origin_id, partner_coords=msg.origin_coords)))
    else:
        out.append((msg.origin_id, Message(**splice)))
    node.pending_spaces.discard(i)
    if node.status == JOINING and not node.pending_spaces:
        node.status = ACTIVE
    return out


def _handle_join_splice(node: NodeState, msg: Message, now: int) -> Outbox:
    # The joiner sits between us and the conveyed partner; adopting it
    # displaces the partner's claim on that side automatically. A joiner we
    # know to be wrong (someone closer already sits there) is told to drop
    # its reciprocal claim instead of holding it one-sided until timeout.
    kept = install_adjacent(node, msg.origin_id, msg.origin_coords, msg.space, now)
    if kept:
        return []
    return [(msg.origin_id, Message(kind=Kind.UNLINK, space=msg.space,
                                    origin_id=node.id,
                                    origin_coords=node.coords))]


# ---------------------------------------------------------------------------
# Leave.


def initiate_leave(node: NodeState) -> Outbox:
    """Tell both adjacents in every space to adopt each other, then depart."""
    if node.status != ACTIVE:
        raise ValueError(f"node {node.id} is {node.status}, cannot leave")
    out: Outbox = []
    for i in range(node.num_spaces):
        succ, pred = space_sides(node, i)
        if succ is None:
            continue
        pairs = [(succ, pred)] if succ is pred else [(succ, pred), (pred, succ)]
        for dest, conveyed in pairs:
            out.append((dest.id, Message(
                kind=Kind.LEAVE_NOTICE, space=i, target=node.coords[i],
                origin_id=node.id, origin_coords=node.coords,
                partner_id=conveyed.id, partner_coords=conveyed.coords,
            )))
    node.status = LEFT
    node.neighbors.clear()
    return out


def _handle_leave_notice(node: NodeState, msg: Message, now: int) -> Outbox:
    remove_space(node, msg.origin_id, msg.space)
    if msg.partner_id is not None and msg.partner_id != node.id:
        install_adjacent(node, msg.partner_id, msg.partner_coords,
                         msg.space, now)
    return []


# ---------------------------------------------------------------------------
# Failure detection and repair.


def initiate_repair(
    node: NodeState, space: int, target: float, direction: Direction,
    failed_id: int | None, failed_coords: tuple[float, ...],
) -> Outbox:
    # The initiator always flings the message at the best directional
    # candidate; the termination test is for the receiving nodes. With no
    # candidate on that side we are the extremal node and stay silent.
    candidates = neighbor_refs(node, space)
    _, best_id, _ = repair_step(
        node.coords[space], candidates, target, direction
    )
    if best_id < 0:
        return []
    return [(best_id, Message(
        kind=Kind.NEIGHBOR_REPAIR, space=space, target=target,
        origin_id=node.id, origin_coords=node.coords, direction=direction,
        partner_id=failed_id, partner_coords=failed_coords,
    ))]


def _eviction_plan(node: NodeState, failed_id: int):
    """Repair directions owed for a neighbor about to be dropped.

    The repair direction is away from the failed node: counterclockwise when
    it was our clockwise adjacent, clockwise when it was our counterclockwise
    adjacent, both when it bracketed us.
    """
    entry = node.neighbors[failed_id]
    plan = []
    for i in sorted(entry.spaces):
        succ, pred = space_sides(node, i)
        if succ is entry:
            plan.append((i, entry.coords[i], Direction.CCW, failed_id, entry.coords))
        if pred is entry:
            plan.append((i, entry.coords[i], Direction.CW, failed_id, entry.coords))
    return plan


def evict_failed(node: NodeState, failed_id: int) -> Outbox:
    """Drop a failed neighbor and start a repair on every ring it shared."""
    if failed_id not in node.neighbors:
        return []
    plan = _eviction_plan(node, failed_id)
    del node.neighbors[failed_id]
    out: Outbox = []
    for i, target, direction, fid, fcoords in plan:
        out.extend(initiate_repair(node, i, target, direction, fid, fcoords))
    return out


def _expired(node: NodeState, peer_id: int | None, now: int) -> bool:
    # The 3T silence rule, applied to our own entry for the peer. A repair
    # naming a "failed" node is only believed when our local evidence
    # already agrees; fresh entries (the peer is demonstrably alive) are
    # never torn down by remote claims.
    if peer_id is None:
        return False
    entry = node.neighbors.get(peer_id)
    return entry is not None and now - entry.last_heartbeat > 3 * node.heartbeat_period


def _handle_repair(node: NodeState, msg: Message, now: int) -> Outbox:
    out: Outbox = []
    if _expired(node, msg.partner_id, now):
        out.extend(evict_failed(node, msg.partner_id))
    candidates = neighbor_refs(node, msg.space, exclude=msg.origin_id)
    terminate, best_id, _ = repair_step(
        node.coords[msg.space], candidates, msg.target, msg.direction
    )
    if not terminate:
        if msg.hop_count + 1 > HOP_LIMIT:
            return out
        msg.hop_count += 1
        out.append((best_id, msg))
        return out
    if msg.origin_id == node.id:
        return out
    # The mutual add is conditional: only confirm the adjacency to the
    # origin when we actually kept it after arc resolution.
    if install_adjacent(node, msg.origin_id, msg.origin_coords, msg.space, now):
        out.append((msg.origin_id, Message(
            kind=Kind.REPAIR_RESULT, space=msg.space, target=msg.target,
            origin_id=node.id, origin_coords=node.coords,
            partner_id=msg.partner_id, partner_coords=msg.partner_coords,
        )))
    return out


def _handle_repair_result(node: NodeState, msg: Message, now: int) -> Outbox:
    out: Outbox = []
    if _expired(node, msg.partner_id, now):
        out.extend(evict_failed(node, msg.partner_id))
    kept = install_adjacent(node, msg.origin_id, msg.origin_coords, msg.space, now)
    if not kept:
        # The sender added us when it terminated; it installed before this
        # reply was generated, so the retraction cannot race the install.
        out.append((msg.origin_id, Message(
            kind=Kind.UNLINK, space=msg.space,
            origin_id=node.id, origin_coords=node.coords)))
    return out


def heartbeat_tick(node: NodeState, now: int) -> Outbox:
    """Detect silent neighbors, repair around them, heartbeat the rest."""
    t = node.heartbeat_period
    expired = [nid for nid, e in node.neighbors.items()
               if now - e.last_heartbeat > 3 * t]
    # Plan repairs against the fully cleaned table so no repair is flung
    # at a neighbor we are about to declare dead ourselves.
    plans = []
    for nid in sorted(expired):
        plans.extend(_eviction_plan(node, nid))
        del node.neighbors[nid]
    out: Outbox = []
    for space, target, direction, failed_id, failed_coords in plans:
        out.extend(initiate_repair(node, space, target, direction,
                                   failed_id, failed_coords))
    hb = Message(kind=Kind.HEARTBEAT, origin_id=node.id,
                 origin_coords=node.coords)
    for nid in sorted(node.neighbors):
        out.append((nid, hb))
    return out


def _handle_unlink(node: NodeState, msg: Message, now: int) -> Outbox:
    remove_space(node, msg.origin_id, msg.space)
    return []


def _handle_heartbeat(node: NodeState, msg: Message, now: int) -> Outbox:
    entry = node.neighbors.get(msg.origin_id)
    if entry is not None and now > entry.last_heartbeat:
        entry.last_heartbeat = now
    return []


def periodic_self_repair(node: NodeState) -> Outbox:
    """Probe both ring directions in every space for the true adjacents.

    On a correct network each probe stops at an existing adjacent and
    changes nothing; after concurrent churn the probes discover the nodes
    that should be adjacent and splice them in.
    """
    out: Outbox = []
    for i in range(node.num_spaces):
        for direction in (Direction.CW, Direction.CCW):
            out.extend(initiate_repair(node, i, node.coords[i], direction,
                                       None, ()))
    return out


def nodes_from_graph(g, heartbeat_period: int, now: int = 0) -> dict[int, NodeState]:
    """Materialize per-node states whose tables match a ground-truth graph."""
    if g.node_coords is None or g.edge_spaces is None:
        raise ValueError("population setup needs coordinates and edge provenance")
    nodes = {
        u: NodeState(id=u, coords=g.node_coords[u],
                     heartbeat_period=heartbeat_period, status=ACTIVE)
        for u in g.node_ids
    }
    for (u, v), spaces in g.edge_spaces.items():
        nodes[u].neighbors[v] = NeighborEntry(
            id=v, coords=g.node_coords[v], spaces=set(spaces), last_heartbeat=now)
        nodes[v].neighbors[u] = NeighborEntry(
            id=u, coords=g.node_coords[u], spaces=set(spaces), last_heartbeat=now)
    return nodes


def stored_tables(nodes: dict[int, NodeState]) -> dict[int, set[int]]:
    """Neighbor-id sets of every node that is still part of the network."""
    return {
        u: set(n.neighbors)
        for u, n in nodes.items()
        if n.status in (JOINING, ACTIVE)
    }


_HANDLERS = {
    Kind.NEIGHBOR_DISCOVERY: _handle_discovery,
    Kind.DISCOVERY_RESULT: _handle_discovery_result,
    Kind.JOIN_SPLICE: _handle_join_splice,
    Kind.LEAVE_NOTICE: _handle_leave_notice,
    Kind.UNLINK: _handle_unlink,
    Kind.NEIGHBOR_REPAIR: _handle_repair,
    Kind.REPAIR_RESULT: _handle_repair_result,
    Kind.HEARTBEAT: _handle_heartbeat,
}


def handle_message(node: NodeState, msg: Message, now: int) -> Outbox:
    if node.status in (LEFT, FAILED):
        return []
    return _HANDLERS[msg.kind](node, msg, now)


# ---------------------------------------------------------------------------
# Wire format: length-prefixed binary records, one per message. Mirrors the
# in-memory message exactly so trace logs and sockets share one encoding.


def encode_message(msg: Message) -> bytes:
    num = len(msg.origin_coords)
    body = struct.pack(">BHdQH", int(msg.kind), msg.space, msg.target,
                       msg.origin_id, num)
    body += struct.pack(f">{num}d", *msg.origin_coords)
    body += struct.pack(">BH", int(msg.direction), msg.hop_count)
    if msg.partner_id is None:
        body += struct.pack(">B", 0)
    else:
        pnum = len(msg.partner_coords)
        body += struct.pack(f">BQH{pnum}d", 1, msg.partner_id, pnum,
                            *msg.partner_coords)
    return struct.pack(">I", len(body)) + body


def decode_message(buf: bytes, offset: int = 0) -> tuple[Message, int]:
    (length,) = struct.unpack_from(">I", buf, offset)
    pos = offset + 4
    end = pos + length
    kind, space, target, origin_id, num = struct.unpack_from(">BHdQH", buf, pos)
    pos += struct.calcsize(">BHdQH")
    origin_coords = struct.unpack_from(f">{num}d", buf, pos)
    pos += 8 * num
    direction, hop_count = struct.unpack_from(">BH", buf, pos)
    pos += 3
    (has_partner,) = struct.unpack_from(">B", buf, pos)
    pos += 1
    partner_id = None
    partner_coords: tuple[float, ...] = ()
    if has_partner:
        partner_id, pnum = struct.unpack_from(">QH", buf, pos)
        pos += 10
        partner_coords = struct.unpack_from(f">{pnum}d", buf, pos)
        pos += 8 * pnum
    if pos != end:
        raise ValueError("corrupt message record")
    return Message(
        kind=Kind(kind), space=space, target=target, origin_id=origin_id,
        origin_coords=origin_coords, direction=Direction(direction),
        hop_count=hop_count, partner_id=partner_id,
        partner_coords=partner_coords,
    ), end
