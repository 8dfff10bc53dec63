"""Static routing analysis over frozen overlay snapshots.

Drives the same per-hop decision functions the live protocol handlers use,
but against an immutable graph, which makes exhaustive verification cheap:
for one (space, target) pair every node's greedy decision is computed once
and shared by all start nodes.
"""

from __future__ import annotations

from dataclasses import dataclass

from .graphs import OverlayGraph
from .protocol import Direction, discovery_step, repair_step
from .rings import circular_distance

_TERMINAL = -1


@dataclass
class StaticOverlay:
    ids: list[int]
    space_coords: list[dict[int, float]]  # per space: id -> coordinate
    candidates: list[dict[int, list[tuple[float, int]]]]  # per space: id -> [(coord, id)]

    @classmethod
    def from_graph(cls, g: OverlayGraph) -> "StaticOverlay":
        if g.node_coords is None:
            raise ValueError("static analysis needs node coordinates")
        num_spaces = len(next(iter(g.node_coords.values())))
        adj = g.adjacency_sets()
        ids = sorted(g.node_ids)
        space_coords = []
        candidates = []
        for i in range(num_spaces):
            coords_i = {u: g.node_coords[u][i] for u in ids}
            cand_i = {
                u: [(coords_i[v], v) for v in sorted(adj[u])] for u in ids
            }
            space_coords.append(coords_i)
            candidates.append(cand_i)
        return cls(ids=ids, space_coords=space_coords, candidates=candidates)

    def ring_order(self, space: int) -> list[int]:
        xs = self.space_coords[space]
        return sorted(self.ids, key=lambda u: (xs[u], u))


@dataclass
class SweepResult:
    terminals: dict[int, int]  # start id -> terminal id
    hops: dict[int, int]  # start id -> forwarding hops
    monotone_violations: int


def brute_force_closest(view: StaticOverlay, space: int, target: float) -> int:
    xs = view.space_coords[space]
    return min(view.ids, key=lambda u: (circular_distance(xs[u], target), u))


def sweep_discovery(view: StaticOverlay, space: int, target: float) -> SweepResult:
    """Greedy discovery from every node to one target coordinate.

    Next hops are memoized per node, so the cost is one decision per node
    even though every node is used as a start. Per-hop strict decrease of
    circular distance to the target is checked on every memoized edge.
    """
    xs = view.space_coords[space]
    cands = view.candidates[space]
    nxt: dict[int, int] = {}
    violations = 0
    for u in view.ids:
        terminate, best_id, _ = discovery_step(xs[u], cands[u], target)
        if terminate:
            nxt[u] = _TERMINAL
        else:
            nxt[u] = best_id
            if circular_distance(xs[best_id], target) >= circular_distance(xs[u], target):
                violations += 1
    terminals: dict[int, int] = {}
    hops: dict[int, int] = {}
    for u in view.ids:
        path = []
        cur = u
        while cur not in terminals and nxt[cur] != _TERMINAL:
            path.append(cur)
            cur = nxt[cur]
            if len(path) > len(view.ids):  # unreachable unless monotonicity broke
                violations += 1
                break
        base_term = terminals.get(cur, cur)
        base_hops = hops.get(cur, 0)
        for k, v in enumerate(reversed(path), start=1):
            terminals[v] = base_term
            hops[v] = base_hops + k
        terminals.setdefault(u, base_term)
        hops.setdefault(u, base_hops)
    return SweepResult(terminals=terminals, hops=hops, monotone_violations=violations)


def route_repair_static(
    view: StaticOverlay,
    space: int,
    detector: int,
    failed: int,
    direction: Direction,
    check_monotone: bool = True,
) -> tuple[int, int, int]:
    """Directional repair from a detector around one failed node.

    The detector has already dropped the failed entry; other nodes still
    hold it, as they would mid-protocol. Returns (terminal id, hops,
    monotone violations of the directional arc).
    """
    xs = view.space_coords[space]
    target = xs[failed]

    def arc(u: int) -> float:
        if direction == Direction.CCW:
            return (xs[u] - target) % 1.0
        return (target - xs[u]) % 1.0

    cands = [c for c in view.candidates[space][detector] if c[1] != failed]
    _, best_id, _ = repair_step(xs[detector], cands, target, direction)
    violations = 0
    if best_id < 0:
        return detector, 0, violations
    prev_arc = arc(detector)
    cur = best_id
    hops = 1
    while True:
        if check_monotone and arc(cur) >= prev_arc:
            violations += 1
        prev_arc = arc(cur)
        cands = [c for c in view.candidates[space][cur] if c[1] != detector]
        terminate, best_id, _ = repair_step(xs[cur], cands, target, direction)
        if terminate:
            return cur, hops, violations
        cur = best_id
        hops += 1
        if hops > 2 * len(view.ids):
            raise RuntimeError("repair routing failed to terminate")


def repair_oracle(
    view: StaticOverlay, space: int, failed: int
) -> tuple[int, int]:
    """(predecessor, successor) of the failed node in ring order."""
    order = view.ring_order(space)
    k = order.index(failed)
    return order[k - 1], order[(k + 1) % len(order)]
