from collections import deque

import pytest

from fedlay import protocol
from fedlay.analysis import (
    StaticOverlay,
    brute_force_closest,
    repair_oracle,
    route_repair_static,
    sweep_discovery,
)
from fedlay.graphs import fedlay_graph, ground_truth_adjacency, topology_correctness
from fedlay.protocol import (
    ACTIVE,
    Direction,
    Kind,
    Message,
    NodeState,
    decode_message,
    encode_message,
    evict_failed,
    handle_message,
    heartbeat_tick,
    initiate_join,
    initiate_leave,
    make_node,
    nodes_from_graph,
    periodic_self_repair,
    stored_tables,
)
from fedlay.rings import derive_coords

FIVE_RING = {1: (0.1,), 2: (0.3,), 3: (0.5,), 4: (0.7,), 5: (0.9,)}


def pump(nodes: dict[int, NodeState], outbox, now: int = 0) -> int:
    """Synchronous FIFO delivery until the network goes quiet."""
    queue = deque(outbox)
    delivered = 0
    while queue:
        dest, msg = queue.popleft()
        node = nodes.get(dest)
        if node is None:
            continue
        queue.extend(handle_message(node, msg, now))
        delivered += 1
        assert delivered < 100_000, "message storm"
    return delivered


def correctness_of(nodes) -> float:
    live = {u: n for u, n in nodes.items() if n.status in ("joining", "active")}
    coords = {u: n.coords for u, n in live.items()}
    return topology_correctness(stored_tables(nodes), coords)


class TestStaticDiscovery:
    def view(self, coords=FIVE_RING):
        return StaticOverlay.from_graph(ground_truth_adjacency(coords))

    def test_terminates_at_global_closest(self):
        view = self.view()
        res = sweep_discovery(view, 0, 0.62)
        assert res.monotone_violations == 0
        assert set(res.terminals.values()) == {4}  # coord 0.7, CD 0.08

    def test_start_far_side_routes_around(self):
        view = self.view()
        res = sweep_discovery(view, 0, 0.62)
        assert res.terminals[1] == 4
        assert res.hops[1] >= 1

    def test_target_on_own_coordinate(self):
        view = self.view()
        res = sweep_discovery(view, 0, 0.5)
        assert set(res.terminals.values()) == {3}
        assert res.hops[3] == 0

    def test_two_node_network_single_hop(self):
        view = self.view({7: (0.2,), 9: (0.8,)})
        for target in (0.0, 0.21, 0.5, 0.79):
            res = sweep_discovery(view, 0, target)
            assert all(h <= 1 for h in res.hops.values())

    def test_oracle_equivalence_small_grid(self):
        import random

        rng = random.Random(99)
        for n in (4, 9, 16, 33):
            for num_spaces in (1, 3):
                g = fedlay_graph(n, num_spaces, seed=n)
                view = StaticOverlay.from_graph(g)
                for _ in range(10):
                    space = rng.randrange(num_spaces)
                    target = rng.random()
                    res = sweep_discovery(view, space, target)
                    want = brute_force_closest(view, space, target)
                    assert res.monotone_violations == 0
                    assert set(res.terminals.values()) == {want}


class TestStaticRepair:
    def test_detector_below_routes_ccw_to_far_adjacent(self):
        view = StaticOverlay.from_graph(ground_truth_adjacency(FIVE_RING))
        term, hops, bad = route_repair_static(view, 0, detector=2, failed=3,
                                              direction=Direction.CCW)
        assert bad == 0
        assert term == 4  # the failed node's other prior adjacent (0.7)

    def test_detector_above_routes_cw_mirror(self):
        view = StaticOverlay.from_graph(ground_truth_adjacency(FIVE_RING))
        term, hops, bad = route_repair_static(view, 0, detector=4, failed=3,
                                              direction=Direction.CW)
        assert bad == 0
        assert term == 2

    def test_three_node_ring_single_hop(self):
        view = StaticOverlay.from_graph(
            ground_truth_adjacency({1: (0.1,), 2: (0.5,), 3: (0.8,)}))
        term, hops, bad = route_repair_static(view, 0, detector=1, failed=2,
                                              direction=Direction.CCW)
        assert term == 3 and hops <= 1 and bad == 0

    def test_matches_ring_order_oracle(self):
        for seed in range(5):
            g = fedlay_graph(20, 2, seed=seed)
            view = StaticOverlay.from_graph(g)
            for space in range(2):
                order = view.ring_order(space)
                failed = order[len(order) // 2]
                pred, succ = repair_oracle(view, space, failed)
                term_ccw, _, bad1 = route_repair_static(
                    view, space, pred, failed, Direction.CCW)
                term_cw, _, bad2 = route_repair_static(
                    view, space, succ, failed, Direction.CW)
                assert (term_ccw, term_cw) == (succ, pred)
                assert bad1 == bad2 == 0


class TestJoin:
    def test_join_completes_and_closes(self):
        g = fedlay_graph(6, 2, seed=3)
        nodes = nodes_from_graph(g, heartbeat_period=1000)
        new_id = max(nodes) + 7
        joiner = make_node(new_id, derive_coords(new_id, 2), 1000)
        nodes[new_id] = joiner
        bootstrap = sorted(nodes)[0]
        out = initiate_join(joiner, bootstrap)
        assert len(out) == 2  # one discovery per space
        assert all(m.kind == Kind.NEIGHBOR_DISCOVERY for _, m in out)
        pump(nodes, out)
        assert joiner.status == ACTIVE
        assert correctness_of(nodes) == 1.0

    def test_join_into_two_node_network(self):
        base = {1: derive_coords(1, 2), 2: derive_coords(2, 2)}
        g = ground_truth_adjacency(base)
        nodes = nodes_from_graph(g, 1000)
        joiner = make_node(3, derive_coords(3, 2), 1000)
        nodes[3] = joiner
        pump(nodes, initiate_join(joiner, 1))
        assert joiner.status == ACTIVE
        assert 2 <= len(joiner.neighbors) <= 4
        assert correctness_of(nodes) == 1.0

    def test_sequence_of_joins_stays_correct(self):
        base = {1: derive_coords(1, 3), 2: derive_coords(2, 3)}
        nodes = nodes_from_graph(ground_truth_adjacency(base), 1000)
        for new_id in range(3, 20):
            joiner = make_node(new_id, derive_coords(new_id, 3), 1000)
            nodes[new_id] = joiner
            pump(nodes, initiate_join(joiner, 1 + new_id % (new_id - 1)))
            assert correctness_of(nodes) == 1.0, f"broken after join {new_id}"

    def test_self_bootstrap_rejected(self):
        joiner = make_node(5, derive_coords(5, 2), 1000)
        with pytest.raises(ValueError):
            initiate_join(joiner, 5)


class TestLeave:
    def test_leave_closes_network(self):
        g = fedlay_graph(8, 2, seed=1)
        nodes = nodes_from_graph(g, 1000)
        leaver = sorted(nodes)[3]
        pump(nodes, initiate_leave(nodes[leaver]))
        assert nodes[leaver].status == "left"
        assert correctness_of(nodes) == 1.0

    def test_two_node_leave_leaves_empty_survivor(self):
        base = {1: derive_coords(1, 2), 2: derive_coords(2, 2)}
        nodes = nodes_from_graph(ground_truth_adjacency(base), 1000)
        pump(nodes, initiate_leave(nodes[1]))
        assert nodes[2].neighbors == {}

    def test_bilateral_adjacent_applies_notices_idempotently(self):
        # With three nodes every pair is adjacent in every space, so the
        # survivor pair receives one notice per space about each other.
        base = {u: derive_coords(u, 2) for u in (1, 2, 3)}
        nodes = nodes_from_graph(ground_truth_adjacency(base), 1000)
        pump(nodes, initiate_leave(nodes[2]))
        assert set(nodes[1].neighbors) == {3}
        assert nodes[1].neighbors[3].spaces == {0, 1}
        assert correctness_of(nodes) == 1.0


class TestFailureRepair:
    def test_single_failure_closes(self):
        nodes = nodes_from_graph(ground_truth_adjacency(FIVE_RING), 1000)
        nodes[3].status = "failed"
        out = []
        out += evict_failed(nodes[2], 3)
        out += evict_failed(nodes[4], 3)
        pump(nodes, out)
        assert correctness_of(nodes) == 1.0
        assert 4 in nodes[2].neighbors and 2 in nodes[4].neighbors

    def test_repair_edge_created_once_idempotent(self):
        # Detection time is past 3T, so every node's local evidence agrees
        # that node 3 is gone by the time repairs arrive.
        nodes = nodes_from_graph(ground_truth_adjacency(FIVE_RING), 1000)
        nodes[3].status = "failed"
        pump(nodes, evict_failed(nodes[2], 3), now=3500)
        snap2 = {u: e.spaces.copy() for u, e in nodes[2].neighbors.items()}
        assert 4 in snap2  # edge already spliced by the first repair
        pump(nodes, evict_failed(nodes[4], 3), now=3500)
        assert {u: e.spaces for u, e in nodes[2].neighbors.items()} == snap2

    def test_multi_space_failure_closes(self):
        for seed in range(4):
            g = fedlay_graph(12, 3, seed=seed)
            nodes = nodes_from_graph(g, 1000)
            victim = sorted(nodes)[5]
            nodes[victim].status = "failed"
            out = []
            for u in sorted(nodes):
                if u != victim and nodes[u].status == ACTIVE:
                    out += evict_failed(nodes[u], victim)
            pump(nodes, out)
            assert correctness_of(nodes) == 1.0


class TestSelfRepair:
    def test_noop_on_correct_network(self):
        g = fedlay_graph(10, 2, seed=6)
        nodes = nodes_from_graph(g, 1000)
        before = {u: stored_tables(nodes)[u] for u in nodes}
        out = []
        for u in sorted(nodes):
            out += periodic_self_repair(nodes[u])
        pump(nodes, out)
        assert stored_tables(nodes) == before
        assert correctness_of(nodes) == 1.0

    def test_fixes_interleaved_join_conflict(self):
        # Two nodes joined between the same pair and were both told the old
        # adjacency, so each believes the pair rather than each other.
        coords = {1: (0.40,), 2: (0.45,), 3: (0.50,), 4: (0.55,)}
        truth = ground_truth_adjacency(coords)
        nodes = nodes_from_graph(truth, 1000)
        # Overwrite with the conflicted beliefs: 3 thinks (1, 4); 2 is fine
        # on the 1 side; 1 missed 3's splice; 4 missed 2's splice.
        for u in nodes.values():
            u.neighbors.clear()

        def believe(u, *peers):
            for p in peers:
                nodes[u].neighbors[p] = protocol.NeighborEntry(
                    id=p, coords=coords[p], spaces={0}, last_heartbeat=0)

        believe(1, 2, 4)
        believe(2, 1, 4)
        believe(3, 1, 4)
        believe(4, 3, 1)
        for round_no in range(2):
            out = []
            for u in sorted(nodes):
                out += periodic_self_repair(nodes[u])
            pump(nodes, out)
        assert correctness_of(nodes) == 1.0


class TestHeartbeat:
    def build(self):
        g = fedlay_graph(8, 2, seed=2)
        return nodes_from_graph(g, heartbeat_period=100)

    def test_silent_neighbor_detected_after_3t(self):
        nodes = self.build()
        u = sorted(nodes)[0]
        victim = sorted(nodes[u].neighbors)[0]
        shared_spaces = len(nodes[u].neighbors[victim].spaces)
        for nid, entry in nodes[u].neighbors.items():
            entry.last_heartbeat = 0 if nid == victim else 300
        out = heartbeat_tick(nodes[u], now=301)  # victim silent for 3T + 1
        assert victim not in nodes[u].neighbors
        repairs = [m for _, m in out if m.kind == Kind.NEIGHBOR_REPAIR]
        assert len(repairs) >= shared_spaces
        assert all(m.partner_id == victim for m in repairs)

    def test_no_detection_before_3t(self):
        nodes = self.build()
        u = sorted(nodes)[0]
        out = heartbeat_tick(nodes[u], now=290)  # silence is only 2.9T
        assert all(m.kind == Kind.HEARTBEAT for _, m in out)
        assert len(out) == len(nodes[u].neighbors)

    def test_heartbeat_refreshes_entry(self):
        nodes = self.build()
        u = sorted(nodes)[0]
        v = sorted(nodes[u].neighbors)[0]
        for entry in nodes[u].neighbors.values():
            entry.last_heartbeat = 100
        hb = Message(kind=Kind.HEARTBEAT, origin_id=v,
                     origin_coords=nodes[v].coords)
        handle_message(nodes[u], hb, now=350)
        assert nodes[u].neighbors[v].last_heartbeat == 350
        # v is fresh at t=400 while the others are exactly at the 3T edge.
        out = heartbeat_tick(nodes[u], now=400)
        assert all(m.kind == Kind.HEARTBEAT for _, m in out)
        assert v in nodes[u].neighbors

    def test_double_failure_independent_repairs(self):
        nodes = self.build()
        u = sorted(nodes)[0]
        victims = sorted(nodes[u].neighbors)[:2]
        for v in victims:
            nodes[u].neighbors[v].last_heartbeat = -1000
        out = heartbeat_tick(nodes[u], now=0)
        repairs = [m for _, m in out if m.kind == Kind.NEIGHBOR_REPAIR]
        assert {m.partner_id for m in repairs} == set(victims)


class TestMessageHygiene:
    def test_hop_limit_drops(self):
        nodes = nodes_from_graph(ground_truth_adjacency(FIVE_RING), 1000)
        msg = Message(kind=Kind.NEIGHBOR_DISCOVERY, space=0, target=0.62,
                      origin_id=99, origin_coords=(0.62,),
                      hop_count=protocol.HOP_LIMIT)
        assert handle_message(nodes[1], msg, now=0) == []

    def test_left_node_ignores_messages(self):
        nodes = nodes_from_graph(ground_truth_adjacency(FIVE_RING), 1000)
        initiate_leave(nodes[3])
        msg = Message(kind=Kind.HEARTBEAT, origin_id=1, origin_coords=(0.1,))
        assert handle_message(nodes[3], msg, now=0) == []

    def test_wire_round_trip(self):
        samples = [
            Message(kind=Kind.NEIGHBOR_DISCOVERY, space=2, target=0.625,
                    origin_id=7, origin_coords=(0.1, 0.2, 0.3), hop_count=5),
            Message(kind=Kind.NEIGHBOR_REPAIR, space=0, target=0.5,
                    origin_id=2**63, origin_coords=(0.9,),
                    direction=Direction.CCW, partner_id=11,
                    partner_coords=(0.25,)),
            Message(kind=Kind.HEARTBEAT, origin_id=1, origin_coords=(0.5, 0.5)),
        ]
        blob = b"".join(encode_message(m) for m in samples)
        offset = 0
        for m in samples:
            decoded, offset = decode_message(blob, offset)
            assert decoded == m
        assert offset == len(blob)
