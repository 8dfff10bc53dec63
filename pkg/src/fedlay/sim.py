"""Deterministic discrete-event simulation of a node population.

Integer-millisecond clock, (time, seq)-ordered event heap, seeded latency
sampling: identical seeds and inputs replay bit-identically. Failed nodes
silently stop processing; messages addressed to them are dropped on
delivery.
"""

from __future__ import annotations

import hashlib
import heapq
import math
from collections import Counter
from dataclasses import dataclass
from random import Random

from . import protocol
from .graphs import ground_truth_adjacency, topology_correctness
from .protocol import (
    ACTIVE,
    FAILED,
    JOINING,
    LEFT,
    Kind,
    Message,
    NodeState,
    handle_message,
    heartbeat_tick,
    initiate_join,
    initiate_leave,
    make_node,
    nodes_from_graph,
    periodic_self_repair,
    stored_tables,
)
from .rings import derive_coords

NDMP_KINDS = tuple(k.name.lower() for k in Kind)


@dataclass(frozen=True)
class LatencyModel:
    """Per-message delivery delay, sampled in integer milliseconds >= 1."""

    distribution: str = "fixed"
    a: float = 10.0
    b: float = 0.0

    @classmethod
    def fixed(cls, delay_ms: float) -> "LatencyModel":
        return cls("fixed", delay_ms)

    @classmethod
    def uniform(cls, lo_ms: float, hi_ms: float) -> "LatencyModel":
        if lo_ms > hi_ms:
            raise ValueError("uniform latency needs lo <= hi")
        return cls("uniform", lo_ms, hi_ms)

    @classmethod
    def lognormal(cls, mean_ms: float, sigma: float = 0.3) -> "LatencyModel":
        # Parametrized by the distribution mean, not the underlying mu.
        if mean_ms <= 0:
            raise ValueError("latency mean must be positive")
        return cls("lognormal", mean_ms, sigma)

    def sample(self, rng: Random) -> int:
        if self.distribution == "fixed":
            value = self.a
        elif self.distribution == "uniform":
            value = rng.uniform(self.a, self.b)
        elif self.distribution == "lognormal":
            mu = math.log(self.a) - self.b**2 / 2.0
            value = rng.lognormvariate(mu, self.b)
        else:
            raise ValueError(f"unknown latency distribution {self.distribution!r}")
        return max(1, round(value))


class ScenarioError(ValueError):
    """Bad churn script or population setup, detected before t=0."""


Churn = list[tuple[int, tuple]]


def validate_churn(churn: Churn, initial_ids: set[int]) -> None:
    present = set(initial_ids)
    for at, action in sorted(churn, key=lambda e: e[0]):
        op = action[0]
        if op == "join":
            _, nid, bootstrap = action
            if nid in present:
                raise ScenarioError(f"join id {nid} already exists at t={at}")
            if bootstrap not in present:
                raise ScenarioError(f"join bootstrap {bootstrap} unknown at t={at}")
            present.add(nid)
        elif op in ("fail", "leave"):
            nid = action[1]
            if nid not in present:
                raise ScenarioError(f"{op} of unknown id {nid} at t={at}")
            present.discard(nid)
        else:
            raise ScenarioError(f"unknown churn action {op!r}")


class Simulator:
    """Event loop over a population of protocol state machines."""

    def __init__(
        self,
        num_spaces: int,
        heartbeat_period: int = 1000,
        repair_period: int | None = None,
        latency: LatencyModel | None = None,
        seed: int = 0,
        maintenance: bool = True,
        self_repair: bool = True,
        trace: bool = False,
    ):
        self.num_spaces = num_spaces
        self.heartbeat_period = heartbeat_period
        self.repair_period = repair_period if repair_period is not None else 2 * heartbeat_period
        self.latency = latency or LatencyModel.fixed(10)
        self.rng = Random(seed)
        self.maintenance = maintenance
        self.self_repair = self_repair
        self.now = 0
        self.nodes: dict[int, NodeState] = {}
        self.counters: Counter = Counter()
        self._heap: list = []
        self._seq = 0
        self._trace = hashlib.sha256() if trace else None
        self.trace_lines: list[str] | None = [] if trace else None

    # -- population -------------------------------------------------------

    def install_overlay(self, ids: list[int]) -> None:
        """Start from a pre-built correct overlay over the given ids."""
        coords = {u: derive_coords(u, self.num_spaces) for u in ids}
        g = ground_truth_adjacency(coords)
        self.nodes = nodes_from_graph(g, self.heartbeat_period, now=self.now)
        for u in sorted(self.nodes):
            self._start_timers(u)

    def seed_pair(self, id_a: int, id_b: int) -> None:
        """Start from the minimal two-node network, mutually adjacent."""
        self.install_overlay([id_a, id_b])

    def _start_timers(self, nid: int) -> None:
        if not self.maintenance:
            return
        self.schedule(self.rng.randrange(1, self.heartbeat_period + 1), ("hb", nid))
        if self.self_repair:
            self.schedule(self.rng.randrange(1, self.repair_period + 1), ("repair", nid))

    # -- event machinery ---------------------------------------------------

    def schedule(self, delay: int, payload: tuple) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (self.now + delay, self._seq, payload))

    def schedule_at(self, at: int, payload: tuple) -> None:
        if at < self.now:
            raise ScenarioError(f"cannot schedule at t={at}, now is {self.now}")
        self._seq += 1
        heapq.heappush(self._heap, (at, self._seq, payload))

    def schedule_churn(self, churn: Churn) -> None:
        validate_churn(churn, set(self.nodes))
        for at, action in churn:
            self.schedule_at(at, action)

    def send(self, src: int, dest: int, msg: Message) -> None:
        self.counters[msg.kind.name.lower()] += 1
        self.counters["sent"] += 1
        self.schedule(self.latency.sample(self.rng), ("deliver", src, dest, msg))

    def send_all(self, src: int, outbox: protocol.Outbox) -> None:
        for dest, msg in outbox:
            self.send(src, dest, msg)

    def log(self, nid: int, ev: str, detail: str = "") -> None:
        if self._trace is None:
            return
        line = f"t={self.now} node={nid} ev={ev}{detail}"
        self._trace.update(line.encode())
        self._trace.update(b"\n")
        if self.trace_lines is not None:
            self.trace_lines.append(line)

    def trace_digest(self) -> str:
        if self._trace is None:
            raise ValueError("simulator was created without trace=True")
        return self._trace.hexdigest()

    # -- event handlers ----------------------------------------------------

    def _ev_deliver(self, src: int, dest: int, msg: Message) -> None:
        node = self.nodes.get(dest)
        if node is None or node.status in (LEFT, FAILED):
            self.counters["dropped"] += 1
            # The reliable transport reports the dead connection back to
            # the sender after another latency sample (connect timeout).
            if src in self.nodes:
                self.schedule(self.latency.sample(self.rng),
                              ("bounce", src, dest, msg))
            return
        self.counters["delivered"] += 1
        self.log(dest, "deliver", f" kind={msg.kind.name.lower()} space={msg.space}"
                                  f" origin={msg.origin_id} hops={msg.hop_count}")
        self.send_all(dest, handle_message(node, msg, self.now))

    def _ev_bounce(self, src: int, dead: int, msg: Message) -> None:
        # Crash-stop model: an unreachable peer is gone for good. The sender
        # drops it, repairs around it, and re-routes greedily routed traffic
        # (discovery and repair) through its next-best candidate.
        node = self.nodes.get(src)
        if node is None or node.status in (LEFT, FAILED):
            return
        self.counters["bounced"] += 1
        self.send_all(src, protocol.evict_failed(node, dead))
        if msg.kind in (Kind.NEIGHBOR_DISCOVERY, Kind.NEIGHBOR_REPAIR):
            self.send_all(src, handle_message(node, msg, self.now))

    def _ev_hb(self, nid: int) -> None:
        node = self.nodes.get(nid)
        if node is None or node.status in (LEFT, FAILED):
            return
        self.send_all(nid, heartbeat_tick(node, self.now))
        self.schedule(self.heartbeat_period, ("hb", nid))

    def _ev_repair(self, nid: int) -> None:
        node = self.nodes.get(nid)
        if node is None or node.status in (LEFT, FAILED):
            return
        if node.neighbors:
            self.send_all(nid, periodic_self_repair(node))
        self.schedule(self.repair_period, ("repair", nid))

    def _ev_join(self, nid: int, bootstrap: int) -> None:
        if nid in self.nodes:
            self.counters["join_id_conflict"] += 1
            self.log(nid, "join_rejected")
            return
        node = make_node(nid, derive_coords(nid, self.num_spaces),
                         self.heartbeat_period)
        boot = self.nodes.get(bootstrap)
        if boot is None or boot.status in (LEFT, FAILED):
            self.counters["join_aborted"] += 1
            self.log(nid, "join_aborted")
            return
        self.nodes[nid] = node
        self.log(nid, "join", f" bootstrap={bootstrap}")
        self.send_all(nid, initiate_join(node, bootstrap))
        self._start_timers(nid)

    def _ev_fail(self, nid: int) -> None:
        node = self.nodes[nid]
        node.status = FAILED
        node.neighbors.clear()
        self.log(nid, "fail")

    def _ev_leave(self, nid: int) -> None:
        node = self.nodes[nid]
        if node.status != ACTIVE:
            node.status = LEFT  # degenerate: leave before join finished
            self.log(nid, "leave_incomplete")
            return
        self.send_all(nid, initiate_leave(node))
        self.log(nid, "leave")

    # -- running -----------------------------------------------------------

    def _dispatch(self, payload: tuple) -> None:
        op = payload[0]
        if op == "deliver":
            self._ev_deliver(payload[1], payload[2], payload[3])
        elif op == "bounce":
            self._ev_bounce(payload[1], payload[2], payload[3])
        elif op == "hb":
            self._ev_hb(payload[1])
        elif op == "repair":
            self._ev_repair(payload[1])
        elif op == "join":
            self._ev_join(payload[1], payload[2])
        elif op == "fail":
            self._ev_fail(payload[1])
        elif op == "leave":
            self._ev_leave(payload[1])
        else:
            self._dispatch_extra(payload)

    def _dispatch_extra(self, payload: tuple) -> None:
        raise ValueError(f"unknown event {payload[0]!r}")

    def run(self, until: int) -> None:
        """Process all events with time <= until; the clock ends at until."""
        while self._heap and self._heap[0][0] <= until:
            t, _, payload = heapq.heappop(self._heap)
            self.now = t
            self._dispatch(payload)
        self.now = until

    def run_until_idle(self, max_events: int = 10_000_000) -> None:
        """Drain the event queue completely (only safe without timers)."""
        if self.maintenance:
            raise ValueError("run_until_idle would never finish with timers on")
        n = 0
        while self._heap:
            t, _, payload = heapq.heappop(self._heap)
            self.now = t
            self._dispatch(payload)
            n += 1
            if n > max_events:
                raise RuntimeError("event storm: network is not quiescing")

    # -- measurement -------------------------------------------------------

    def live_nodes(self) -> dict[int, NodeState]:
        return {u: n for u, n in self.nodes.items()
                if n.status in (JOINING, ACTIVE)}

    def correctness(self) -> float:
        live = self.live_nodes()
        if len(live) < 2:
            return 1.0
        coords = {u: n.coords for u, n in live.items()}
        return topology_correctness(stored_tables(self.nodes), coords)

    def ndmp_message_count(self) -> int:
        return sum(self.counters[k] for k in NDMP_KINDS)


def simulate_churn(
    n: int,
    num_spaces: int,
    churn: Churn,
    until: int,
    seed: int = 0,
    heartbeat_period: int = 1000,
    repair_period: int | None = None,
    latency: LatencyModel | None = None,
    probe_every: int = 250,
    trace: bool = False,
) -> tuple[list[dict], dict, Simulator]:
    """Run a churn scenario over a pre-built correct overlay.

    Returns probe rows (t_ms, correctness, msgs_total, msgs_per_client),
    a summary dict, and the simulator for inspection.
    """
    sim = Simulator(
        num_spaces=num_spaces, heartbeat_period=heartbeat_period,
        repair_period=repair_period,
        latency=latency or LatencyModel.lognormal(350.0, 0.3),
        seed=seed, trace=trace,
    )
    base = (seed + 1) * 10_000_000
    sim.install_overlay([base + i for i in range(n)])
    sim.schedule_churn(churn)
    rows: list[dict] = []
    churn_end = max((at for at, _ in churn), default=0)
    for t in range(0, until + 1, probe_every):
        sim.run(t)
        live = len(sim.live_nodes())
        total = sim.ndmp_message_count()
        rows.append({
            "t_ms": t,
            "correctness": sim.correctness(),
            "msgs_total": total,
            "msgs_per_client": total / live if live else 0.0,
        })
    recovered = [r["t_ms"] for r in rows
                 if r["t_ms"] >= churn_end and r["correctness"] == 1.0]
    dipped = min((r["correctness"] for r in rows), default=1.0)
    summary = {
        "final_correctness": rows[-1]["correctness"] if rows else 1.0,
        "min_correctness": dipped,
        "recovery_time_ms": (recovered[0] - churn_end) if recovered else None,
        "counters": dict(sim.counters),
    }
    return rows, summary, sim


def bootstrap_sequential(
    n: int,
    num_spaces: int,
    seed: int = 0,
    heartbeat_period: int = 1000,
    latency: LatencyModel | None = None,
    trace: bool = False,
) -> tuple[Simulator, dict]:
    """Grow a correct overlay one join at a time through random bootstraps.

    Construction runs with maintenance timers off: every join fully
    completes (the network quiesces) before the next starts, so the message
    counters measure construction cost alone.
    """
    if n < 2:
        raise ScenarioError("sequential bootstrap needs n >= 2")
    sim = Simulator(
        num_spaces=num_spaces, heartbeat_period=heartbeat_period,
        latency=latency or LatencyModel.fixed(10), seed=seed,
        maintenance=False, trace=trace,
    )
    base = (seed + 1) * 10_000_000
    ids = [base + i for i in range(n)]
    sim.seed_pair(ids[0], ids[1])
    for nid in ids[2:]:
        bootstrap = sim.rng.choice(sorted(sim.live_nodes()))
        sim.schedule(1, ("join", nid, bootstrap))
        sim.run_until_idle()
    total = sim.ndmp_message_count()
    stats = {
        "n": n,
        "num_spaces": num_spaces,
        "seed": seed,
        "msgs_total": total,
        "msgs_per_client": total / n,
        "final_correctness": sim.correctness(),
        "counters": dict(sim.counters),
    }
    return sim, stats
