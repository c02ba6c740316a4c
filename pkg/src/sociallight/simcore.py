"""Deterministic point-queue traffic simulator.

Vehicles traverse a link at its speed limit, join the FIFO queue of the lane
serving their next turn, and leave the queue when their movement is green, the
intersection is not in yellow, and the downstream link has room. Time advances
in 1 s micro-steps; a control step of ``delta_t`` seconds is a run of
micro-steps under a fixed joint action.

Waiting time is tracked lazily: a queued vehicle stores the micro-step at
which it joined, so no per-vehicle work happens while it waits.
"""
from __future__ import annotations

import copy
import hashlib
import math
from collections import deque
from dataclasses import dataclass, fields
from typing import Optional, Sequence

from .flows import FlowSpec, Router
from .netmodel import (
    TrafficNetwork,
    TurnKind,
    lane_for_kind,
    link_lane,
    turn_kind,
    SIDES,
)

DRIVING, QUEUED, FINISHED = "driving", "queued", "finished"
_POS_EPS = 1e-9


@dataclass(frozen=True)
class SimParams:
    yellow_s: int = 2
    saturation_flow: int = 1  # vehicles per lane per green second

    def __post_init__(self):
        if self.yellow_s < 0:
            raise ValueError("yellow_s must be >= 0")
        if self.saturation_flow < 1:
            raise ValueError("saturation_flow must be >= 1")


class VehicleState:
    __slots__ = (
        "id", "route", "lanes", "route_index", "link_position", "mode",
        "entry_time", "exit_time", "delay_done", "join_step", "visits",
    )

    def __init__(self, vid: int, route: tuple, lanes: tuple, entry_time: int):
        self.id = vid
        self.route = route
        self.lanes = lanes
        self.route_index = 0
        self.link_position = 0.0
        self.mode = DRIVING
        self.entry_time = entry_time
        self.exit_time: Optional[int] = None
        self.delay_done = 0  # queued seconds at intersections already left
        self.join_step = -1
        self.visits = 0

    @property
    def link(self) -> int:
        return self.route[self.route_index]

    def queue_wait(self, clock: int) -> int:
        """Seconds waited at the current stop line."""
        return clock - self.join_step if self.mode == QUEUED else 0

    def total_delay(self, clock: int) -> int:
        return self.delay_done + self.queue_wait(clock)

    def as_tuple(self) -> tuple:
        return tuple(getattr(self, s) for s in self.__slots__)


@dataclass
class TrafficMetrics:
    """Table-2 traffic metrics over some window; trip time is None when nobody exited."""

    avg_queue_length: float = 0.0
    avg_speed: float = 0.0
    avg_intersection_delay: float = 0.0
    avg_cumulative_delay: float = 0.0
    avg_trip_time: Optional[float] = None
    vehicles_entered: int = 0
    vehicles_exited: int = 0

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


StepMetrics = TrafficMetrics
EpisodeMetrics = TrafficMetrics


class _Counters:
    __slots__ = (
        "micro_steps", "queue_sum", "speed_sum", "veh_seconds",
        "visit_wait_sum", "visits_done", "entered", "exited", "trip_sum", "exit_delay_sum",
    )

    def __init__(self):
        for s in self.__slots__:
            setattr(self, s, 0)

    def snapshot(self) -> tuple:
        return tuple(getattr(self, s) for s in self.__slots__)


class _Topology:
    """Lookup tables compiled once per network."""

    def __init__(self, net: TrafficNetwork):
        self.net = net
        self.router = Router(net)
        n_links = len(net.links)
        self.length = [l.length for l in net.links]
        self.speed = [l.speed_limit for l in net.links]
        self.capacity = [l.capacity for l in net.links]
        self.source_link = {}
        for l in net.links:
            if net.is_terminal(l.from_node):
                self.source_link[l.from_node] = l.id
        self.in_lanes = [spec.incoming_lanes for spec in net.intersections]
        self.all_in_lanes = [lane for spec in net.intersections for lane in spec.incoming_lanes]
        # phase_active[i][p]: set of (in_lane, out_link) allowed to discharge
        self.phase_active = [
            [frozenset((m.in_lane, m.out_link) for m in p.movements) for p in spec.phase_table]
            for spec in net.intersections
        ]
        self.num_links = n_links
        self._route_cache: dict = {}
        side_of_link_at = {}
        for spec in net.intersections:
            for k, side in enumerate(SIDES):
                side_of_link_at[(spec.incoming_links[k], spec.id, "in")] = side
                side_of_link_at[(spec.outgoing_links[k], spec.id, "out")] = side
        self._side = side_of_link_at

    def route_and_lanes(self, origin: int, destination: int) -> tuple[tuple, tuple]:
        key = (origin, destination)
        hit = self._route_cache.get(key)
        if hit is None:
            route = self.router.route(origin, destination)
            lanes = []
            links = self.net.links
            for k, lid in enumerate(route):
                link = links[lid]
                if k + 1 < len(route):
                    node = link.to_node
                    kind = turn_kind(self._side[(lid, node, "in")], self._side[(route[k + 1], node, "out")])
                else:
                    kind = TurnKind.STRAIGHT
                lanes.append(link_lane(lid, lane_for_kind(link.lanes, kind)))
            hit = (route, tuple(lanes))
            self._route_cache[key] = hit
        return hit


_TOPOLOGY_CACHE: dict = {}


def compile_topology(net: TrafficNetwork) -> _Topology:
    key = net.fingerprint()
    topo = _TOPOLOGY_CACHE.get(key)
    if topo is None:
        topo = _TOPOLOGY_CACHE[key] = _Topology(net)
    return topo


class SimState:
    """Full simulator state. ``step`` mutates it in place."""

    def __init__(self, net: TrafficNetwork, flows: FlowSpec, seed: int, params: SimParams):
        self.net = net
        self.topo = compile_topology(net)
        self.flows = flows
        self.rng_seed = seed
        self.params = params
        self.clock = 0
        self.vehicles: dict[int, VehicleState] = {}
        n_lanes = len(net.links) * 3
        self.lane_queues: list[deque] = [deque() for _ in range(n_lanes)]
        self.driving: list[deque] = [deque() for _ in range(len(net.links))]
        self.link_count = [0] * len(net.links)
        self.agent_phase = [0] * net.num_intersections
        self.pending_phase = [0] * net.num_intersections
        self.yellow_remaining = [0] * net.num_intersections
        self.next_trip = 0
        self.backlog: dict[int, deque] = {}
        self.total_queued = 0
        self.counters = _Counters()

    # --- views -------------------------------------------------------------

    @property
    def in_network(self) -> int:
        return sum(self.link_count)

    @property
    def pending_departures(self) -> int:
        return len(self.flows.trips) - self.next_trip + sum(len(b) for b in self.backlog.values())

    def lane_queue_length(self, lane: int) -> int:
        if not 0 <= lane < len(self.lane_queues):
            raise KeyError(f"unknown lane {lane}")
        return len(self.lane_queues[lane])

    def head_wait(self, lane: int) -> int:
        q = self.lane_queues[lane]
        return self.clock - q[0].join_step if q else 0

    def copy(self) -> "SimState":
        topo = self.topo
        self.topo = None
        try:
            dup = copy.deepcopy(self)
        finally:
            self.topo = topo
        dup.topo = topo
        return dup

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(repr((self.clock, self.agent_phase, self.pending_phase, self.yellow_remaining,
                       self.next_trip, self.total_queued, self.counters.snapshot())).encode())
        for vid in sorted(self.vehicles):
            h.update(repr(self.vehicles[vid].as_tuple()).encode())
        h.update(repr([[v.id for v in q] for q in self.lane_queues]).encode())
        h.update(repr(sorted((k, [t.id for t in b]) for k, b in self.backlog.items())).encode())
        return h.hexdigest()

    # --- dynamics ------------------------------------------------------------

    def _admit(self, t: int) -> None:
        trips = self.flows.trips
        topo = self.topo
        while self.next_trip < len(trips) and trips[self.next_trip].depart_time <= t:
            trip = trips[self.next_trip]
            self.backlog.setdefault(topo.source_link[trip.origin], deque()).append(trip)
            self.next_trip += 1
        for lid in sorted(self.backlog):
            q = self.backlog[lid]
            cap = topo.capacity[lid]
            while q and self.link_count[lid] < cap:
                trip = q.popleft()
                route, lanes = topo.route_and_lanes(trip.origin, trip.destination)
                v = VehicleState(trip.id, route, lanes, t)
                self.vehicles[trip.id] = v
                self.driving[lid].append(v)
                self.link_count[lid] += 1
                self.counters.entered += 1

    def _advance(self, t: int) -> None:
        c = self.counters
        topo = self.topo
        speed_sum = 0.0
        for lid, dq in enumerate(self.driving):
            if not dq:
                continue
            length = topo.length[lid]
            stop = length - _POS_EPS
            sp = topo.speed[lid]
            for v in dq:
                new = v.link_position + sp
                if new >= stop:
                    new = length
                speed_sum += new - v.link_position
                v.link_position = new
            while dq and dq[0].link_position >= length:
                v = dq.popleft()
                if v.route_index + 1 == len(v.route):
                    v.mode = FINISHED
                    v.exit_time = t + 1
                    self.link_count[lid] -= 1
                    c.exited += 1
                    c.trip_sum += v.exit_time - v.entry_time
                    c.exit_delay_sum += v.delay_done
                else:
                    v.mode = QUEUED
                    v.join_step = t
                    v.visits += 1
                    self.lane_queues[v.lanes[v.route_index]].append(v)
                    self.total_queued += 1
        c.speed_sum += speed_sum

    def _discharge(self, t: int) -> None:
        topo = self.topo
        sat = self.params.saturation_flow
        c = self.counters
        queues = self.lane_queues
        link_count = self.link_count
        cap = topo.capacity
        for i in range(len(self.agent_phase)):
            if self.yellow_remaining[i] > 0:
                continue
            active = topo.phase_active[i][self.agent_phase[i]]
            for lane in topo.in_lanes[i]:
                q = queues[lane]
                moved = 0
                while q and moved < sat:
                    v = q[0]
                    nxt = v.route[v.route_index + 1]
                    if (lane, nxt) not in active or link_count[nxt] >= cap[nxt]:
                        break
                    q.popleft()
                    moved += 1
                    self.total_queued -= 1
                    wait = t - v.join_step
                    v.delay_done += wait
                    c.visit_wait_sum += wait
                    c.visits_done += 1
                    link_count[v.route[v.route_index]] -= 1
                    v.route_index += 1
                    v.link_position = 0.0
                    v.mode = DRIVING
                    v.join_step = -1
                    link_count[nxt] += 1
                    self.driving[nxt].append(v)

    def micro_step(self) -> None:
        t = self.clock
        c = self.counters
        self._admit(t)
        # vehicle-seconds: everything on a link during this micro-step
        c.veh_seconds += sum(map(len, self.driving)) + self.total_queued
        self._advance(t)
        self._discharge(t)
        c.queue_sum += self.total_queued
        c.micro_steps += 1
        for i, y in enumerate(self.yellow_remaining):
            if y > 0:
                y -= 1
                self.yellow_remaining[i] = y
                if y == 0:
                    self.agent_phase[i] = self.pending_phase[i]
        self.clock = t + 1

    def command(self, joint_action: Sequence[int]) -> None:
        n = len(self.agent_phase)
        if len(joint_action) != n:
            raise ValueError(f"joint action has {len(joint_action)} entries, network has {n} agents")
        n_phases = self.net.num_phases
        for i, a in enumerate(joint_action):
            a = int(a)
            if not 0 <= a < n_phases:
                raise ValueError(f"agent {i}: phase {a} out of range 0..{n_phases - 1}")
            target = self.pending_phase[i] if self.yellow_remaining[i] > 0 else self.agent_phase[i]
            if a == target:
                continue
            if self.params.yellow_s == 0:
                self.agent_phase[i] = a
                self.pending_phase[i] = a
            else:
                self.pending_phase[i] = a
                self.yellow_remaining[i] = self.params.yellow_s

    # --- metrics -------------------------------------------------------------

    def _ongoing(self) -> tuple[int, int]:
        n = 0
        wait = 0
        for q in self.lane_queues:
            for v in q:
                n += 1
                wait += self.clock - v.join_step
        return n, wait

    def episode_metrics(self) -> TrafficMetrics:
        return _metrics_between(self, _Counters().snapshot(), self.counters.snapshot(), include_ongoing=True)


_IDX = {s: k for k, s in enumerate(_Counters.__slots__)}


def _metrics_between(state: SimState, before: tuple, after: tuple, include_ongoing: bool) -> TrafficMetrics:
    d = [a - b for a, b in zip(after, before)]
    g = lambda name: d[_IDX[name]]  # noqa: E731
    n_lanes = len(state.topo.all_in_lanes)
    steps = g("micro_steps")
    avg_queue = g("queue_sum") / (steps * n_lanes) if steps and n_lanes else 0.0
    vs = g("veh_seconds")
    avg_speed = g("speed_sum") / vs if vs else 0.0
    visit_sum, visit_n = g("visit_wait_sum"), g("visits_done")
    cum_sum = g("visit_wait_sum")
    entered = g("entered")
    if include_ongoing:
        on_n, on_wait = state._ongoing()
        visit_sum += on_wait
        visit_n += on_n
        cum_sum += on_wait
        cum_n = entered
    else:
        # window form: delays of vehicles that left the network in the window
        cum_sum, cum_n = g("exit_delay_sum"), g("exited")
    exited = g("exited")
    return TrafficMetrics(
        avg_queue_length=avg_queue,
        avg_speed=avg_speed,
        avg_intersection_delay=visit_sum / visit_n if visit_n else 0.0,
        avg_cumulative_delay=cum_sum / cum_n if cum_n else 0.0,
        avg_trip_time=g("trip_sum") / exited if exited else None,
        vehicles_entered=entered,
        vehicles_exited=exited,
    )


# --- functional API --------------------------------------------------------------


def reset(net: TrafficNetwork, flows: FlowSpec, seed: int, params: Optional[SimParams] = None) -> SimState:
    """Fresh state at clock 0: empty network, every agent on phase 0, no yellow.

    Dynamics are deterministic; ``seed`` is carried in the state for provenance.
    """
    terminals = set(net.terminals)
    for trip in flows.trips:
        for node in (trip.origin, trip.destination):
            if node not in terminals:
                raise ValueError(f"trip {trip.id} references unknown boundary node {node}")
    return SimState(net, flows, seed, params or SimParams())


def step(state: SimState, joint_action: Sequence[int], delta_t: int = 5) -> tuple[SimState, TrafficMetrics]:
    """Advance ``delta_t`` one-second micro-steps under ``joint_action``."""
    if not (isinstance(delta_t, int) and delta_t > 0):
        raise ValueError(f"delta_t must be a positive integer number of seconds, got {delta_t!r}")
    state.command(joint_action)
    before = state.counters.snapshot()
    for _ in range(delta_t):
        state.micro_step()
    return state, _metrics_between(state, before, state.counters.snapshot(), include_ongoing=False)


def lane_queue_length(state: SimState, lane: int) -> int:
    return state.lane_queue_length(lane)


def pressure_of(state: SimState, net: TrafficNetwork, i: int) -> list[float]:
    """Per phase: sum over its movements of (in-lane queue - out-lane queue)."""
    q = state.lane_queues
    return [
        float(sum(len(q[m.in_lane]) - len(q[m.out_lane]) for m in p.movements))
        for p in net.intersections[i].phase_table
    ]


def episode_metrics(state: SimState) -> TrafficMetrics:
    return state.episode_metrics()


def free_flow_time(state: SimState, route: Sequence[int]) -> int:
    """Micro-steps an unobstructed vehicle spends on ``route``."""
    return sum(math.ceil(state.topo.length[l] / state.topo.speed[l] - _POS_EPS) for l in route)
