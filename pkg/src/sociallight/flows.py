"""Synthetic origin-destination flows, free-flow routing and flow-file I/O."""
from __future__ import annotations

import heapq
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .netmodel import TrafficNetwork

# Costs are compared after rounding so that equal-length paths whose float sums
# differ only in the last ulp still tie.
_COST_DIGITS = 9


@dataclass(frozen=True)
class TripRecord:
    id: int
    origin: int
    destination: int
    depart_time: float


@dataclass(frozen=True)
class FlowSpec:
    trips: tuple[TripRecord, ...]
    horizon: float

    def __post_init__(self):
        times = [t.depart_time for t in self.trips]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValueError("trips must be sorted by depart_time")
        if times and (times[0] < 0 or times[-1] > self.horizon):
            raise ValueError("depart times must lie in [0, horizon]")
        for t in self.trips:
            if t.origin == t.destination:
                raise ValueError(f"trip {t.id}: origin equals destination")

    def __len__(self) -> int:
        return len(self.trips)


class FlowFileError(ValueError):
    """Malformed flow file. ``line`` and ``field`` locate the problem when known."""

    def __init__(self, message: str, line: Optional[int] = None, field: Optional[str] = None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


def generate_flows(
    net: TrafficNetwork,
    arrival_rate,
    horizon: float,
    seed: int,
) -> FlowSpec:
    """Poisson departures with uniformly drawn distinct boundary O-D pairs.

    ``arrival_rate`` is either a constant rate (vehicles/second) or a
    piecewise-constant schedule ``[(start_s, rate), ...]`` with the first
    start at 0.
    """
    schedule = _as_schedule(arrival_rate)
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    terminals = list(net.terminals)
    if len(terminals) < 2:
        raise ValueError("network needs at least 2 boundary nodes to generate flows")
    rng = np.random.default_rng(seed)
    times: list[float] = []
    for k, (start, rate) in enumerate(schedule):
        end = schedule[k + 1][0] if k + 1 < len(schedule) else horizon
        end = min(end, horizon)
        if rate <= 0 or end <= start:
            continue
        t = start
        while True:
            t += rng.exponential(1.0 / rate)
            if t > end:
                break
            times.append(float(t))
    router = Router(net)
    trips = []
    for vid, t in enumerate(times):
        while True:
            o, d = rng.choice(len(terminals), size=2, replace=False)
            o, d = terminals[int(o)], terminals[int(d)]
            if router.reachable(o, d):
                break
        trips.append(TripRecord(vid, o, d, t))
    return FlowSpec(tuple(trips), float(horizon))


def _as_schedule(rate) -> list[tuple[float, float]]:
    if isinstance(rate, (int, float)):
        if not rate > 0:
            raise ValueError(f"arrival rate must be > 0, got {rate}")
        return [(0.0, float(rate))]
    sched = [(float(s), float(r)) for s, r in rate]
    if not sched or sched[0][0] != 0.0:
        raise ValueError("rate schedule must start at t=0")
    if any(b[0] <= a[0] for a, b in zip(sched, sched[1:])):
        raise ValueError("rate schedule start times must increase")
    if any(r < 0 for _, r in sched) or not any(r > 0 for _, r in sched):
        raise ValueError("rate schedule needs non-negative rates, at least one positive")
    return sched


class Router:
    """Shortest free-flow-time routes with lexicographic node-sequence tie-breaking.

    Routes never pass through a boundary terminal other than their endpoints.
    Results are memoized per O-D pair.
    """

    def __init__(self, net: TrafficNetwork):
        self.net = net
        self._out: dict[int, list] = {}
        for l in net.links:
            self._out.setdefault(l.from_node, []).append(l)
        self._cache: dict[tuple[int, int], Optional[tuple[int, ...]]] = {}

    def _search(self, origin: int, destination: int) -> Optional[tuple[int, ...]]:
        net = self.net
        # Queue entries are (cost, node sequence, link sequence); the tuple
        # ordering gives the lexicographic tie-break directly.
        heap = [(0.0, (origin,), ())]
        settled: set[int] = set()
        while heap:
            cost, nodes, links = heapq.heappop(heap)
            u = nodes[-1]
            if u in settled:
                continue
            settled.add(u)
            if u == destination:
                return links
            if u != origin and net.is_terminal(u):
                continue
            for l in self._out.get(u, ()):
                v = l.to_node
                if v in settled:
                    continue
                c = round(cost + l.free_flow_time, _COST_DIGITS)
                heapq.heappush(heap, (c, nodes + (v,), links + (l.id,)))
        return None

    def route(self, origin: int, destination: int) -> tuple[int, ...]:
        key = (origin, destination)
        if key not in self._cache:
            for node in key:
                if node not in self.net.terminal_side:
                    raise ValueError(f"node {node} is not a boundary terminal")
            if origin == destination:
                raise ValueError("origin equals destination")
            self._cache[key] = self._search(origin, destination)
        r = self._cache[key]
        if r is None:
            raise ValueError(f"destination {destination} unreachable from {origin}")
        return r

    def reachable(self, origin: int, destination: int) -> bool:
        try:
            self.route(origin, destination)
        except ValueError:
            return False
        return True


def route_of(net: TrafficNetwork, trip: TripRecord) -> tuple[int, ...]:
    return Router(net).route(trip.origin, trip.destination)


def route_cost(net: TrafficNetwork, route: Sequence[int]) -> float:
    return sum(net.links[l].free_flow_time for l in route)


# --- file I/O ------------------------------------------------------------------

_FIELDS = ("id", "origin", "destination", "depart_time_s")


def save_flows(spec: FlowSpec, path) -> None:
    """One trip per line so parse errors can point at a line."""
    lines = ["{", f'"horizon_s": {json.dumps(spec.horizon)},', '"trips": [']
    for k, t in enumerate(spec.trips):
        rec = json.dumps(
            {"id": t.id, "origin": t.origin, "destination": t.destination, "depart_time_s": t.depart_time}
        )
        lines.append(rec + ("," if k + 1 < len(spec.trips) else ""))
    lines += ["]", "}"]
    Path(path).write_text("\n".join(lines) + "\n")


def load_flows(path) -> FlowSpec:
    """Load a flow file; a bare JSON array of trips is also accepted."""
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise FlowFileError(f"invalid JSON: {e.msg}", line=e.lineno) from None
    if isinstance(doc, list):
        records, horizon = doc, None
    elif isinstance(doc, dict):
        if "trips" not in doc:
            raise FlowFileError("missing trips array", line=1, field="trips")
        records, horizon = doc["trips"], doc.get("horizon_s")
    else:
        raise FlowFileError("top level must be an object or array", line=1)
    lines = text.splitlines()
    trips = []
    for k, rec in enumerate(records):
        line = _line_of_record(lines, k, len(records))
        if not isinstance(rec, dict):
            raise FlowFileError(f"trip #{k} is not an object", line=line)
        for f in _FIELDS:
            if f not in rec:
                raise FlowFileError(f"trip #{k} missing field", line=line, field=f)
        try:
            trip = TripRecord(int(rec["id"]), int(rec["origin"]), int(rec["destination"]), float(rec["depart_time_s"]))
        except (TypeError, ValueError):
            raise FlowFileError(f"trip #{k} has a non-numeric value", line=line) from None
        if trip.depart_time < 0:
            raise FlowFileError(f"trip #{k} departs before 0", line=line, field="depart_time_s")
        trips.append(trip)
    if horizon is None:
        horizon = max((t.depart_time for t in trips), default=0.0)
    try:
        return FlowSpec(tuple(trips), float(horizon))
    except ValueError as e:
        raise FlowFileError(str(e)) from None


def _line_of_record(lines: list[str], k: int, n: int) -> Optional[int]:
    # Exact for files written by save_flows (one record per line); None otherwise.
    record_lines = [i for i, s in enumerate(lines, start=1) if s.lstrip().startswith("{") and '"id"' in s]
    if len(record_lines) == n:
        return record_lines[k]
    return None
