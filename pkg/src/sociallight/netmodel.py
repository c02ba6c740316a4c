"""Road-network data model: grid construction, lanes, movements, phases, neighborhoods.

Node ids are integers. Intersections occupy ``0 .. rows*cols - 1`` (row-major);
boundary terminals follow, numbered N side (by column), E side (by row),
S side (by column), W side (by row). A terminal is both a source and a sink.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

SIDES = ("N", "E", "S", "W")
SIDE_INDEX = {s: k for k, s in enumerate(SIDES)}
VEHICLE_SPACING_M = 7.5


class TurnKind(str, Enum):
    LEFT = "left"
    STRAIGHT = "straight"
    RIGHT = "right"

    @property
    def index(self) -> int:
        return _KIND_ORDER.index(self)

    @property
    def letter(self) -> str:
        return self.value[0].upper()


_KIND_ORDER = (TurnKind.LEFT, TurnKind.STRAIGHT, TurnKind.RIGHT)
_KIND_BY_LETTER = {k.letter: k for k in _KIND_ORDER}


def exit_side(approach: str, kind: TurnKind) -> str:
    """Side through which a vehicle arriving from ``approach`` leaves after turning."""
    a = SIDE_INDEX[approach]
    offset = {TurnKind.LEFT: 1, TurnKind.STRAIGHT: 2, TurnKind.RIGHT: 3}[kind]
    return SIDES[(a + offset) % 4]


def turn_kind(approach: str, exit: str) -> TurnKind:
    offset = (SIDE_INDEX[exit] - SIDE_INDEX[approach]) % 4
    if offset == 0:
        raise ValueError(f"U-turn from {approach} is not a movement")
    return {1: TurnKind.LEFT, 2: TurnKind.STRAIGHT, 3: TurnKind.RIGHT}[offset]


def parse_movement_key(key: str) -> tuple[str, TurnKind]:
    """``"N_L"`` -> ("N", LEFT)."""
    try:
        side, letter = key.split("_")
        if side not in SIDE_INDEX:
            raise KeyError(side)
        return side, _KIND_BY_LETTER[letter]
    except (ValueError, KeyError):
        raise ValueError(f"bad movement key {key!r}; expected e.g. 'N_L', 'E_S', 'W_R'") from None


def movement_key(approach: str, kind: TurnKind) -> str:
    return f"{approach}_{kind.letter}"


def keys_conflict(a: str, b: str) -> bool:
    """Conflict table for a four-leg intersection.

    Right turns never conflict. Left/straight movements are compatible only
    when they share an approach or come from opposite approaches with the same
    turn kind.
    """
    sa, ka = parse_movement_key(a)
    sb, kb = parse_movement_key(b)
    if ka is TurnKind.RIGHT or kb is TurnKind.RIGHT:
        return False
    if sa == sb:
        return False
    opposite = (SIDE_INDEX[sa] - SIDE_INDEX[sb]) % 4 == 2
    return not (opposite and ka is kb)


_RIGHTS = ["N_R", "E_R", "S_R", "W_R"]

# NS-straight, NS-left, EW-straight, EW-left, then single-approach straight+left.
DEFAULT_PHASE_KEYS: tuple[tuple[str, ...], ...] = tuple(
    tuple(p + _RIGHTS)
    for p in (
        ["N_S", "S_S"],
        ["N_L", "S_L"],
        ["E_S", "W_S"],
        ["E_L", "W_L"],
        ["N_S", "N_L"],
        ["S_S", "S_L"],
        ["E_S", "E_L"],
        ["W_S", "W_L"],
    )
)
PHASE_NAMES = ("NS-straight", "NS-left", "EW-straight", "EW-left", "N-all", "S-all", "E-all", "W-all")


@dataclass(frozen=True)
class Movement:
    in_lane: int
    out_lane: int
    kind: TurnKind
    approach: str
    in_link: int
    out_link: int

    @property
    def key(self) -> str:
        return movement_key(self.approach, self.kind)


@dataclass(frozen=True)
class Phase:
    id: int
    movements: tuple[Movement, ...]

    @property
    def keys(self) -> tuple[str, ...]:
        return tuple(m.key for m in self.movements)


@dataclass(frozen=True)
class RoadLink:
    id: int
    from_node: int
    to_node: int
    lanes: int
    length: float
    speed_limit: float

    @property
    def free_flow_time(self) -> float:
        return self.length / self.speed_limit

    @property
    def capacity(self) -> int:
        return self.lanes * int(self.length // VEHICLE_SPACING_M)


@dataclass(frozen=True)
class LinkTemplate:
    lanes: int = 3
    length: float = 200.0
    speed_limit: float = 20.0


# Streets run W-E at 72 km/h, avenues N-S at 40 km/h.
DEFAULT_LINK_CONFIG = {
    "street": LinkTemplate(lanes=3, length=200.0, speed_limit=20.0),
    "avenue": LinkTemplate(lanes=3, length=200.0, speed_limit=40.0 / 3.6),
}


@dataclass(frozen=True)
class IntersectionSpec:
    id: int
    row: int
    col: int
    incoming_links: tuple[int, int, int, int]  # by side N,E,S,W
    outgoing_links: tuple[int, int, int, int]
    incoming_lanes: tuple[int, ...]
    outgoing_lanes: tuple[int, ...]
    movements: tuple[Movement, ...]
    phase_table: tuple[Phase, ...]

    @property
    def num_phases(self) -> int:
        return len(self.phase_table)


@dataclass(frozen=True)
class TrafficNetwork:
    rows: int
    cols: int
    intersections: tuple[IntersectionSpec, ...]
    links: tuple[RoadLink, ...]
    adjacency: tuple[tuple[Optional[int], ...], ...]
    terminals: tuple[int, ...]
    terminal_side: dict = field(compare=False, hash=False)
    phase_keys: tuple[tuple[str, ...], ...] = DEFAULT_PHASE_KEYS

    @property
    def num_intersections(self) -> int:
        return len(self.intersections)

    @property
    def num_phases(self) -> int:
        return len(self.phase_keys)

    def is_terminal(self, node: int) -> bool:
        return node >= self.num_intersections

    def lanes_of(self, link_id: int) -> tuple[int, ...]:
        return tuple(link_lane(link_id, k) for k in range(self.links[link_id].lanes))

    def link_between(self, a: int, b: int) -> Optional[int]:
        for l in self.links:
            if l.from_node == a and l.to_node == b:
                return l.id
        return None

    def fingerprint(self) -> str:
        blob = json.dumps(network_to_dict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


MAX_LANES = 3


def link_lane(link_id: int, index: int) -> int:
    return link_id * MAX_LANES + index


def lane_link(lane_id: int) -> int:
    return lane_id // MAX_LANES


def lane_for_kind(lanes: int, kind: TurnKind) -> int:
    """Lane index that serves a turn kind: left, straight, right from the median out."""
    return min(kind.index, lanes - 1)


def _neighbor_coord(r: int, c: int, side: str) -> tuple[int, int]:
    dr, dc = {"N": (-1, 0), "E": (0, 1), "S": (1, 0), "W": (0, -1)}[side]
    return r + dr, c + dc


def build_grid_network(
    rows: int,
    cols: int,
    link_config: Optional[dict] = None,
    phase_table: Optional[Sequence[Sequence[str]]] = None,
) -> TrafficNetwork:
    """Build a rows x cols grid with boundary source/sink terminals on every open side.

    ``link_config`` maps ``"street"`` (W-E links) and ``"avenue"`` (N-S links)
    to :class:`LinkTemplate`; ``phase_table`` is a list of phases, each a list
    of movement keys such as ``"N_S"`` or ``"W_L"``.
    """
    if not isinstance(rows, int) or not isinstance(cols, int) or rows < 1 or cols < 1:
        raise ValueError(f"grid dimensions must be positive integers, got {rows}x{cols}")
    if phase_table is None:
        phase_table = DEFAULT_PHASE_KEYS
    phase_table = tuple(tuple(p) for p in phase_table)
    if not phase_table:
        raise ValueError("phase table is empty")
    for p in phase_table:
        for k in p:
            parse_movement_key(k)
    cfg = dict(DEFAULT_LINK_CONFIG)
    cfg.update(link_config or {})

    n = rows * cols
    coord_to_id = {(r, c): r * cols + c for r in range(rows) for c in range(cols)}

    terminals: list[int] = []
    terminal_side: dict[int, tuple[int, str]] = {}  # terminal -> (intersection, side)
    side_terminal: dict[tuple[int, str], int] = {}
    edge_cells = {
        "N": [(0, c) for c in range(cols)],
        "E": [(r, cols - 1) for r in range(rows)],
        "S": [(rows - 1, c) for c in range(cols)],
        "W": [(r, 0) for r in range(rows)],
    }
    for side in SIDES:
        for cell in edge_cells[side]:
            t = n + len(terminals)
            terminals.append(t)
            terminal_side[t] = (coord_to_id[cell], side)
            side_terminal[(coord_to_id[cell], side)] = t

    def template(side: str) -> LinkTemplate:
        return cfg["street"] if side in ("E", "W") else cfg["avenue"]

    links: list[RoadLink] = []

    def add_link(a: int, b: int, side: str) -> None:
        t = template(side)
        links.append(RoadLink(len(links), a, b, t.lanes, float(t.length), float(t.speed_limit)))

    # Links are created per intersection, per side: inbound then outbound.
    for i in range(n):
        r, c = divmod(i, cols)
        for side in SIDES:
            nb = _neighbor_coord(r, c, side)
            other = coord_to_id.get(nb, side_terminal.get((i, side)))
            add_link(other, i, side)
            if other >= n:
                add_link(i, other, side)
    # Intersection-to-intersection outbound links are already created as the
    # neighbor's inbound links.
    return _assemble(rows, cols, links, phase_table, terminals, terminal_side)


def _assemble(rows, cols, links, phase_table, terminals, terminal_side) -> TrafficNetwork:
    n = rows * cols
    by_pair = {(l.from_node, l.to_node): l for l in links}
    for l in links:
        if l.lanes > MAX_LANES:
            raise ValueError(f"link {l.id}: at most {MAX_LANES} lanes supported, got {l.lanes}")
    side_terminal = {v: k for k, v in terminal_side.items()}
    intersections = []
    adjacency = []
    for i in range(n):
        r, c = divmod(i, cols)
        node_of_side = {}
        slots = []
        for side in SIDES:
            nr, nc = _neighbor_coord(r, c, side)
            if 0 <= nr < rows and 0 <= nc < cols:
                node_of_side[side] = nr * cols + nc
                slots.append(nr * cols + nc)
            else:
                node_of_side[side] = side_terminal[(i, side)]
                slots.append(None)
        adjacency.append(tuple(slots))
        in_links = tuple(by_pair[(node_of_side[s], i)].id for s in SIDES)
        out_links = tuple(by_pair[(i, node_of_side[s])].id for s in SIDES)
        in_lanes = tuple(link_lane(lid, k) for lid in in_links for k in range(links[lid].lanes))
        out_lanes = tuple(link_lane(lid, k) for lid in out_links for k in range(links[lid].lanes))
        movements = {}
        for s_idx, side in enumerate(SIDES):
            lin = links[in_links[s_idx]]
            for kind in _KIND_ORDER:
                ex = exit_side(side, kind)
                lout = links[out_links[SIDE_INDEX[ex]]]
                m = Movement(
                    in_lane=link_lane(lin.id, lane_for_kind(lin.lanes, kind)),
                    out_lane=link_lane(lout.id, lane_for_kind(lout.lanes, kind)),
                    kind=kind,
                    approach=side,
                    in_link=lin.id,
                    out_link=lout.id,
                )
                movements[m.key] = m
        phases = tuple(
            Phase(pid, tuple(movements[k] for k in keys)) for pid, keys in enumerate(phase_table)
        )
        intersections.append(
            IntersectionSpec(i, r, c, in_links, out_links, in_lanes, out_lanes, tuple(movements.values()), phases)
        )
    return TrafficNetwork(
        rows=rows,
        cols=cols,
        intersections=tuple(intersections),
        links=tuple(links),
        adjacency=tuple(adjacency),
        terminals=tuple(terminals),
        terminal_side=terminal_side,
        phase_keys=tuple(tuple(p) for p in phase_table),
    )


def neighbors_of(net: TrafficNetwork, i: int) -> tuple[tuple[Optional[int], ...], tuple[bool, ...]]:
    """Compass-ordered (N, E, S, W) neighbor slots and their validity mask."""
    if not isinstance(i, int) or not 0 <= i < net.num_intersections:
        raise KeyError(f"unknown intersection id {i!r}")
    slots = net.adjacency[i]
    return slots, tuple(s is not None for s in slots)


def neighborhood(net: TrafficNetwork, i: int) -> list[int]:
    slots, mask = neighbors_of(net, i)
    return [i] + [s for s, ok in zip(slots, mask) if ok]


def movements_of_phase(spec: IntersectionSpec, phase_id: int) -> tuple[Movement, ...]:
    if not isinstance(phase_id, int) or not 0 <= phase_id < len(spec.phase_table):
        raise IndexError(f"phase id {phase_id!r} out of range 0..{len(spec.phase_table) - 1}")
    return spec.phase_table[phase_id].movements


def validate_network(net: TrafficNetwork) -> list[str]:
    """Check every structural invariant; returns human-readable violations."""
    problems: list[str] = []
    n = net.num_intersections
    for l in net.links:
        if not l.length > 0:
            problems.append(f"link {l.id}: length must be > 0 (got {l.length})")
        if not l.speed_limit > 0:
            problems.append(f"link {l.id}: speed_limit must be > 0 (got {l.speed_limit})")
        if l.lanes < 1:
            problems.append(f"link {l.id}: lanes must be >= 1 (got {l.lanes})")

    for i, slots in enumerate(net.adjacency):
        for j in slots:
            if j is None:
                continue
            if not 0 <= j < n:
                problems.append(f"intersection {i}: neighbor {j} does not exist")
            elif i not in net.adjacency[j]:
                problems.append(f"adjacency asymmetry: E_{i}{j} = 1 but E_{j}{i} = 0 ({i}->{j})")

    # connectivity over the intersection graph
    if n:
        seen = {0}
        stack = [0]
        while stack:
            u = stack.pop()
            for v in net.adjacency[u]:
                if v is not None and 0 <= v < n and v not in seen:
                    seen.add(v)
                    stack.append(v)
        if len(seen) != n:
            problems.append(f"network disconnected: {n - len(seen)} intersections unreachable from 0")

    for spec in net.intersections:
        if not spec.incoming_lanes:
            problems.append(f"intersection {spec.id}: no incoming lanes")
        if not spec.outgoing_lanes:
            problems.append(f"intersection {spec.id}: no outgoing lanes")
        in_set, out_set = set(spec.incoming_lanes), set(spec.outgoing_lanes)
        pairs = set()
        for m in spec.movements:
            if m.in_lane not in in_set or m.out_lane not in out_set:
                problems.append(f"intersection {spec.id}: movement {m.key} lanes do not resolve")
            if (m.in_lane, m.out_lane) in pairs:
                problems.append(f"intersection {spec.id}: duplicate movement ({m.in_lane}, {m.out_lane})")
            pairs.add((m.in_lane, m.out_lane))
        known = set(spec.movements)
        for idx, phase in enumerate(spec.phase_table):
            if phase.id != idx:
                problems.append(f"intersection {spec.id}: phase at position {idx} has id {phase.id}")
            if not phase.movements:
                problems.append(f"intersection {spec.id}: phase {phase.id} has no movements")
            for m in phase.movements:
                if m not in known:
                    problems.append(f"intersection {spec.id}: phase {phase.id} references unknown movement {m.key}")
            keys = phase.keys
            for a_idx in range(len(keys)):
                for b_idx in range(a_idx + 1, len(keys)):
                    if keys_conflict(keys[a_idx], keys[b_idx]):
                        problems.append(
                            f"intersection {spec.id}: phase {phase.id} has conflicting movements "
                            f"{keys[a_idx]} and {keys[b_idx]}"
                        )
    return problems


# --- JSON I/O -----------------------------------------------------------------


def network_to_dict(net: TrafficNetwork) -> dict:
    return {
        "rows": net.rows,
        "cols": net.cols,
        "links": [
            {
                "from": l.from_node,
                "to": l.to_node,
                "lanes": l.lanes,
                "length_m": l.length,
                "speed_limit_mps": l.speed_limit,
            }
            for l in net.links
        ],
        "phase_table": [list(p) for p in net.phase_keys],
    }


def network_from_dict(doc: dict) -> TrafficNetwork:
    for key in ("rows", "cols", "links", "phase_table"):
        if key not in doc:
            raise ValueError(f"network document missing key {key!r}")
    base = build_grid_network(int(doc["rows"]), int(doc["cols"]), phase_table=doc["phase_table"])
    expected = {(l.from_node, l.to_node): l.id for l in base.links}
    links = list(base.links)
    seen = set()
    for rec in doc["links"]:
        pair = (int(rec["from"]), int(rec["to"]))
        if pair not in expected:
            raise ValueError(f"link {pair[0]}->{pair[1]} is not part of a {base.rows}x{base.cols} grid")
        lid = expected[pair]
        seen.add(lid)
        links[lid] = RoadLink(lid, pair[0], pair[1], int(rec["lanes"]), float(rec["length_m"]), float(rec["speed_limit_mps"]))
    missing = set(expected.values()) - seen
    if missing:
        raise ValueError(f"network document lacks {len(missing)} grid links, e.g. link id {min(missing)}")
    return _assemble(base.rows, base.cols, links, base.phase_keys, base.terminals, base.terminal_side)


def save_network(net: TrafficNetwork, path) -> None:
    Path(path).write_text(json.dumps(network_to_dict(net), indent=1) + "\n")


def load_network(path) -> TrafficNetwork:
    return network_from_dict(json.loads(Path(path).read_text()))


def phase_lane_incidence(spec: IntersectionSpec) -> list[list[int]]:
    """Per phase, positions (into ``incoming_lanes``) of the lanes it serves, one entry per movement."""
    pos = {lane: k for k, lane in enumerate(spec.incoming_lanes)}
    return [[pos[m.in_lane] for m in p.movements] for p in spec.phase_table]
