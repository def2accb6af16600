"""Deterministic desk-scale traffic micro-simulator.

Lane-graph maps (four-way major/minor intersection and a ring road), point-mass
kinematics with instantaneous lane changes, rule-based surrounding traffic with
car-following and gap-acceptance yielding. One world per actor; a world is never
shared mutably.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ModelValidationError

SPEED_CAP = 20.0          # global speed cap, m/s
VEHICLE_LENGTH = 4.5
LANE_WIDTH = 3.5
CONFLICT_RADIUS = 2.5     # centreline distance below which paths conflict

# action indices (paper order, 0-based)
MAX_DECEL, MED_DECEL, MIN_DECEL, MAINTAIN, MIN_ACCEL, MED_ACCEL, MAX_ACCEL, \
    CHANGE_RIGHT, CHANGE_LEFT = range(9)
ACTION_ACCEL = {MAX_DECEL: -4.5, MED_DECEL: -2.5, MIN_DECEL: -1.0, MAINTAIN: 0.0,
                MIN_ACCEL: 1.0, MED_ACCEL: 2.5, MAX_ACCEL: 4.5}
N_ACTIONS = 9


@dataclass
class Lane:
    lane_id: str
    points: np.ndarray            # (N, 2) centreline
    speed_limit: float
    road: str                     # road group, used for road-change detection
    in_intersection: bool = False
    left: Optional[str] = None
    right: Optional[str] = None
    successors: dict = field(default_factory=dict)   # turn -> lane id
    successor_offsets: dict = field(default_factory=dict)  # turn -> entry pos on successor
    priority: int = 1
    entry: bool = False           # traffic spawn point
    turn: Optional[str] = None    # movement this (connector) lane realizes

    def offset_to(self, succ_id: str) -> float:
        for turn, lid in self.successors.items():
            if lid == succ_id:
                return self.successor_offsets.get(turn, 0.0)
        return 0.0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        seg = np.diff(self.points, axis=0)
        self._seg_len = np.hypot(seg[:, 0], seg[:, 1])
        self._cum = np.concatenate([[0.0], np.cumsum(self._seg_len)])
        self.length = float(self._cum[-1])

    def pose(self, pos: float) -> tuple[float, float, float]:
        """(x, y, heading) at longitudinal position `pos`."""
        pos = min(max(pos, 0.0), self.length)
        i = int(np.searchsorted(self._cum, pos, side="right")) - 1
        i = min(i, len(self._seg_len) - 1)
        t = (pos - self._cum[i]) / max(self._seg_len[i], 1e-9)
        p = self.points[i] + t * (self.points[i + 1] - self.points[i])
        d = self.points[i + 1] - self.points[i]
        return float(p[0]), float(p[1]), float(np.arctan2(d[1], d[0]))


@dataclass
class Conflict:
    lane_a: str
    window_a: tuple[float, float]
    lane_b: str
    window_b: tuple[float, float]
    kind: str  # 'cross' | 'merge'


class LaneGraph:
    def __init__(self, kind: str, lanes: list[Lane]):
        self.kind = kind
        self.lanes = {lane.lane_id: lane for lane in lanes}
        if len(self.lanes) != len(lanes):
            raise ModelValidationError("duplicate lane ids")
        self.conflicts: list[Conflict] = []
        self._conflicts_by_lane: dict[str, list[Conflict]] = {}
        self._find_conflicts()
        self.validate()

    def __getitem__(self, lane_id: str) -> Lane:
        return self.lanes[lane_id]

    def lane_conflicts(self, lane_id: str) -> list[Conflict]:
        return self._conflicts_by_lane.get(lane_id, [])

    def _sample(self, lane: Lane, step: float = 1.0):
        s = np.arange(0.0, lane.length + step / 2, step)
        pts = np.array([lane.pose(p)[:2] for p in s])
        return s, pts

    def _find_conflicts(self) -> None:
        """Conflicts between distinct conflict-eligible lanes, found geometrically.

        Eligible lanes are intersection connectors and merge targets; two lanes
        conflict where their centrelines come within CONFLICT_RADIUS.
        """
        eligible = [l for l in self.lanes.values()
                    if l.in_intersection or l.turn == "merge" or self._is_merge_target(l)]
        samples = {l.lane_id: self._sample(l) for l in eligible}
        for la, lb in itertools.combinations(eligible, 2):
            if self._share_approach(la, lb):
                continue
            sa, pa = samples[la.lane_id]
            sb, pb = samples[lb.lane_id]
            dist = np.linalg.norm(pa[:, None, :] - pb[None, :, :], axis=2)
            close = dist < CONFLICT_RADIUS
            if not close.any():
                continue
            ia, ib = np.where(close)
            kind = "merge" if self._merge_pair(la, lb) else "cross"
            conflict = Conflict(la.lane_id, (float(sa[ia.min()]), float(sa[ia.max()])),
                                lb.lane_id, (float(sb[ib.min()]), float(sb[ib.max()])),
                                kind)
            self.conflicts.append(conflict)
            self._conflicts_by_lane.setdefault(la.lane_id, []).append(conflict)
            self._conflicts_by_lane.setdefault(lb.lane_id, []).append(conflict)

    def _is_merge_target(self, lane: Lane) -> bool:
        feeders = [l for l in self.lanes.values()
                   if lane.lane_id in l.successors.values()]
        return len(feeders) > 1

    def _share_approach(self, la: Lane, lb: Lane) -> bool:
        """Lanes fed by the same approach never conflict (diverging turns), and a
        lane never conflicts with its seamless continuation. A successor reached
        through a mid-lane merge offset is a genuine conflict and is kept."""
        def feeders(lane):
            return {l.lane_id for l in self.lanes.values()
                    if lane.lane_id in l.successors.values()}
        if lb.lane_id in la.successors.values() and la.offset_to(lb.lane_id) == 0.0:
            return True
        if la.lane_id in lb.successors.values() and lb.offset_to(la.lane_id) == 0.0:
            return True
        return bool(feeders(la) & feeders(lb))

    def _merge_pair(self, la: Lane, lb: Lane) -> bool:
        succ_a = set(la.successors.values()) | {la.lane_id}
        succ_b = set(lb.successors.values()) | {lb.lane_id}
        return bool(succ_a & succ_b)

    def validate(self) -> None:
        for lane in self.lanes.values():
            for side in ("left", "right"):
                nb = getattr(lane, side)
                if nb is None:
                    continue
                if nb not in self.lanes:
                    raise ModelValidationError(f"{lane.lane_id}: unknown neighbor {nb}")
                back = getattr(self.lanes[nb], "right" if side == "left" else "left")
                if back != lane.lane_id:
                    raise ModelValidationError(f"neighbor relation not symmetric at {lane.lane_id}")
            for succ in lane.successors.values():
                if succ not in self.lanes:
                    raise ModelValidationError(f"{lane.lane_id}: unknown successor {succ}")

    def routes(self) -> list[list[str]]:
        """All maximal entry-to-exit lane sequences."""
        out = []

        def walk(lane_id, acc):
            lane = self.lanes[lane_id]
            if not lane.successors:
                out.append(acc)
                return
            for nxt in lane.successors.values():
                if nxt in acc:     # closed a ring loop without exiting: drop
                    continue
                walk(nxt, acc + [nxt])

        for lane in self.lanes.values():
            if lane.entry:
                walk(lane.lane_id, [lane.lane_id])
        return out


# ---------------------------------------------------------------------------
# Map construction
# ---------------------------------------------------------------------------

def _straight(p0, p1, n=2):
    return np.linspace(p0, p1, n)


def _arc(center, radius, a0, a1, n=12):
    ang = np.linspace(a0, a1, n)
    return np.stack([center[0] + radius * np.cos(ang),
                     center[1] + radius * np.sin(ang)], axis=1)


def _turn_arc(start, d, end, td, n=10):
    """Circular arc from `start` (heading d) to `end` (heading td)."""
    start, end = np.asarray(start, float), np.asarray(end, float)
    lat = np.array([d[1], -d[0]])
    denom = float(lat @ td)
    if abs(denom) < 1e-9:
        return _straight(start, end)
    alpha = float((end - start) @ td) / denom
    center = start + alpha * lat
    r0, r1 = start - center, end - center
    a0, a1 = np.arctan2(r0[1], r0[0]), np.arctan2(r1[1], r1[0])
    # take the short way around
    if a1 - a0 > np.pi:
        a1 -= 2 * np.pi
    elif a0 - a1 > np.pi:
        a1 += 2 * np.pi
    radius = float(np.linalg.norm(r0))
    return _arc(center, radius, a0, a1, n)


@dataclass
class CrossGeometry:
    approach_len: float = 100.0
    box_half: float = 9.0
    major_limit: float = 14.0
    minor_limit: float = 10.0


def build_cross_map(geom: CrossGeometry | None = None) -> LaneGraph:
    """Four-way junction of a major (EW) and minor (NS) road, two lanes each way.

    Right turns from the outer lane, left turns from the inner lane, straight
    from both; the minor road yields to the major road.
    """
    g = geom or CrossGeometry()
    if g.approach_len <= 0 or g.box_half <= LANE_WIDTH:
        raise ModelValidationError("inconsistent cross geometry")
    hb, L, w = g.box_half, g.approach_len, LANE_WIDTH
    inner, outer = w / 2, 3 * w / 2
    lanes = []
    # approach/exit offsets per compass direction, right-hand traffic
    specs = {
        "E": {"dir": np.array([1.0, 0.0]), "road": "major", "limit": g.major_limit, "pri": 2},
        "W": {"dir": np.array([-1.0, 0.0]), "road": "major", "limit": g.major_limit, "pri": 2},
        "N": {"dir": np.array([0.0, 1.0]), "road": "minor", "limit": g.minor_limit, "pri": 1},
        "S": {"dir": np.array([0.0, -1.0]), "road": "minor", "limit": g.minor_limit, "pri": 1},
    }

    def lateral(d):
        return np.array([d[1], -d[0]])  # right of travel direction

    for name, sp in specs.items():
        d, lat = sp["dir"], lateral(sp["dir"])
        for idx, off in ((0, outer), (1, inner)):   # 0 = rightmost/outer lane
            start = -d * (hb + L) + lat * off
            end = -d * hb + lat * off
            lanes.append(Lane(f"{name}_in_{idx}", _straight(start, end),
                              sp["limit"], sp["road"], priority=sp["pri"], entry=True))
            lanes.append(Lane(f"{name}_out_{idx}", _straight(d * hb + lat * off,
                              d * (hb + L) + lat * off),
                              sp["limit"], sp["road"]))
    by_id = {l.lane_id: l for l in lanes}
    for name in specs:
        by_id[f"{name}_in_0"].left = f"{name}_in_1"
        by_id[f"{name}_in_1"].right = f"{name}_in_0"

    right_of = {"E": "S", "S": "W", "W": "N", "N": "E"}     # exit direction of a right turn
    left_of = {v: k for k, v in right_of.items()}
    for name, sp in specs.items():
        d, lat = sp["dir"], lateral(sp["dir"])
        conn_pri = sp["pri"]

        def conn(turn, lane_idx, target_dir, n=8):
            start = -d * hb + lat * (outer if lane_idx == 0 else inner)
            td = specs[target_dir]["dir"]
            tlat = lateral(td)
            end = td * hb + tlat * (outer if lane_idx == 0 else inner)
            if turn == "straight":
                pts = _straight(start, end)
            else:
                pts = _turn_arc(start, d, end, specs[target_dir]["dir"])
            lid = f"{name}_{turn}_{lane_idx}"
            lanes.append(Lane(lid, pts, sp["limit"], sp["road"], in_intersection=True,
                              priority=conn_pri, turn=turn))
            by_id[f"{name}_in_{lane_idx}"].successors[turn] = lid
            by_id[lid] = lanes[-1]
            lanes[-1].successors["straight"] = f"{target_dir}_out_{lane_idx}"

        conn("right", 0, right_of[name])
        conn("straight", 0, name)
        conn("straight", 1, name)
        conn("left", 1, left_of[name])
    return LaneGraph("cross", lanes)


@dataclass
class RingGeometry:
    radius: float = 40.0
    entry_len: float = 80.0
    limit: float = 12.0


def build_ring_map(geom: RingGeometry | None = None) -> LaneGraph:
    """Single-lane ring with two entries and two exits; entering traffic yields."""
    g = geom or RingGeometry()
    if g.radius <= 5 or g.entry_len <= 0:
        raise ModelValidationError("inconsistent ring geometry")
    lanes = []
    quarters = [(0.0, 0.5 * np.pi), (0.5 * np.pi, np.pi),
                (np.pi, 1.5 * np.pi), (1.5 * np.pi, 2.0 * np.pi)]
    for i, (a0, a1) in enumerate(quarters):
        lanes.append(Lane(f"ring_{i}", _arc((0, 0), g.radius, a0, a1, n=16),
                          g.limit, "ring", priority=2))
    by_id = {l.lane_id: l for l in lanes}
    for i in range(4):
        by_id[f"ring_{i}"].successors["ring"] = f"ring_{(i + 1) % 4}"
    # entries merge mid-arc into ring_0 and ring_2 (approaching from outside);
    # exits branch off seamlessly at the ends of ring_1 and ring_3
    merge_angle = 0.2
    for i, ring_idx in ((0, 0), (1, 2)):
        a = quarters[ring_idx][0] + merge_angle
        radial = np.array([np.cos(a), np.sin(a)])
        tangent = np.array([-np.sin(a), np.cos(a)])
        merge_pt = g.radius * radial
        start = merge_pt - tangent * g.entry_len * 0.8 + radial * g.entry_len * 0.35
        mid = merge_pt - tangent * g.entry_len * 0.25 + radial * 2.0
        entry = Lane(f"entry_{i}", np.array([start, mid, merge_pt]),
                     g.limit, "ring_entry", priority=1, entry=True, turn="merge")
        entry.successors["ring"] = f"ring_{ring_idx}"
        entry.successor_offsets["ring"] = merge_angle * g.radius
        lanes.append(entry)
    for i, ring_idx in ((0, 1), (1, 3)):
        a = quarters[ring_idx][1]
        radial = np.array([np.cos(a), np.sin(a)])
        tangent = np.array([-np.sin(a), np.cos(a)])
        branch_pt = g.radius * radial
        out = branch_pt + tangent * g.entry_len * 0.25 + radial * g.entry_len * 0.5
        far = branch_pt + tangent * g.entry_len * 0.6 + radial * g.entry_len
        lanes.append(Lane(f"exit_{i}", np.array([branch_pt, out, far]),
                          g.limit, "ring_exit"))
        by_id[f"ring_{ring_idx}"].successors["exit"] = f"exit_{i}"
    return LaneGraph("ring", lanes)


def build_map(kind: str, geometry=None) -> LaneGraph:
    if kind == "cross":
        return build_cross_map(geometry)
    if kind == "ring":
        return build_ring_map(geometry)
    raise ModelValidationError(f"unknown map kind {kind!r}")


# ---------------------------------------------------------------------------
# Vehicles and stepping
# ---------------------------------------------------------------------------

@dataclass
class Vehicle:
    vid: int
    route: list                    # remaining lane ids, route[0] = current lane
    pos: float
    speed: float
    max_speed: float
    controller: str = "rule"       # 'ego' | 'rule'
    turn: Optional[str] = None     # ego's intended movement at the junction
    length: float = VEHICLE_LENGTH
    brake_signal: bool = False
    turn_signal: Optional[str] = None

    @property
    def lane_id(self) -> str:
        return self.route[0]


@dataclass
class StepEvents:
    collision: bool = False
    collision_partner: Optional[int] = None
    ego_exited: bool = False
    timeout: bool = False
    exited_vehicles: list = field(default_factory=list)
    right_of_way_change: bool = False
    road_change: bool = False
    illegal_lane_change: bool = False
    wrong_lane_at_turn: bool = False

    @property
    def terminal_cause(self) -> Optional[str]:
        if self.collision:
            return "collision"
        if self.ego_exited:
            return "route-complete"
        if self.timeout:
            return "timeout"
        return None


@dataclass
class SimConfig:
    dt: float = 0.1
    timeout: float = 60.0
    # IDM-style car following
    idm_accel: float = 2.0
    idm_brake: float = 2.5
    idm_min_gap: float = 2.0
    idm_headway: float = 1.5
    hard_brake: float = 6.0
    # yielding
    yield_lookahead: float = 35.0
    yield_gap_time: float = 4.0
    # spawning
    spawn_rate: float = 0.35       # per entry lane per second, scaled by p_entry
    spawn_gap: float = 18.0
    max_vehicles: int = 30         # desk-scale density cap
    speed_mean: float = 10.0
    speed_sd: float = 2.0
    max_entry_prob: float = 1.0


class World:
    """One simulation instance. Deterministic given seed and ego actions."""

    def __init__(self, graph: LaneGraph, config: SimConfig, seed: int):
        self.graph = graph
        self.config = config
        self.rng = np.random.default_rng(seed)
        self.vehicles: dict[int, Vehicle] = {}
        self.ego_id: Optional[int] = None
        self.time = 0.0
        self.p_entry = 0.0
        self._next_vid = 0
        self._ego_context = None
        self._index_dirty = True
        self._by_lane: dict[str, list] = {}
        self._route_index: dict[str, list] = {}

    @property
    def ego(self) -> Optional[Vehicle]:
        return self.vehicles.get(self.ego_id) if self.ego_id is not None else None

    def add_vehicle(self, route, pos, speed, max_speed, controller="rule",
                    turn=None) -> Vehicle:
        v = Vehicle(self._next_vid, list(route), pos, speed, max_speed,
                    controller=controller, turn=turn)
        self.vehicles[v.vid] = v
        self._next_vid += 1
        self._index_dirty = True
        if controller == "ego":
            self.ego_id = v.vid
            self._ego_context = self._ego_yield_context()
        return v

    def _ensure_index(self) -> None:
        if not self._index_dirty:
            return
        self._by_lane = {}
        self._route_index = {}
        for v in self.vehicles.values():
            self._by_lane.setdefault(v.lane_id, []).append((v.pos, v.vid))
            for lane_id in v.route:
                self._route_index.setdefault(lane_id, []).append(v.vid)
        for entries in self._by_lane.values():
            entries.sort()
        self._index_dirty = False

    # -- geometry helpers ---------------------------------------------------

    def pose(self, v: Vehicle):
        return self.graph[v.lane_id].pose(v.pos)

    def distance_to_conflict_zone(self, v: Vehicle, horizon: float = 100.0) -> float:
        """Distance along the route to the nearest conflict window (cap = horizon)."""
        dist = 0.0
        pos = v.pos
        for lane_id in v.route:
            lane = self.graph[lane_id]
            best = None
            for c in self.graph.lane_conflicts(lane_id):
                w = c.window_a if c.lane_a == lane_id else c.window_b
                if w[1] >= pos:
                    start = max(w[0], pos)
                    best = start if best is None else min(best, start)
            if lane.in_intersection and best is None:
                best = pos
            if best is not None:
                return min(dist + best - pos, horizon)
            dist += lane.length - pos
            if dist >= horizon:
                return horizon
            pos = 0.0
        return horizon

    def in_conflict_zone(self, v: Vehicle) -> bool:
        lane = self.graph[v.lane_id]
        if lane.in_intersection:
            return True
        for c in self.graph.lane_conflicts(v.lane_id):
            w = c.window_a if c.lane_a == v.lane_id else c.window_b
            if w[0] - v.length <= v.pos <= w[1] + v.length:
                return True
        return False

    def leader_of(self, v: Vehicle, horizon: float = 80.0):
        """Nearest vehicle ahead along the route. Returns (vehicle, gap) or None."""
        self._ensure_index()
        dist = 0.0
        pos = v.pos
        for j, lane_id in enumerate(v.route):
            best = None
            for u_pos, u_vid in self._by_lane.get(lane_id, ()):
                if u_vid == v.vid or (j == 0 and u_pos <= pos):
                    continue
                gap = dist + u_pos - pos - (self.vehicles[u_vid].length + v.length) / 2
                if best is None or gap < best[1]:
                    best = (self.vehicles[u_vid], gap)
            if best is not None:
                return best
            dist += self.graph[lane_id].length - pos
            if dist > horizon:
                return None
            pos = self.graph[lane_id].offset_to(v.route[j + 1]) \
                if j + 1 < len(v.route) else 0.0
        return None

    # -- control ------------------------------------------------------------

    def _idm(self, v: Vehicle, gap: float, lead_speed: float) -> float:
        c = self.config
        v0 = max(min(v.max_speed, self.graph[v.lane_id].speed_limit), 0.1)
        dv = v.speed - lead_speed
        s_star = c.idm_min_gap + v.speed * c.idm_headway + \
            v.speed * dv / (2.0 * np.sqrt(c.idm_accel * c.idm_brake))
        gap = max(gap, 0.1)
        a = c.idm_accel * (1.0 - (v.speed / v0) ** 4 - (s_star / gap) ** 2)
        if gap < c.idm_min_gap:
            a = -c.hard_brake
        return float(np.clip(a, -c.hard_brake, c.idm_accel))

    def _movement_must_yield(self, mine: Lane, theirs: Lane) -> bool:
        if theirs.priority > mine.priority:
            return True
        if theirs.priority < mine.priority:
            return False
        my_turn, their_turn = mine.turn, theirs.turn
        if my_turn == "left" and their_turn in ("straight", "right"):
            return True
        if my_turn == "left" and their_turn == "left":
            return mine.lane_id > theirs.lane_id   # deterministic tie-break
        return False

    def _connector_of(self, v: Vehicle) -> Optional[Lane]:
        for lane_id in v.route:
            lane = self.graph[lane_id]
            if lane.in_intersection or lane.turn == "merge":
                return lane
        return None

    def _travel_time(self, dist: float, speed: float, vmax: float,
                     accelerating: bool) -> float:
        """Time to cover `dist`, either accelerating toward vmax or at current speed."""
        dist = max(dist, 0.0)
        if not accelerating:
            return dist / max(speed, 0.5)
        a = self.config.idm_accel
        vmax = max(vmax, 0.5)
        t_acc = (vmax - speed) / a
        d_acc = speed * t_acc + 0.5 * a * t_acc ** 2
        if d_acc >= dist:
            return (-speed + np.sqrt(speed ** 2 + 2 * a * dist)) / a
        return t_acc + (dist - d_acc) / vmax

    def _route_distance(self, u: Vehicle, target_lane: str, target_pos: float
                        ) -> Optional[float]:
        dist = 0.0
        pos = u.pos
        for j, lane_id in enumerate(u.route):
            if lane_id == target_lane:
                d = dist + target_pos - pos
                return None if d < -u.length else max(d, 0.0)
            dist += self.graph[lane_id].length - pos
            pos = self.graph[lane_id].offset_to(u.route[j + 1]) \
                if j + 1 < len(u.route) else 0.0
        return None

    def must_yield(self, v: Vehicle) -> bool:
        """Gap acceptance at the junction entry for vehicle `v`.

        Yields when the occupancy interval of any conflicting vehicle that has
        priority overlaps v's own (earliest arrival, latest clearance, plus a
        safety margin); also holds defensively when any conflicting vehicle is
        already inside the shared conflict region.
        """
        conn = self._connector_of(v)
        if conn is None or self.in_conflict_zone(v):
            return False
        if self.distance_to_conflict_zone(v) > self.config.yield_lookahead:
            return False
        margin = 1.5
        vmax_v = min(v.max_speed, self.graph[v.lane_id].speed_limit)
        for c in self.graph.lane_conflicts(conn.lane_id):
            if c.lane_a == conn.lane_id:
                my_w, other_id, ow = c.window_a, c.lane_b, c.window_b
            else:
                my_w, other_id, ow = c.window_b, c.lane_a, c.window_a
            other = self.graph[other_id]
            has_priority = not self._movement_must_yield(conn, other)
            d_my_in = self._route_distance(v, conn.lane_id, my_w[0])
            d_my_out = self._route_distance(v, conn.lane_id, my_w[1])
            if d_my_in is None:
                continue
            t_my_in = self._travel_time(d_my_in - v.length / 2, v.speed, vmax_v, True)
            t_my_out = self._travel_time((d_my_out or d_my_in) + v.length,
                                         v.speed, vmax_v, False)
            self._ensure_index()
            for u_vid in self._route_index.get(other_id, ()):
                if u_vid == v.vid:
                    continue
                u = self.vehicles[u_vid]
                d_u_in = self._route_distance(u, other_id, ow[0])
                if d_u_in is None:
                    continue
                inside = u.lane_id == other_id and \
                    ow[0] - u.length <= u.pos <= ow[1] + u.length
                if inside:
                    return True       # defensive hold, regardless of priority
                if has_priority:
                    continue
                d_u_out = self._route_distance(u, other_id, ow[1])
                vmax_u = min(u.max_speed, self.graph[u.lane_id].speed_limit)
                t_u_in = self._travel_time(d_u_in - u.length, u.speed, vmax_u, True)
                t_u_out = self._travel_time((d_u_out or d_u_in) + u.length,
                                            u.speed, vmax_u, False)
                if t_u_in - margin <= t_my_out and t_my_in <= t_u_out + margin:
                    return True
        return False

    def rule_based_control(self, v: Vehicle) -> float:
        """Car following plus yielding; bounded by comfort limits."""
        lead = self.leader_of(v)
        a = self._idm(v, lead[1], lead[0].speed) if lead else \
            self._idm(v, 1e6, v.speed)
        if self.must_yield(v):
            stop_gap = self.distance_to_conflict_zone(v) - self.config.idm_min_gap - 1.0
            a = min(a, self._idm(v, max(stop_gap, 0.05), 0.0))
        return a

    # -- stepping -----------------------------------------------------------

    def _ego_yield_context(self):
        ego = self.ego
        if ego is None:
            return None
        return (self.graph[ego.lane_id].road, self.must_yield(ego))

    def _advance(self, v: Vehicle, accel: float, dt: float, events: StepEvents) -> bool:
        """Integrate one vehicle; returns False when it left the scene."""
        v.brake_signal = accel < -0.5
        v.speed = float(np.clip(v.speed + accel * dt, 0.0, min(v.max_speed, SPEED_CAP)))
        v.pos += v.speed * dt
        while v.pos >= self.graph[v.lane_id].length:
            prev = self.graph[v.lane_id]
            v.pos -= prev.length
            v.route.pop(0)
            if not v.route:
                events.exited_vehicles.append(v.vid)
                return False
            v.pos += prev.offset_to(v.lane_id)
        return True

    def _ego_lane_change(self, action: int, events: StepEvents) -> None:
        ego = self.ego
        lane = self.graph[ego.lane_id]
        target = lane.right if action == CHANGE_RIGHT else lane.left
        if target is None or lane.in_intersection:
            events.illegal_lane_change = True
            return
        new_lane = self.graph[target]
        frac = ego.pos / max(lane.length, 1e-9)
        ego.route[:] = plan_route(self.graph, target, ego.turn)
        ego.pos = frac * new_lane.length
        ego.turn_signal = None
        self._index_dirty = True

    def step(self, action: Optional[int], dt: Optional[float] = None) -> StepEvents:
        """Advance the world one tick; `action` is the ego action (None = no ego)."""
        dt = dt or self.config.dt
        events = StepEvents()
        ego = self.ego
        accels = {}
        for u in self.vehicles.values():
            if u.controller == "rule":
                accels[u.vid] = self.rule_based_control(u)
        ego_accel = 0.0
        if ego is not None:
            if action is None or not 0 <= action < N_ACTIONS:
                raise ModelValidationError(f"invalid ego action {action!r}")
            if action in (CHANGE_RIGHT, CHANGE_LEFT):
                self._ego_lane_change(action, events)
            else:
                ego_accel = ACTION_ACCEL[action]
            ego.turn_signal = ego.turn if ego.turn in ("left", "right") and \
                self.distance_to_conflict_zone(ego) < 40.0 else None

        self._index_dirty = True
        for u in list(self.vehicles.values()):
            a = ego_accel if u.controller == "ego" else accels[u.vid]
            alive = self._advance(u, a, dt, events)
            if not alive:
                if u.controller == "ego":
                    events.ego_exited = True
                del self.vehicles[u.vid]

        self._detect_collisions(events)
        self.time += dt
        if ego is not None and not events.ego_exited and not events.collision \
                and self.time >= self.config.timeout:
            events.timeout = True

        if self.ego is not None:
            ctx = self._ego_yield_context()
            if self._ego_context is not None and ctx is not None:
                if ctx[0] != self._ego_context[0]:
                    events.road_change = True
                if ctx[1] != self._ego_context[1]:
                    events.right_of_way_change = True
            self._ego_context = ctx
            conn = self._connector_of(self.ego)
            lane = self.graph[self.ego.lane_id]
            if conn is not None and self.ego.turn is not None and \
                    not lane.in_intersection and conn.turn not in (self.ego.turn, "merge"):
                if self.distance_to_conflict_zone(self.ego) < 2.0:
                    events.wrong_lane_at_turn = True
        return events

    def _detect_collisions(self, events: StepEvents) -> None:
        vehicles = list(self.vehicles.values())
        hit = set()
        for i, a in enumerate(vehicles):
            for b in vehicles[i + 1:]:
                if a.lane_id == b.lane_id:
                    if abs(a.pos - b.pos) < (a.length + b.length) / 2:
                        hit.add((a.vid, b.vid))
                else:
                    for c in self.graph.lane_conflicts(a.lane_id):
                        pair = {c.lane_a, c.lane_b}
                        if pair != {a.lane_id, b.lane_id}:
                            continue
                        wa = c.window_a if c.lane_a == a.lane_id else c.window_b
                        wb = c.window_b if c.lane_b == b.lane_id else c.window_a
                        if wa[0] - a.length / 2 <= a.pos <= wa[1] + a.length / 2 and \
                                wb[0] - b.length / 2 <= b.pos <= wb[1] + b.length / 2:
                            hit.add((a.vid, b.vid))
        if not hit:
            return
        events.collision = True
        for va, vb in hit:
            if self.ego_id in (va, vb):
                events.collision_partner = vb if va == self.ego_id else va
        for vid in {v for pair in hit for v in pair}:
            self.vehicles.pop(vid, None)
        self._index_dirty = True


def plan_route(graph: LaneGraph, start_lane: str, turn: Optional[str]) -> list[str]:
    """Lane sequence from `start_lane` to scene exit.

    `turn` is honored where the current lane allows it, with a fallback to any
    legal movement (wrong-lane situations). A `turn` naming an exit lane means
    "stay on the ring until that exit"."""
    route = [start_lane]
    seen = {start_lane}
    lane = graph[start_lane]
    while lane.successors:
        if turn is not None and turn in lane.successors:
            nxt = lane.successors[turn]
        elif turn is not None and turn in lane.successors.values():
            nxt = turn
        elif "ring" in lane.successors and turn is not None and turn in graph.lanes:
            nxt = lane.successors["ring"]
        elif "straight" in lane.successors:
            nxt = lane.successors["straight"]
        else:
            nxt = sorted(lane.successors.values())[0]
        if nxt in seen:
            break
        route.append(nxt)
        seen.add(nxt)
        lane = graph[nxt]
    return route


def spawn_traffic(world: World, rng: Optional[np.random.Generator] = None) -> None:
    """One spawn tick: per entry lane, Bernoulli arrival scaled by the episode
    entry probability, inserted only when the entry headway is clear."""
    rng = rng or world.rng
    c = world.config
    p = world.p_entry * c.spawn_rate * c.dt
    for lane in sorted(world.graph.lanes.values(), key=lambda l: l.lane_id):
        if not lane.entry:
            continue
        if rng.random() >= p:
            continue
        if len(world.vehicles) >= c.max_vehicles:
            continue
        blocked = any(u.lane_id == lane.lane_id and u.pos < c.spawn_gap
                      for u in world.vehicles.values())
        if blocked:
            continue
        max_speed = float(np.clip(rng.normal(c.speed_mean, c.speed_sd), 4.0, SPEED_CAP))
        if world.graph.kind == "ring":
            exits = sorted(l for l in world.graph.lanes if l.startswith("exit_"))
            turn = exits[int(rng.integers(len(exits)))]
        else:
            turns = sorted(lane.successors.keys())
            turn = turns[int(rng.integers(len(turns)))] if turns else None
        route = plan_route(world.graph, lane.lane_id, turn)
        world.add_vehicle(route, 0.0, min(max_speed, lane.speed_limit) * 0.7,
                          max_speed, controller="rule", turn=turn)
