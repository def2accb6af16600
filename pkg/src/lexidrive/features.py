"""Featurization of simulator state into the driving observation space.

Produces an ego observation, a fixed number of per-vehicle observation
slots (nearest first), and per-objective views of the resulting vectors.
Also houses the topological-relation classifier and the time-to-collision
estimate that the safety reward is built on.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .traffic import Lane, Vehicle, World

TTC_CAP = 10.0
DIST_CAP = 100.0
SPEED_NORM = 20.0
SIGNAL_RANGE = 40.0        # turn signals light up this far from the junction


class TopologicalRelation(Enum):
    IRRELEVANT = 0
    AHEAD = 1
    BEHIND = 2
    LEFT = 3
    RIGHT = 4
    MERGE = 5
    CROSSING = 6


N_RELATIONS = len(TopologicalRelation)

EGO_DIM = 6        # v, d, in_intersection, exist_left, exist_right, lane_gap
VEH_DIM = 14 + N_RELATIONS   # scalar block + relation one-hot


@dataclass
class EgoObservation:
    v_e: float
    d_e: float
    in_intersection_e: bool
    exist_left_lane_e: bool
    exist_right_lane_e: bool
    lane_gap_e: int

    def vector(self) -> np.ndarray:
        return np.array([
            self.v_e / SPEED_NORM,
            self.d_e / DIST_CAP,
            float(self.in_intersection_e),
            float(self.exist_left_lane_e),
            float(self.exist_right_lane_e),
            float(self.lane_gap_e),
        ])


@dataclass
class VehicleObservation:
    exist_vehicle: bool
    v: float                   # speed relative to ego
    d: float                   # its own distance to the junction
    in_intersection: bool
    exist_left_lane: bool
    exist_right_lane: bool
    x: float                   # position in ego frame
    y: float
    theta: float               # heading relative to ego
    has_priority: bool
    ttc: float
    brake_signal: bool
    turn_signal_left: bool
    turn_signal_right: bool
    relation: TopologicalRelation

    @classmethod
    def absent(cls) -> "VehicleObservation":
        return cls(False, 0.0, 0.0, False, False, False, 0.0, 0.0, 0.0,
                   False, 0.0, False, False, False,
                   TopologicalRelation.IRRELEVANT)

    def vector(self) -> np.ndarray:
        vec = np.zeros(VEH_DIM)
        vec[:14] = [
            float(self.exist_vehicle),
            self.v / SPEED_NORM,
            self.d / DIST_CAP,
            float(self.in_intersection),
            float(self.exist_left_lane),
            float(self.exist_right_lane),
            self.x / DIST_CAP,
            self.y / DIST_CAP,
            self.theta / np.pi,
            float(self.has_priority),
            self.ttc / TTC_CAP,
            float(self.brake_signal),
            float(self.turn_signal_left),
            float(self.turn_signal_right),
        ]
        if self.exist_vehicle:
            vec[14 + self.relation.value] = 1.0
        return vec


@dataclass
class FeatureFrame:
    """One featurized step: structured observations plus flat vectors."""
    ego: EgoObservation
    vehicles: list
    mask: np.ndarray           # (m,) bool
    vids: np.ndarray           # (m,) int, -1 for empty slots
    ego_vec: np.ndarray        # (EGO_DIM,)
    veh_mat: np.ndarray        # (m, VEH_DIM)


# -- geometry helpers --------------------------------------------------------

def _junction_lane(graph, v: Vehicle) -> Lane | None:
    for lane_id in v.route:
        lane = graph[lane_id]
        if lane.in_intersection or lane.turn == "merge":
            return lane
    return None


def distance_to_junction(world: World, v: Vehicle, cap: float = DIST_CAP) -> float:
    """Route distance to the start of the junction region (0 when inside)."""
    lane = world.graph[v.lane_id]
    if lane.in_intersection or lane.turn == "merge":
        return 0.0
    dist = 0.0
    pos = v.pos
    for j, lane_id in enumerate(v.route):
        cur = world.graph[lane_id]
        if cur.in_intersection or cur.turn == "merge":
            return min(dist, cap)
        dist += cur.length - pos
        if dist >= cap:
            return cap
        pos = cur.offset_to(v.route[j + 1]) if j + 1 < len(v.route) else 0.0
    return cap


def _lane_allows_turn(lane: Lane, turn) -> bool:
    if turn is None:
        return True
    return turn in lane.successors or turn in lane.successors.values()


def lane_gap(graph, v: Vehicle) -> int:
    """Signed lane-change count to the nearest lane serving the vehicle's
    intended movement; positive means the correct lane is to the left."""
    lane = graph[v.lane_id]
    if lane.in_intersection or _lane_allows_turn(lane, v.turn):
        return 0
    for step in range(1, 8):
        probe = lane
        for _ in range(step):
            probe = graph[probe.left] if probe.left else None
            if probe is None:
                break
        if probe is not None and _lane_allows_turn(probe, v.turn):
            return step
        probe = lane
        for _ in range(step):
            probe = graph[probe.right] if probe.right else None
            if probe is None:
                break
        if probe is not None and _lane_allows_turn(probe, v.turn):
            return -step
    return 0


# -- topological relation ----------------------------------------------------

def classify_relation(graph, ego: Vehicle, other: Vehicle) -> TopologicalRelation:
    """Route relation of `other` to `ego` (total over both maps)."""
    e_lane, o_lane = ego.lane_id, other.lane_id
    if e_lane == o_lane:
        if other.pos == ego.pos:
            return TopologicalRelation.AHEAD if other.vid > ego.vid \
                else TopologicalRelation.BEHIND
        return TopologicalRelation.AHEAD if other.pos > ego.pos \
            else TopologicalRelation.BEHIND
    if o_lane in ego.route[1:]:
        return TopologicalRelation.AHEAD
    if e_lane in other.route[1:]:
        return TopologicalRelation.BEHIND
    cur = graph[e_lane]
    if cur.left == o_lane:
        return TopologicalRelation.LEFT
    if cur.right == o_lane:
        return TopologicalRelation.RIGHT
    crossing = False
    other_lanes = set(other.route)
    for lane_id in ego.route:
        for c in graph.lane_conflicts(lane_id):
            partner = c.lane_b if c.lane_a == lane_id else c.lane_a
            if partner in other_lanes:
                if c.kind == "cross":
                    crossing = True
                else:
                    return TopologicalRelation.MERGE
    if crossing:
        return TopologicalRelation.CROSSING
    if set(ego.route[1:]) & set(other.route[1:]):
        return TopologicalRelation.MERGE
    return TopologicalRelation.IRRELEVANT


# -- time to collision -------------------------------------------------------

def _interval(world, v: Vehicle, lane_id: str, window) -> tuple | None:
    """Constant-speed occupancy interval of `v` over a conflict window."""
    d_in = world._route_distance(v, lane_id, window[0])
    d_out = world._route_distance(v, lane_id, window[1])
    if d_in is None:
        return None
    speed = max(v.speed, 0.3)
    t_in = max(d_in - v.length / 2, 0.0) / speed
    t_out = ((d_out if d_out is not None else d_in) + v.length / 2) / speed
    return (t_in, t_out)


def compute_ttc(world: World, ego: Vehicle, other: Vehicle) -> float:
    """Seconds until the pair would collide under current motion.

    Same-path vehicles use gap over closing speed; conflicting paths use
    the overlap of constant-speed arrival intervals at the shared conflict
    window. TTC_CAP when receding or undefined.
    """
    rel = classify_relation(world.graph, ego, other)
    if rel in (TopologicalRelation.AHEAD, TopologicalRelation.BEHIND):
        if rel is TopologicalRelation.AHEAD:
            trailing, leading = ego, other
        else:
            trailing, leading = other, ego
        gap = world._route_distance(trailing, leading.lane_id, leading.pos)
        if gap is None:
            return TTC_CAP
        gap -= (trailing.length + leading.length) / 2
        closing = trailing.speed - leading.speed
        if closing <= 1e-6:
            return TTC_CAP
        return float(np.clip(max(gap, 0.0) / closing, 1e-3, TTC_CAP))
    if rel in (TopologicalRelation.CROSSING, TopologicalRelation.MERGE):
        best = TTC_CAP
        other_lanes = set(other.route)
        for lane_id in ego.route:
            for c in world.graph.lane_conflicts(lane_id):
                if c.lane_a == lane_id:
                    my_w, partner, their_w = c.window_a, c.lane_b, c.window_b
                else:
                    my_w, partner, their_w = c.window_b, c.lane_a, c.window_a
                if partner not in other_lanes:
                    continue
                mine = _interval(world, ego, lane_id, my_w)
                theirs = _interval(world, other, partner, their_w)
                if mine is None or theirs is None:
                    continue
                if mine[0] <= theirs[1] and theirs[0] <= mine[1]:
                    best = min(best, max(mine[0], theirs[0]))
        return float(np.clip(best, 1e-3, TTC_CAP))
    return TTC_CAP


# -- priority and signals ----------------------------------------------------

def has_priority_over_ego(world: World, ego: Vehicle, other: Vehicle) -> bool:
    """Right-of-way of `other` relative to ego: map priority relation at the
    junction, with vehicles already inside the conflict region prioritized."""
    if world.in_conflict_zone(other) and not world.in_conflict_zone(ego):
        return True
    ego_conn = world._connector_of(ego)
    other_conn = world._connector_of(other)
    if ego_conn is None or other_conn is None:
        return False
    return world._movement_must_yield(ego_conn, other_conn)


def _turn_signal(world: World, v: Vehicle) -> str | None:
    conn = _junction_lane(world.graph, v)
    if conn is None or conn.turn not in ("left", "right"):
        return None
    if distance_to_junction(world, v) <= SIGNAL_RANGE:
        return conn.turn
    return None


# -- featurize ---------------------------------------------------------------

def observe_ego(world: World, ego: Vehicle) -> EgoObservation:
    lane = world.graph[ego.lane_id]
    return EgoObservation(
        v_e=ego.speed,
        d_e=distance_to_junction(world, ego),
        in_intersection_e=lane.in_intersection,
        exist_left_lane_e=lane.left is not None,
        exist_right_lane_e=lane.right is not None,
        lane_gap_e=lane_gap(world.graph, ego),
    )


def observe_vehicle(world: World, ego: Vehicle, other: Vehicle,
                    rel_pose: tuple) -> VehicleObservation:
    lane = world.graph[other.lane_id]
    signal = _turn_signal(world, other)
    return VehicleObservation(
        exist_vehicle=True,
        v=other.speed - ego.speed,
        d=distance_to_junction(world, other),
        in_intersection=lane.in_intersection,
        exist_left_lane=lane.left is not None,
        exist_right_lane=lane.right is not None,
        x=rel_pose[0],
        y=rel_pose[1],
        theta=rel_pose[2],
        has_priority=has_priority_over_ego(world, ego, other),
        ttc=compute_ttc(world, ego, other),
        brake_signal=other.brake_signal,
        turn_signal_left=signal == "left",
        turn_signal_right=signal == "right",
        relation=classify_relation(world.graph, ego, other),
    )


def featurize(world: World, m_slots: int) -> FeatureFrame:
    """Observe the world from the ego vehicle: ego features plus the
    `m_slots` nearest vehicles sorted by distance (ties broken by id)."""
    ego = world.ego
    if ego is None:
        raise ValueError("featurize requires a live ego vehicle")
    ex, ey, eh = world.pose(ego)
    cos_h, sin_h = np.cos(-eh), np.sin(-eh)
    ranked = []
    for u in world.vehicles.values():
        if u.vid == ego.vid:
            continue
        ux, uy, uh = world.pose(u)
        dx, dy = ux - ex, uy - ey
        rx = dx * cos_h - dy * sin_h
        ry = dx * sin_h + dy * cos_h
        theta = (uh - eh + np.pi) % (2 * np.pi) - np.pi
        ranked.append((float(np.hypot(dx, dy)), u.vid, u, (rx, ry, theta)))
    ranked.sort(key=lambda r: (r[0], r[1]))

    ego_obs = observe_ego(world, ego)
    vehicles = []
    mask = np.zeros(m_slots, dtype=bool)
    vids = np.full(m_slots, -1, dtype=np.int64)
    veh_mat = np.zeros((m_slots, VEH_DIM))
    for slot, (_, vid, u, pose) in enumerate(ranked[:m_slots]):
        obs = observe_vehicle(world, ego, u, pose)
        vehicles.append(obs)
        mask[slot] = True
        vids[slot] = vid
        veh_mat[slot] = obs.vector()
    while len(vehicles) < m_slots:
        vehicles.append(VehicleObservation.absent())
    return FeatureFrame(ego=ego_obs, vehicles=vehicles, mask=mask, vids=vids,
                        ego_vec=ego_obs.vector(), veh_mat=veh_mat)


# -- per-objective views -----------------------------------------------------

_SAFETY_VEH_COLS = np.array([i for i in range(VEH_DIM) if i != 9])  # drop priority
_SAFETY_EGO_COLS = np.array([0, 1, 2, 3, 4])                        # drop lane gap

SAFETY_EGO_DIM = len(_SAFETY_EGO_COLS)
SAFETY_VEH_DIM = len(_SAFETY_VEH_COLS)
REGULATION_EGO_DIM = 4
REGULATION_VEH_DIM = 1


def safety_view(frame: FeatureFrame):
    """Full observation minus the lane-gap and right-of-way features."""
    return (frame.ego_vec[_SAFETY_EGO_COLS],
            frame.veh_mat[:, _SAFETY_VEH_COLS],
            frame.mask)


def regulation_view(frame: FeatureFrame):
    """Right-of-way flags per vehicle plus the ego's lane/approach state."""
    ego = frame.ego_vec[np.array([0, 1, 2, 5])]   # v, d, in_intersection, lane gap
    veh = frame.veh_mat[:, 9:10]                  # has_priority
    return (ego, veh, frame.mask)
