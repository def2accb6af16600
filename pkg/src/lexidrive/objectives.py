"""The four-objective driving stack: rule-based lane-change masking,
learned safety (with per-vehicle factored rewards), learned regulation,
and rule-based comfort-and-speed preference.

Objective order is fixed: lane_change, then safety, then regulation, then
comfort&speed. Lane change and comfort&speed are rules; safety and
regulation are reward functions for the learned Q heads.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import traffic
from .features import (TTC_CAP, EgoObservation, FeatureFrame,
                       has_priority_over_ego)
from .traffic import (CHANGE_LEFT, CHANGE_RIGHT, MAINTAIN, MAX_ACCEL,
                      MAX_DECEL, MED_ACCEL, MED_DECEL, MIN_ACCEL, MIN_DECEL,
                      StepEvents, World)

TTC_THRESHOLD = 3.0


@dataclass
class ObjectiveConfig:
    safety_gamma: float = 0.99
    regulation_gamma: float = 0.95
    safety_slack: float = -0.2
    regulation_slack: float = -0.2
    ttc_threshold: float = TTC_THRESHOLD
    collision_reward: float = -1.0
    yield_violation_reward: float = -1.0
    fail_to_proceed_reward: float = -0.02

    def __post_init__(self):
        if self.safety_slack > 0 or self.regulation_slack > 0:
            raise ValueError("slack must be non-positive")
        for g in (self.safety_gamma, self.regulation_gamma):
            if not 0.0 <= g < 1.0:
                raise ValueError("discount must be in [0, 1)")


# -- objective 1: lane change (rule) ----------------------------------------

def lane_change_admissible(ego: EgoObservation, prior: frozenset) -> frozenset:
    """Drop lane changes with no target lane, and any lane change inside
    the intersection. Throttle actions always survive."""
    out = set(prior)
    if ego.in_intersection_e or not ego.exist_left_lane_e:
        out.discard(CHANGE_LEFT)
    if ego.in_intersection_e or not ego.exist_right_lane_e:
        out.discard(CHANGE_RIGHT)
    return frozenset(out)


# -- objective 2: safety (learned, factored) --------------------------------

@dataclass
class SafetyOutcome:
    reward: float
    terminal: bool
    factored_rewards: np.ndarray    # (m,) aligned with prev frame slots
    factored_terminals: np.ndarray  # (m,) bool
    next_slot: np.ndarray           # (m,) slot of each vehicle in the new frame


def safety_reward(prev: FeatureFrame, cur: FeatureFrame | None,
                  events: StepEvents,
                  config: ObjectiveConfig | None = None) -> SafetyOutcome:
    """Collision, or any surrounding vehicle's time-to-collision dropping
    below the threshold while still decreasing, earns -1; otherwise 0.
    Factored rewards apply the same rule per tracked vehicle."""
    cfg = config or ObjectiveConfig()
    m = len(prev.vids)
    r_fact = np.zeros(m)
    t_fact = np.zeros(m, dtype=bool)
    next_slot = np.full(m, -1, dtype=np.int64)
    cur_slots = {}
    if cur is not None:
        cur_slots = {int(v): i for i, v in enumerate(cur.vids) if v >= 0}
    exited = set(events.exited_vehicles)
    for i in range(m):
        vid = int(prev.vids[i])
        if vid < 0:
            continue
        if events.collision and vid == events.collision_partner:
            r_fact[i] = cfg.collision_reward
            t_fact[i] = True
            continue
        if vid in exited or vid not in cur_slots:
            t_fact[i] = vid in exited
            continue
        j = cur_slots[vid]
        next_slot[i] = j
        ttc_prev = prev.vehicles[i].ttc
        ttc_now = cur.vehicles[j].ttc
        if ttc_now < cfg.ttc_threshold and ttc_now < ttc_prev:
            r_fact[i] = cfg.collision_reward
    fired = bool(events.collision or np.any(r_fact < 0))
    reward = cfg.collision_reward if fired else 0.0
    return SafetyOutcome(reward=reward, terminal=bool(events.collision),
                         factored_rewards=r_fact, factored_terminals=t_fact,
                         next_slot=next_slot)


# -- objective 3: regulation (learned) --------------------------------------

def _yield_violation(world: World, was_in_zone: bool,
                     threshold: float = TTC_THRESHOLD) -> bool:
    """Ego entered the conflict region while a prioritized vehicle was
    within `threshold` seconds of it."""
    ego = world.ego
    if ego is None or was_in_zone or not world.in_conflict_zone(ego):
        return False
    for u in world.vehicles.values():
        if u.vid == ego.vid or not has_priority_over_ego(world, ego, u):
            continue
        d = world.distance_to_conflict_zone(u)
        if d / max(u.speed, 0.5) < threshold:
            return True
    return False


def _fail_to_proceed(world: World) -> bool:
    ego = world.ego
    if ego is None or ego.speed > 0.5:
        return False
    if world.must_yield(ego):
        return False
    lead = world.leader_of(ego)
    return lead is None or lead[1] > world.config.idm_min_gap + 2.0


def wrong_lane_penalty(ego: EgoObservation) -> float:
    """Grows with lane offset and proximity to the junction, capped at 1."""
    if ego.lane_gap_e == 0:
        return 0.0
    proximity = float(np.clip(1.0 - ego.d_e / 100.0, 0.1, 1.0))
    return min(1.0, abs(ego.lane_gap_e) * proximity)


@dataclass
class RegulationOutcome:
    reward: float
    terminal: bool
    yield_violation: bool = False
    fail_to_proceed: bool = False
    wrong_lane: float = 0.0


def regulation_reward(world: World, ego_obs: EgoObservation,
                      events: StepEvents, was_in_zone: bool,
                      config: ObjectiveConfig | None = None
                      ) -> RegulationOutcome:
    cfg = config or ObjectiveConfig()
    yielded = _yield_violation(world, was_in_zone)
    stalled = _fail_to_proceed(world)
    wrong = wrong_lane_penalty(ego_obs)
    r = -wrong
    if yielded:
        r += cfg.yield_violation_reward
    if stalled:
        r += cfg.fail_to_proceed_reward
    terminal = bool(events.right_of_way_change or events.road_change
                    or events.collision)
    return RegulationOutcome(reward=max(r, -1.0), terminal=terminal,
                             yield_violation=yielded, fail_to_proceed=stalled,
                             wrong_lane=wrong)


# -- objective 4: comfort & speed (rule preference) -------------------------

_BELOW_LIMIT_ORDER = (MED_ACCEL, MIN_ACCEL, MAINTAIN, MIN_DECEL, MED_DECEL,
                      MAX_ACCEL, MAX_DECEL, CHANGE_LEFT, CHANGE_RIGHT)
_AT_LIMIT_ORDER = (MAINTAIN, MIN_DECEL, MIN_ACCEL, MED_DECEL, MED_ACCEL,
                   MAX_DECEL, MAX_ACCEL, CHANGE_LEFT, CHANGE_RIGHT)


def comfort_speed_ranking(ego: EgoObservation, speed_limit: float) -> tuple:
    return _BELOW_LIMIT_ORDER if ego.v_e < speed_limit else _AT_LIMIT_ORDER


def comfort_speed_select(admissible: frozenset, ego: EgoObservation,
                         speed_limit: float) -> int:
    """Highest-preference admissible action: gentle acceleration below the
    limit, hold speed at it; extremes and lane changes last."""
    if not admissible:
        raise ValueError("admissible set must be non-empty")
    for a in comfort_speed_ranking(ego, speed_limit):
        if a in admissible:
            return a
    return min(admissible)
