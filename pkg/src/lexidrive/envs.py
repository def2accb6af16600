"""Episode wrapper around the traffic simulator.

Each episode draws a traffic entry probability, pre-rolls background
traffic, spawns the ego on a random route, and then exposes a step
interface that returns featurized observations together with the safety
and regulation objective outcomes needed to build training transitions.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import traffic
from .features import FeatureFrame, featurize
from .objectives import (ObjectiveConfig, RegulationOutcome, SafetyOutcome,
                         regulation_reward, safety_reward)
from .traffic import SimConfig, StepEvents, World

CROSS_TURNS = ("left", "straight", "right")


@dataclass
class EpisodeConfig:
    map_kind: str = "cross"
    m_slots: int = 8
    sim: SimConfig = field(default_factory=SimConfig)
    objectives: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    pre_roll_steps: int = 40
    min_entry_prob: float = 0.05


@dataclass
class StepResult:
    frame: Optional[FeatureFrame]   # next observation; None once the ego is gone
    events: StepEvents
    safety: SafetyOutcome
    regulation: RegulationOutcome
    done: bool
    cause: Optional[str]            # collision | route-complete | timeout


class DrivingEpisode:
    """One ego-centric episode; `reset` draws a fresh scenario."""

    def __init__(self, config: EpisodeConfig, seed: int):
        self.config = config
        self.rng = np.random.default_rng(seed)
        self.graph = traffic.build_map(config.map_kind)
        self._entries = sorted(l.lane_id for l in self.graph.lanes.values()
                               if l.entry)
        self._exits = sorted(set(r[-1] for r in self.graph.routes()))
        self.world: Optional[World] = None
        self.frame: Optional[FeatureFrame] = None
        self._was_in_zone = False
        self._yielded = False

    def _ego_route(self, world: World) -> tuple[list, Optional[str]]:
        entry = self._entries[self.rng.integers(len(self._entries))]
        if self.config.map_kind == "cross":
            turn = CROSS_TURNS[self.rng.integers(len(CROSS_TURNS))]
        else:
            turn = self._exits[self.rng.integers(len(self._exits))]
        return traffic.plan_route(self.graph, entry, turn), turn

    def reset(self) -> FeatureFrame:
        cfg = self.config
        world = World(self.graph, cfg.sim,
                      seed=int(self.rng.integers(2 ** 31)))
        world.p_entry = float(self.rng.uniform(cfg.min_entry_prob,
                                               cfg.sim.max_entry_prob))
        for _ in range(cfg.pre_roll_steps):
            traffic.spawn_traffic(world)
            world.step(None)
        route, turn = self._ego_route(world)
        speed = float(np.clip(self.rng.normal(cfg.sim.speed_mean,
                                              cfg.sim.speed_sd), 3.0,
                              traffic.SPEED_CAP))
        world._ensure_index()
        lead = None
        for pos, vid in world._by_lane.get(route[0], []):
            lead = pos if lead is None else min(lead, pos)
        start = 0.0
        if lead is not None and lead < cfg.sim.spawn_gap:
            for u in [u for u in world.vehicles.values()
                      if u.lane_id == route[0]]:
                del world.vehicles[u.vid]
            world._index_dirty = True
        world.add_vehicle(route, start, speed, max_speed=speed,
                          controller="ego", turn=turn)
        self.world = world
        self.frame = featurize(world, cfg.m_slots)
        self._was_in_zone = world.in_conflict_zone(world.ego)
        self._yielded = False
        return self.frame

    def step(self, action: int) -> StepResult:
        world = self.world
        if world is None or self.frame is None:
            raise RuntimeError("episode not reset")
        prev = self.frame
        was_in_zone = self._was_in_zone
        traffic.spawn_traffic(world)
        events = world.step(int(action))
        ego = world.ego
        frame = featurize(world, self.config.m_slots) if ego is not None else None
        safety = safety_reward(prev, frame, events, self.config.objectives)
        ego_obs = frame.ego if frame is not None else prev.ego
        regulation = regulation_reward(world, ego_obs, events, was_in_zone,
                                       self.config.objectives)
        cause = events.terminal_cause
        if ego is not None:
            self._was_in_zone = world.in_conflict_zone(ego)
        self.frame = frame
        return StepResult(frame=frame, events=events, safety=safety,
                          regulation=regulation, done=cause is not None,
                          cause=cause)

    @property
    def speed_limit(self) -> float:
        ego = self.world.ego if self.world else None
        if ego is None:
            return traffic.SPEED_CAP
        return min(ego.max_speed, self.graph[ego.lane_id].speed_limit)
