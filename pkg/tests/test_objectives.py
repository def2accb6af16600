"""Objective-level tests: lane-change masking, the safety reward and its
per-vehicle factored decomposition, the regulation reward components, and
the comfort-and-speed preference rule."""
import dataclasses

import numpy as np
import pytest

from lexidrive.features import (TopologicalRelation, EgoObservation,
                                FeatureFrame, VehicleObservation, featurize)
from lexidrive.objectives import (ObjectiveConfig, RegulationOutcome,
                                  comfort_speed_select, lane_change_admissible,
                                  regulation_reward, safety_reward,
                                  wrong_lane_penalty)
from lexidrive.traffic import (CHANGE_LEFT, CHANGE_RIGHT, MAINTAIN, MAX_ACCEL,
                               MED_ACCEL, MIN_DECEL, N_ACTIONS, SimConfig,
                               StepEvents, World, build_map, plan_route)

ALL_ACTIONS = frozenset(range(N_ACTIONS))


def ego_obs(v_e=8.0, d_e=50.0, in_intersection=False, left=True, right=True,
            gap=0):
    return EgoObservation(v_e, d_e, in_intersection, left, right, gap)


def frame_with(ttcs, m=4):
    """A frame with one tracked vehicle per entry of `ttcs`."""
    vehicles, mask, vids = [], np.zeros(m, dtype=bool), np.full(m, -1)
    for i, ttc in enumerate(ttcs):
        obs = dataclasses.replace(VehicleObservation.absent(),
                                  exist_vehicle=True, ttc=ttc,
                                  relation=TopologicalRelation.AHEAD)
        vehicles.append(obs)
        mask[i] = True
        vids[i] = 100 + i
    vehicles += [VehicleObservation.absent()] * (m - len(ttcs))
    veh_mat = np.stack([o.vector() for o in vehicles])
    ego = ego_obs()
    return FeatureFrame(ego, vehicles, mask, vids.astype(np.int64),
                        ego.vector(), veh_mat)


class TestLaneChange:
    def test_full_set_when_both_neighbors_exist(self):
        out = lane_change_admissible(ego_obs(left=True, right=True),
                                     ALL_ACTIONS)
        assert out == ALL_ACTIONS

    def test_missing_left_lane_drops_change_left(self):
        out = lane_change_admissible(ego_obs(left=False), ALL_ACTIONS)
        assert out == ALL_ACTIONS - {CHANGE_LEFT}

    def test_missing_right_lane_drops_change_right(self):
        out = lane_change_admissible(ego_obs(right=False), ALL_ACTIONS)
        assert out == ALL_ACTIONS - {CHANGE_RIGHT}

    def test_intersection_drops_both(self):
        out = lane_change_admissible(ego_obs(in_intersection=True),
                                     ALL_ACTIONS)
        assert out == ALL_ACTIONS - {CHANGE_LEFT, CHANGE_RIGHT}

    def test_throttle_actions_always_survive(self):
        out = lane_change_admissible(
            ego_obs(in_intersection=True, left=False, right=False),
            ALL_ACTIONS)
        assert out == ALL_ACTIONS - {CHANGE_LEFT, CHANGE_RIGHT}

    def test_respects_prior_restriction(self):
        prior = frozenset({MAINTAIN, CHANGE_LEFT})
        out = lane_change_admissible(ego_obs(left=False), prior)
        assert out == frozenset({MAINTAIN})


class TestSafetyReward:
    def test_quiet_step_is_zero(self):
        out = safety_reward(frame_with([8.0]), frame_with([8.0]),
                            StepEvents())
        assert out.reward == 0.0
        assert not out.terminal
        assert (out.factored_rewards == 0).all()

    def test_ttc_below_threshold_and_decreasing_fires(self):
        out = safety_reward(frame_with([2.8]), frame_with([2.5]),
                            StepEvents())
        assert out.reward == -1.0
        assert out.factored_rewards[0] == -1.0
        assert not out.terminal     # proximity alone does not end the episode

    def test_ttc_below_threshold_but_increasing_does_not_fire(self):
        out = safety_reward(frame_with([2.0]), frame_with([2.5]),
                            StepEvents())
        assert out.reward == 0.0
        assert (out.factored_rewards == 0).all()

    def test_ttc_decreasing_above_threshold_does_not_fire(self):
        out = safety_reward(frame_with([8.0]), frame_with([5.0]),
                            StepEvents())
        assert out.reward == 0.0

    def test_collision_penalizes_partner_slot_only(self):
        prev = frame_with([8.0, 8.0])
        cur = frame_with([8.0, 8.0])
        ev = StepEvents(collision=True, collision_partner=101)
        out = safety_reward(prev, cur, ev)
        assert out.reward == -1.0
        assert out.terminal
        assert out.factored_rewards.tolist() == [0.0, -1.0, 0.0, 0.0]
        assert out.factored_terminals.tolist() == [False, True, False, False]

    def test_exited_vehicle_terminal_without_penalty(self):
        prev = frame_with([8.0])
        cur = frame_with([])
        ev = StepEvents(exited_vehicles=[100])
        out = safety_reward(prev, cur, ev)
        assert out.factored_rewards[0] == 0.0
        assert out.factored_terminals[0]
        assert out.next_slot[0] == -1

    def test_next_slot_follows_vehicle_across_reordering(self):
        prev = frame_with([5.0, 6.0])            # vids 100, 101
        cur = frame_with([6.0, 5.0])
        cur.vids[:] = -1
        cur.vids[0], cur.vids[1] = 101, 100      # swapped slots
        out = safety_reward(prev, cur, StepEvents())
        assert out.next_slot.tolist() == [1, 0, -1, -1]

    def test_main_reward_matches_factored_any(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            k = int(rng.integers(0, 4))
            prev = frame_with(list(rng.uniform(1, 10, size=k)))
            cur = frame_with(list(rng.uniform(1, 10, size=k)))
            out = safety_reward(prev, cur, StepEvents())
            fired = bool((out.factored_rewards < 0).any())
            assert (out.reward == -1.0) == fired
            assert -1.0 <= out.reward <= 0.0

    def test_absent_slots_untouched(self):
        out = safety_reward(frame_with([2.8]), frame_with([2.5]),
                            StepEvents())
        assert (out.factored_rewards[1:] == 0).all()
        assert not out.factored_terminals[1:].any()
        assert (out.next_slot[1:] == -1).all()


class TestWrongLane:
    def test_zero_in_correct_lane(self):
        assert wrong_lane_penalty(ego_obs(gap=0, d_e=1.0)) == 0.0

    def test_scales_with_proximity(self):
        far = wrong_lane_penalty(ego_obs(gap=1, d_e=90.0))
        near = wrong_lane_penalty(ego_obs(gap=1, d_e=10.0))
        assert near == pytest.approx(0.9)
        assert far == pytest.approx(0.1)
        assert near > far

    def test_floor_when_very_far(self):
        assert wrong_lane_penalty(ego_obs(gap=1, d_e=500.0)) \
            == pytest.approx(0.1)

    def test_capped_at_one(self):
        assert wrong_lane_penalty(ego_obs(gap=3, d_e=0.0)) == 1.0


class TestRegulationReward:
    @pytest.fixture()
    def world(self):
        graph = build_map("cross")
        w = World(graph, SimConfig(), seed=0)
        route = plan_route(graph, "E_in_0", "straight")
        w.add_vehicle(route, 0.0, 8.0, max_speed=12.0, controller="ego",
                      turn="straight")
        return w

    def test_clean_step_zero(self, world):
        out = regulation_reward(world, ego_obs(), StepEvents(), False)
        assert out.reward == 0.0
        assert not out.terminal

    def test_terminal_on_right_of_way_change(self, world):
        out = regulation_reward(world, ego_obs(),
                                StepEvents(right_of_way_change=True), False)
        assert out.terminal

    def test_terminal_on_road_change(self, world):
        out = regulation_reward(world, ego_obs(),
                                StepEvents(road_change=True), False)
        assert out.terminal

    def test_terminal_on_collision(self, world):
        out = regulation_reward(world, ego_obs(),
                                StepEvents(collision=True), False)
        assert out.terminal

    def test_fail_to_proceed_when_stopped_on_clear_road(self, world):
        world.ego.speed = 0.0
        out = regulation_reward(world, ego_obs(v_e=0.0), StepEvents(), False)
        assert out.fail_to_proceed
        assert out.reward == pytest.approx(-0.02)

    def test_no_stall_penalty_while_moving(self, world):
        out = regulation_reward(world, ego_obs(), StepEvents(), False)
        assert not out.fail_to_proceed

    def test_yield_violation_on_zone_entry_with_prioritized_traffic(self):
        graph = build_map("cross")
        world = World(graph, SimConfig(), seed=1)
        # ego turning left from the inner lane must yield to oncoming traffic
        ego_route = plan_route(graph, "E_in_1", "left")
        conn = [l for l in ego_route if graph[l].in_intersection][0]
        ego = world.add_vehicle([conn] + ego_route[ego_route.index(conn) + 1:],
                                0.5, 6.0, max_speed=12.0, controller="ego",
                                turn="left")
        assert world.in_conflict_zone(ego)
        onc_route = plan_route(graph, "W_in_0", "straight")
        world.add_vehicle(onc_route, graph["W_in_0"].length - 8.0, 8.0,
                          max_speed=12.0)
        out = regulation_reward(world, ego_obs(in_intersection=True),
                                StepEvents(), was_in_zone=False)
        assert out.yield_violation
        assert out.reward == -1.0

    def test_no_violation_when_already_in_zone(self):
        graph = build_map("cross")
        world = World(graph, SimConfig(), seed=1)
        ego_route = plan_route(graph, "E_in_1", "left")
        conn = [l for l in ego_route if graph[l].in_intersection][0]
        world.add_vehicle([conn] + ego_route[ego_route.index(conn) + 1:],
                          0.5, 6.0, max_speed=12.0, controller="ego",
                          turn="left")
        onc_route = plan_route(graph, "W_in_0", "straight")
        world.add_vehicle(onc_route, graph["W_in_0"].length - 8.0, 8.0,
                          max_speed=12.0)
        out = regulation_reward(world, ego_obs(in_intersection=True),
                                StepEvents(), was_in_zone=True)
        assert not out.yield_violation

    def test_reward_clamped_to_minus_one(self, world):
        world.ego.speed = 0.0
        out = regulation_reward(world, ego_obs(v_e=0.0, gap=3, d_e=0.0),
                                StepEvents(), False)
        assert out.reward == -1.0

    def test_reward_always_in_unit_interval(self, world):
        rng = np.random.default_rng(2)
        for _ in range(100):
            obs = ego_obs(v_e=float(rng.uniform(0, 20)),
                          d_e=float(rng.uniform(0, 120)),
                          gap=int(rng.integers(-2, 3)))
            out = regulation_reward(world, obs, StepEvents(), False)
            assert -1.0 <= out.reward <= 0.0


class TestComfortSpeed:
    def test_below_limit_prefers_gentle_accel(self):
        a = comfort_speed_select(ALL_ACTIONS, ego_obs(v_e=5.0), 10.0)
        assert a == MED_ACCEL

    def test_at_limit_prefers_maintain(self):
        a = comfort_speed_select(ALL_ACTIONS, ego_obs(v_e=10.0), 10.0)
        assert a == MAINTAIN

    def test_falls_through_to_next_preference(self):
        allowed = frozenset({MIN_DECEL, MAX_ACCEL, CHANGE_LEFT})
        assert comfort_speed_select(allowed, ego_obs(v_e=10.0), 10.0) \
            == MIN_DECEL

    def test_lane_changes_are_last_resort(self):
        allowed = frozenset({CHANGE_LEFT, CHANGE_RIGHT})
        assert comfort_speed_select(allowed, ego_obs(v_e=5.0), 10.0) \
            == CHANGE_LEFT

    def test_empty_set_raises(self):
        with pytest.raises(ValueError):
            comfort_speed_select(frozenset(), ego_obs(), 10.0)

    def test_total_over_all_singletons(self):
        for a in range(N_ACTIONS):
            assert comfort_speed_select(frozenset({a}), ego_obs(), 10.0) == a


class TestConfigValidation:
    def test_positive_slack_rejected(self):
        with pytest.raises(ValueError):
            ObjectiveConfig(safety_slack=0.1)

    def test_discount_of_one_rejected(self):
        with pytest.raises(ValueError):
            ObjectiveConfig(regulation_gamma=1.0)
