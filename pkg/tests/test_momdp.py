"""Tabular solver tests: validation, oracle equivalence, guarantees,
rectified baseline, bias demonstration, and Q-learning convergence."""
import numpy as np
import pytest

from lexidrive import momdp
from lexidrive.errors import ModelValidationError
from lexidrive.momdp import (MOMDP, LearningSchedule, admissible_mask,
                             best_values_per_level, enumeration_oracle,
                             greedy_admissible_sets,
                             lexicographic_value_iteration, load_momdp,
                             min_bias_gap, policy_value, random_momdp,
                             rectified_greedy_sets, rectified_value_iteration,
                             tabular_tlq_learning, verify_guarantee)


def small_momdp():
    # two states, two actions: action 1 pays less on objective 0 but more
    # on objective 1, within-slack at state 0 only
    p = np.zeros((2, 2, 2))
    p[:, 0, 0] = 1.0
    p[:, 1, 1] = 1.0
    r = np.array([
        [[1.0, 0.95], [1.0, 0.2]],
        [[0.0, 1.0], [0.0, 1.0]],
    ])
    return MOMDP(p, r, np.array([0.5, 0.5]))


class TestValidation:
    def test_rows_must_sum_to_one(self):
        p = np.full((2, 2, 2), 0.3)
        with pytest.raises(ModelValidationError):
            MOMDP(p, np.zeros((1, 2, 2)), np.array([0.9]))

    def test_discount_range(self):
        bad = small_momdp()
        with pytest.raises(ModelValidationError):
            MOMDP(bad.transition, bad.rewards, np.array([0.5, 1.0]))

    def test_shapes_checked(self):
        good = small_momdp()
        with pytest.raises(ModelValidationError):
            MOMDP(good.transition, good.rewards[:, :1], good.discounts)

    def test_slack_sign_rejected(self):
        with pytest.raises(ModelValidationError):
            lexicographic_value_iteration(small_momdp(), [0.1, -0.1])


class TestAdmissibleMask:
    def test_argmax_always_kept(self):
        q = np.array([[0.0, 10.0]])
        prior = np.ones((1, 2), dtype=bool)
        mask = admissible_mask(q, prior, -1e-9)
        assert mask[0, 1] and not mask[0, 0]

    def test_slack_widens(self):
        q = np.array([[0.0, 0.1]])
        mask = admissible_mask(q, np.ones((1, 2), dtype=bool), -0.2)
        assert mask.all()

    def test_prior_respected(self):
        q = np.array([[5.0, 0.0, 4.9]])
        prior = np.array([[False, True, True]])
        mask = admissible_mask(q, prior, -0.2)
        assert not mask[0, 0] and mask[0, 2]


class TestSmallInstance:
    def test_known_admissible_sets(self):
        problem = small_momdp()
        stack, sets = lexicographic_value_iteration(problem, [-0.2, -0.2])
        # state 0: both actions within 0.2 of the max on objective 0
        assert sets.level(1)[0].all()
        # state 1: action 1 pays 1.6 less discounted, excluded
        assert sets.level(1)[1].tolist() == [True, False]
        # objective 1 then prefers action 1 at state 0
        assert sets.level(2)[0].tolist() == [False, True]
        sets.check_nested()

    def test_q_against_hand_solution(self):
        problem = small_momdp()
        stack, _ = lexicographic_value_iteration(problem, [-0.2, -0.2])
        # objective 0: v*(s0)=2, v*(s1)=2 (geometric series of 1 at gamma .5)
        assert stack.q[0, 0, 0] == pytest.approx(2.0, abs=1e-8)
        assert stack.q[0, 1, 1] == pytest.approx(0.2 + 0.5 * 2.0, abs=1e-8)


class TestOracleEquivalence:
    @pytest.mark.parametrize("seed", range(12))
    def test_matches_enumeration(self, seed):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(1, 4))
        problem = random_momdp(rng, n_states=int(rng.integers(2, 6)),
                               n_actions=int(rng.integers(2, 4)),
                               n_objectives=k)
        slacks = -rng.uniform(0.05, 0.5, size=k)
        stack, sets = lexicographic_value_iteration(problem, slacks)
        oracle_stack, oracle_sets = enumeration_oracle(problem, slacks)
        assert np.array_equal(sets.masks, oracle_sets.masks)
        assert np.max(np.abs(stack.q - oracle_stack.q)) < 1e-6


class TestGuarantee:
    @pytest.mark.parametrize("seed", range(8))
    def test_inequality_holds(self, seed):
        rng = np.random.default_rng(100 + seed)
        problem = random_momdp(rng, 4, 3, 2)
        margin = verify_guarantee(problem, [-0.3, -0.3])
        assert margin >= -1e-6

    def test_bound_uses_previous_level(self):
        problem = small_momdp()
        _, sets = lexicographic_value_iteration(problem, [-0.2, -0.2])
        best = best_values_per_level(problem, sets)
        # level 0 best equals unrestricted optimum of objective 0
        assert best[0, 0] == pytest.approx(2.0, abs=1e-8)


class TestRectifiedBaseline:
    def test_rectified_caps_values(self):
        rng = np.random.default_rng(0)
        problem = random_momdp(rng, 4, 3, 2)
        floors = np.array([1.0, 1.0])
        stack = rectified_value_iteration(problem, floors)
        assert (stack.q <= floors[:, None, None] + 1e-9).all()

    def test_rectified_sets_nonempty(self):
        rng = np.random.default_rng(1)
        problem = random_momdp(rng, 4, 3, 2)
        sets = rectified_greedy_sets(problem, [0.5, 0.5])
        assert sets.masks.any(axis=2).all()

    def test_min_bias_is_positive_and_significant(self):
        rng = np.random.default_rng(2)
        gap, se = min_bias_gap(-0.2, rng.normal(-0.2, 0.5, size=20_000))
        assert gap > 3 * se > 0


class TestTabularLearning:
    def test_matches_oracle_on_benchmark(self):
        rng = np.random.default_rng(7)
        problem = random_momdp(rng, 5, 3, 2, deterministic=False)
        slacks = np.array([-0.3, -0.3])
        _, oracle_sets = lexicographic_value_iteration(problem, slacks)
        schedule = LearningSchedule(alpha0=0.5, alpha_decay=2e-4,
                                    epsilon=0.3, restart_prob=0.05)
        stack = tabular_tlq_learning(problem, slacks, schedule, 150_000,
                                     np.random.default_rng(8))
        learned = greedy_admissible_sets(stack)
        agree = (learned.masks == oracle_sets.masks).all(axis=2).mean()
        assert agree >= 0.95


class TestPolicyValue:
    def test_linear_solve_matches_iteration(self):
        problem = small_momdp()
        v = policy_value(problem, np.array([0, 0]))
        assert v[0] == pytest.approx([2.0, 2.0], abs=1e-9)
        assert v[1] == pytest.approx([0.0, 0.0], abs=1e-9)


class TestFileFormat:
    def test_round_trip(self, tmp_path):
        problem = small_momdp()
        lines = ["2 2 2", "0.5 0.5"]
        for s in range(2):
            for a in range(2):
                lines.append(" ".join(str(x) for x in problem.transition[s, a]))
        for i in range(2):
            for s in range(2):
                lines.append(" ".join(str(x) for x in problem.rewards[i, s]))
        path = tmp_path / "problem.momdp"
        path.write_text("# comment\n" + "\n".join(lines) + "\n")
        loaded = load_momdp(path)
        assert np.allclose(loaded.transition, problem.transition)
        assert np.allclose(loaded.rewards, problem.rewards)

    def test_malformed_rejected(self, tmp_path):
        path = tmp_path / "bad.momdp"
        path.write_text("2 2 1\n0.5\n1 0\n")
        with pytest.raises(ModelValidationError):
            load_momdp(path)
