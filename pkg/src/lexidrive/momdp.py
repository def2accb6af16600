"""Tabular multi-objective MDPs, exact lexicographic solvers, and brute-force oracles.

Everything here works on small dense models and exists mostly to anchor the deep
components: the solvers are the ground truth that the sampled/approximate paths
are tested against.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, ModelValidationError

MAX_SWEEPS = 10_000
ENUMERATION_CAP = 100_000


@dataclass(frozen=True)
class MOMDP:
    """Finite MDP with k reward/discount pairs in priority order (index 0 first)."""

    transition: np.ndarray  # (S, A, S), rows stochastic
    rewards: np.ndarray     # (k, S, A)
    discounts: np.ndarray   # (k,)

    def __post_init__(self):
        object.__setattr__(self, "transition", np.asarray(self.transition, dtype=float))
        object.__setattr__(self, "rewards", np.asarray(self.rewards, dtype=float))
        object.__setattr__(self, "discounts", np.asarray(self.discounts, dtype=float))
        if self.transition.ndim != 3 or self.transition.shape[0] != self.transition.shape[2]:
            raise ModelValidationError(f"transition must be (S, A, S), got {self.transition.shape}")
        if self.rewards.ndim != 3 or self.rewards.shape[1:] != self.transition.shape[:2]:
            raise ModelValidationError(
                f"rewards must be (k, S, A) = (k, {self.transition.shape[0]}, "
                f"{self.transition.shape[1]}), got {self.rewards.shape}")
        if self.discounts.shape != (self.rewards.shape[0],):
            raise ModelValidationError("discounts must have one entry per objective")
        row_sums = self.transition.sum(axis=2)
        if not np.allclose(row_sums, 1.0, atol=1e-9) or (self.transition < -1e-12).any():
            raise ModelValidationError("transition rows must be stochastic (sum 1 +- 1e-9)")
        if (self.discounts < 0).any() or (self.discounts >= 1).any():
            raise ModelValidationError("discounts must lie in [0, 1)")
        if not np.isfinite(self.rewards).all():
            raise ModelValidationError("rewards must be finite")

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def n_objectives(self) -> int:
        return self.rewards.shape[0]


@dataclass
class QTableStack:
    """Per-objective Q tables plus the thresholds they were solved with."""

    q: np.ndarray           # (k, S, A)
    thresholds: np.ndarray  # (k,)


@dataclass
class AdmissibleSets:
    """Nested per-state action masks; level i is the set surviving objectives 1..i."""

    masks: np.ndarray  # (k, S, A) boolean; masks[i] = A_{i+1}(s)

    def level(self, i: int) -> np.ndarray:
        """Mask for A_i(s); level 0 is the full action space."""
        if i == 0:
            return np.ones(self.masks.shape[1:], dtype=bool)
        return self.masks[i - 1]

    def check_nested(self) -> None:
        k = self.masks.shape[0]
        if not self.masks.any(axis=2).all():
            raise ModelValidationError("admissible set empty at some state/level")
        for i in range(1, k):
            if (self.masks[i] & ~self.masks[i - 1]).any():
                raise ModelValidationError("admissible sets are not nested")


def admissible_mask(q: np.ndarray, prior: np.ndarray, slack: float,
                    tie_tol: float = 1e-9) -> np.ndarray:
    """Per-state mask of actions within `slack` of the restricted max, plus the argmax.

    q: (S, A); prior: (S, A) boolean, non-empty per row; slack <= 0.
    """
    q = np.where(prior, q, -np.inf)
    best = q.max(axis=1, keepdims=True)
    mask = prior & (q >= best + slack)
    # argmax (lowest index) always survives, also when slack is -inf
    arg = q.argmax(axis=1)
    mask[np.arange(q.shape[0]), arg] = True
    # absorb ties of the max itself
    mask |= prior & (q >= best - tie_tol)
    return mask


def _restricted_value_iteration(momdp: MOMDP, objective: int, prior: np.ndarray,
                                tol: float, floor: float | None = None) -> np.ndarray:
    """Solve Q for one objective with the next-state max restricted to `prior`.

    With `floor` set, applies the static min-rectification after every sweep.
    """
    p = momdp.transition
    r = momdp.rewards[objective]
    gamma = momdp.discounts[objective]
    q = np.zeros_like(r)
    if floor is not None:
        q = np.minimum(q, floor)
    for _ in range(MAX_SWEEPS):
        v = np.where(prior, q, -np.inf).max(axis=1)
        q_new = r + gamma * (p @ v)
        if floor is not None:
            q_new = np.minimum(floor, q_new)
        residual = np.abs(q_new - q).max()
        q = q_new
        if residual <= tol * (1 - gamma):
            return q
    raise ConvergenceError(
        f"value iteration did not converge in {MAX_SWEEPS} sweeps", residual=residual)


def lexicographic_value_iteration(momdp: MOMDP, slacks, tol: float = 1e-10
                                  ) -> tuple[QTableStack, AdmissibleSets]:
    """Level-wise restricted value iteration with adaptive thresholds.

    Objective 0 is solved by plain value iteration; its admissible set (actions
    within slack of the per-state max, argmax always kept) restricts the
    next-state max for objective 1, and so on.
    """
    slacks = np.asarray(slacks, dtype=float)
    if slacks.shape != (momdp.n_objectives,):
        raise ModelValidationError("need one slack per objective")
    if (slacks > 0).any():
        raise ModelValidationError("adaptive slacks must be <= 0")
    if tol <= 0:
        raise ModelValidationError("tol must be > 0")
    prior = np.ones((momdp.n_states, momdp.n_actions), dtype=bool)
    qs, masks = [], []
    for i in range(momdp.n_objectives):
        q = _restricted_value_iteration(momdp, i, prior, tol)
        prior = admissible_mask(q, prior, slacks[i])
        qs.append(q)
        masks.append(prior)
    sets = AdmissibleSets(np.array(masks))
    sets.check_nested()
    return QTableStack(np.array(qs), slacks.copy()), sets


def rectified_value_iteration(momdp: MOMDP, floors, tol: float = 1e-10) -> QTableStack:
    """Static-threshold baseline: Q clamped above at the floor via min each sweep.

    The admissible set passed down a level is the argmax set of the rectified Q.
    Kept for comparison; known to admit arbitrarily bad tie-broken policies.
    """
    floors = np.asarray(floors, dtype=float)
    if floors.shape != (momdp.n_objectives,):
        raise ModelValidationError("need one floor per objective")
    if not np.isfinite(floors).all():
        raise ModelValidationError("floors must be finite")
    prior = np.ones((momdp.n_states, momdp.n_actions), dtype=bool)
    qs = []
    for i in range(momdp.n_objectives):
        q = _restricted_value_iteration(momdp, i, prior, tol, floor=floors[i])
        prior = admissible_mask(q, prior, 0.0)  # argmax set (with exact ties)
        qs.append(q)
    return QTableStack(np.array(qs), floors.copy())


def rectified_greedy_sets(momdp: MOMDP, floors, tol: float = 1e-10) -> AdmissibleSets:
    """Nested argmax sets of the rectified solver, for policy comparison tests."""
    floors = np.asarray(floors, dtype=float)
    prior = np.ones((momdp.n_states, momdp.n_actions), dtype=bool)
    masks = []
    for i in range(momdp.n_objectives):
        q = _restricted_value_iteration(momdp, i, prior, tol, floor=floors[i])
        prior = admissible_mask(q, prior, 0.0)
        masks.append(prior)
    return AdmissibleSets(np.array(masks))


def policy_value(momdp: MOMDP, policy, tol: float = 1e-10) -> np.ndarray:
    """Exact per-objective policy evaluation (direct linear solve). Returns (k, S)."""
    policy = np.asarray(policy, dtype=int)
    if policy.shape != (momdp.n_states,):
        raise ModelValidationError("policy must give one action per state")
    s_idx = np.arange(momdp.n_states)
    p_pi = momdp.transition[s_idx, policy]           # (S, S)
    values = np.empty((momdp.n_objectives, momdp.n_states))
    eye = np.eye(momdp.n_states)
    for i in range(momdp.n_objectives):
        r_pi = momdp.rewards[i][s_idx, policy]
        values[i] = np.linalg.solve(eye - momdp.discounts[i] * p_pi, r_pi)
    return values


@dataclass
class LearningSchedule:
    """Step sizes and exploration for tabular TLQ learning."""

    alpha0: float = 0.5
    alpha_decay: float = 2e-4     # alpha_t = alpha0 / (1 + decay * t)
    epsilon: float = 0.3          # prob of exploring at all
    restart_prob: float = 0.05    # teleport to a uniform state, keeps the chain ergodic

    def alpha(self, t: int) -> float:
        return self.alpha0 / (1.0 + self.alpha_decay * t)


def tabular_tlq_learning(momdp: MOMDP, slacks, schedule: LearningSchedule,
                         steps: int, rng: np.random.Generator) -> QTableStack:
    """Sample-based lexicographic Q-learning with next-action restriction.

    Each step one objective level may be drawn for exploration (uniform action
    from the previous level's admissible set); all objectives are updated from
    the same transition, each with its own restricted next-state max.
    """
    if steps <= 0:
        raise ModelValidationError("steps must be > 0")
    slacks = np.asarray(slacks, dtype=float)
    k, n_s, n_a = momdp.n_objectives, momdp.n_states, momdp.n_actions
    q = np.zeros((k, n_s, n_a))
    cdf = momdp.transition.cumsum(axis=2)
    s = int(rng.integers(n_s))
    for t in range(steps):
        masks = _greedy_masks(q, slacks, s)
        if rng.random() < schedule.epsilon:
            level = int(rng.integers(k))         # explore objective level+1
            allowed = np.flatnonzero(masks[level])
        else:
            allowed = np.flatnonzero(masks[k])
        a = int(allowed[rng.integers(len(allowed))])
        s2 = int(np.searchsorted(cdf[s, a], rng.random(), side="right"))
        alpha = schedule.alpha(t)
        masks2 = _greedy_masks(q, slacks, s2)
        for i in range(k):
            target = momdp.rewards[i, s, a] + momdp.discounts[i] * q[i, s2, masks2[i]].max()
            q[i, s, a] += alpha * (target - q[i, s, a])
        s = s2 if rng.random() >= schedule.restart_prob else int(rng.integers(n_s))
    return QTableStack(q, slacks.copy())


def _greedy_masks(q: np.ndarray, slacks: np.ndarray, s: int) -> list[np.ndarray]:
    """Admissible masks A_0..A_k at one state from current Q estimates."""
    k, n_a = q.shape[0], q.shape[2]
    masks = [np.ones(n_a, dtype=bool)]
    for i in range(k):
        m = admissible_mask(q[i, s][None, :], masks[-1][None, :], slacks[i])[0]
        masks.append(m)
    return masks


def greedy_admissible_sets(stack: QTableStack) -> AdmissibleSets:
    """Nested admissible sets implied by a Q table stack and its slacks."""
    prior = np.ones(stack.q.shape[1:], dtype=bool)
    masks = []
    for i in range(stack.q.shape[0]):
        prior = admissible_mask(stack.q[i], prior, stack.thresholds[i])
        masks.append(prior)
    return AdmissibleSets(np.array(masks))


# ---------------------------------------------------------------------------
# Brute-force oracles
# ---------------------------------------------------------------------------

def _enumerate_policies(masks: np.ndarray):
    """All deterministic selectors from per-state action masks. Capped."""
    per_state = [np.flatnonzero(m) for m in masks]
    count = int(np.prod([len(c) for c in per_state]))
    if count > ENUMERATION_CAP:
        raise ModelValidationError(
            f"policy enumeration would visit {count} policies (cap {ENUMERATION_CAP})")
    return itertools.product(*per_state)


def enumeration_oracle(momdp: MOMDP, slacks, tol: float = 1e-10
                       ) -> tuple[QTableStack, AdmissibleSets]:
    """Admissible sets and restricted-optimal Q via exhaustive policy enumeration.

    Level i evaluates every selector policy of the previous level's sets by
    exact linear solve, takes the per-state best value, and applies the
    threshold rule directly. Independent of the value-iteration path.
    """
    slacks = np.asarray(slacks, dtype=float)
    prior = np.ones((momdp.n_states, momdp.n_actions), dtype=bool)
    qs, masks = [], []
    for i in range(momdp.n_objectives):
        best_v = np.full(momdp.n_states, -np.inf)
        for policy in _enumerate_policies(prior):
            v = policy_value(momdp, np.array(policy), tol)[i]
            best_v = np.maximum(best_v, v)
        q = momdp.rewards[i] + momdp.discounts[i] * (momdp.transition @ best_v)
        prior = admissible_mask(q, prior, slacks[i])
        qs.append(q)
        masks.append(prior)
    return QTableStack(np.array(qs), slacks.copy()), AdmissibleSets(np.array(masks))


def best_values_per_level(momdp: MOMDP, sets: AdmissibleSets, tol: float = 1e-10
                          ) -> np.ndarray:
    """max over selector policies of level i-1 of v_i, per state. Returns (k, S)."""
    k = momdp.n_objectives
    out = np.empty((k, momdp.n_states))
    for i in range(k):
        best_v = np.full(momdp.n_states, -np.inf)
        for policy in _enumerate_policies(sets.level(i)):
            best_v = np.maximum(best_v, policy_value(momdp, np.array(policy), tol)[i])
        out[i] = best_v
    return out


def verify_guarantee(momdp: MOMDP, slacks, tol: float = 1e-6) -> float:
    """Worst slack of the lexicographic guarantee over all stack-greedy policies.

    For every policy selecting from the final admissible sets and every
    objective i, checks v_i >= (best over the previous level) + slack_i/(1-gamma_i).
    Returns the most negative margin found (>= -tol means the guarantee holds).
    """
    slacks = np.asarray(slacks, dtype=float)
    _, sets = lexicographic_value_iteration(momdp, slacks)
    best = best_values_per_level(momdp, sets)
    bound = best + (slacks / (1.0 - momdp.discounts))[:, None]
    worst = np.inf
    for policy in _enumerate_policies(sets.level(momdp.n_objectives)):
        v = policy_value(momdp, np.array(policy))
        worst = min(worst, float((v - bound).min()))
    return worst


def min_bias_gap(tau: float, sample_values: np.ndarray) -> tuple[float, float]:
    """Gap min(tau, E[X]) - mean(min(tau, X)) and its standard error.

    Demonstrates that a sampled min-rectified target estimates low: the gap is
    nonnegative in expectation and strictly positive whenever X straddles tau.
    """
    sample_values = np.asarray(sample_values, dtype=float)
    clipped = np.minimum(tau, sample_values)
    gap = min(tau, float(sample_values.mean())) - float(clipped.mean())
    se = float(clipped.std(ddof=1) / np.sqrt(len(sample_values)))
    return gap, se


def random_momdp(rng: np.random.Generator, n_states: int, n_actions: int,
                 n_objectives: int, discount_range=(0.5, 0.95),
                 deterministic: bool = False) -> MOMDP:
    """Random dense MOMDP for property and oracle tests."""
    if deterministic:
        p = np.zeros((n_states, n_actions, n_states))
        nxt = rng.integers(n_states, size=(n_states, n_actions))
        for s in range(n_states):
            for a in range(n_actions):
                p[s, a, nxt[s, a]] = 1.0
    else:
        p = rng.random((n_states, n_actions, n_states)) ** 2
        p /= p.sum(axis=2, keepdims=True)
    r = rng.normal(size=(n_objectives, n_states, n_actions)).round(3)
    g = rng.uniform(*discount_range, size=n_objectives).round(3)
    return MOMDP(p, r, g)


def load_momdp(path) -> MOMDP:
    """Read a MOMDP from the plain-text tabular format.

    Line 1: ``n_states n_actions k``; line 2: k discounts; then S*A transition
    rows (s-major, then a) of S probabilities; then k reward blocks of S rows
    of A values. ``#`` starts a comment.
    """
    tokens = []
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                tokens.extend(line.split())
    try:
        n_s, n_a, k = (int(t) for t in tokens[:3])
        values = np.array([float(t) for t in tokens[3:]])
    except (ValueError, IndexError) as exc:
        raise ModelValidationError(f"malformed MOMDP file {path}: {exc}") from exc
    expected = k + n_s * n_a * n_s + k * n_s * n_a
    if len(values) != expected:
        raise ModelValidationError(
            f"{path}: expected {expected} numbers after the header, got {len(values)}")
    discounts = values[:k]
    ofs = k
    transition = values[ofs:ofs + n_s * n_a * n_s].reshape(n_s, n_a, n_s)
    ofs += n_s * n_a * n_s
    rewards = values[ofs:].reshape(k, n_s, n_a)
    return MOMDP(transition, rewards, discounts)
