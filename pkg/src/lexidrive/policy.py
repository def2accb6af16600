"""Runtime action selection over an ordered stack of objectives.

The only interface between objectives is the admissible action set each one
passes down, so rule-based and Q-based objectives compose freely. Shared by the
tabular and deep agents.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractViolationError


def admissible_set(q: np.ndarray, prior: frozenset, slack: float) -> frozenset:
    """Actions in `prior` within `slack` of the restricted max, argmax always kept."""
    if not prior:
        raise ContractViolationError("admissible_set called with empty prior")
    if slack > 0:
        raise ContractViolationError("slack must be <= 0")
    indices = sorted(prior)
    values = np.asarray(q, dtype=float)[indices]
    best = values.max()
    kept = {a for a, v in zip(indices, values) if v >= best + slack}
    kept.add(indices[int(values.argmax())])  # lowest-index argmax
    return frozenset(kept)


class ObjectiveAgent:
    """One level of the stack. Subclasses restrict the prior action set."""

    def admissible(self, state, prior: frozenset) -> frozenset:
        raise NotImplementedError


@dataclass
class QBasedObjective(ObjectiveAgent):
    """Thresholded objective backed by a Q function of the featurized state."""

    name: str
    q_values: Callable[[object], np.ndarray]
    slack: float = -0.2

    def admissible(self, state, prior: frozenset) -> frozenset:
        return admissible_set(self.q_values(state), prior, self.slack)


@dataclass
class RuleBasedObjective(ObjectiveAgent):
    """Objective defined by a pure function of the featurized state."""

    name: str
    rule: Callable[[object, frozenset], frozenset]

    def admissible(self, state, prior: frozenset) -> frozenset:
        out = frozenset(self.rule(state, prior))
        if not out or not out <= prior:
            raise ContractViolationError(
                f"rule-based objective {self.name!r} returned an invalid set")
        return out


@dataclass
class PreferenceObjective(ObjectiveAgent):
    """Terminal objective that narrows the set to its single preferred action."""

    name: str
    choose: Callable[[object, frozenset], int]

    def admissible(self, state, prior: frozenset) -> frozenset:
        a = self.choose(state, prior)
        if a not in prior:
            raise ContractViolationError(
                f"preference objective {self.name!r} chose an action outside the prior set")
        return frozenset({a})


class ObjectiveStack:
    """Ordered objectives 1..k applied by folding admissible sets."""

    def __init__(self, agents: Sequence[ObjectiveAgent], n_actions: int):
        if not agents:
            raise ContractViolationError("stack needs at least one objective")
        self.agents = list(agents)
        self.n_actions = n_actions
        self._full = frozenset(range(n_actions))

    def admissible_sets(self, state) -> list[frozenset]:
        """A_0 .. A_k at this state."""
        sets = [self._full]
        for agent in self.agents:
            sets.append(agent.admissible(state, sets[-1]))
        return sets

    def restricted_argmax_set(self, state, level: int) -> frozenset:
        """A_{level-1}(state): the set objective `level` (1-based) maximizes over."""
        if not 1 <= level <= len(self.agents):
            raise ContractViolationError(f"level must be in 1..{len(self.agents)}")
        sets = [self._full]
        for agent in self.agents[:level - 1]:
            sets.append(agent.admissible(state, sets[-1]))
        return sets[-1]

    def select_action(self, state, rng: Optional[np.random.Generator] = None,
                      explore_level: Optional[int] = None,
                      deterministic: bool = False) -> int:
        """Fold the stack; explore_level=i draws uniformly from A_{i-1}.

        Deterministic mode breaks the final (or exploration) draw by lowest index.
        """
        if explore_level is not None:
            candidates = self.restricted_argmax_set(state, explore_level)
        else:
            candidates = self.admissible_sets(state)[-1]
        ordered = sorted(candidates)
        if deterministic or rng is None:
            return ordered[0]
        return ordered[int(rng.integers(len(ordered)))]


@dataclass
class ExplorationSchedule:
    """Per-step categorical choice of which objective level to explore, if any.

    `level_probs` has one entry per objective; the remainder is greedy play.
    The whole distribution is annealed linearly to zero over `anneal_steps`.
    """

    level_probs: Sequence[float]
    anneal_steps: int = 1
    final_scale: float = 0.0

    def sample(self, step: int, rng: np.random.Generator) -> Optional[int]:
        frac = min(1.0, step / max(1, self.anneal_steps))
        scale = 1.0 + (self.final_scale - 1.0) * frac
        u = rng.random()
        acc = 0.0
        for i, p in enumerate(self.level_probs):
            acc += p * scale
            if u < acc:
                return i + 1
        return None
