"""Double DQN with restricted next-state maximization and factored auxiliary targets.

One learner owns the parameter state of every q-based objective; actors only read
published snapshots. The admissible set used inside a target is recomputed from
the current online parameters, so the restriction always reflects the latest
policy of the higher-priority objectives.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import nets
from .errors import ContractViolationError
from .momdp import admissible_mask
from .nets import AdamState, NetworkSpec, NumericsError, Parameters
from .replay import ReplayBuffer, Transition


@dataclass
class RuleObjectiveDef:
    """Rule-based stack level: a pure mask over actions given the state."""

    name: str
    mask_fn: Callable[[object], np.ndarray]  # (A,) bool; ANDed with the prior set


@dataclass
class QObjectiveDef:
    """Learned stack level: network pair, optimizer, and its state view."""

    name: str
    view: Callable[[object], tuple]  # state -> (ego, veh, mask)
    spec: NetworkSpec
    online: Parameters
    target: Parameters
    opt: AdamState = field(default_factory=AdamState)
    slack: float = -0.2
    gamma: float = 0.99
    factored: bool = False

    @property
    def is_q(self) -> bool:
        return True


class DeepStack:
    """Ordered objective definitions with batched admissible-set computation."""

    def __init__(self, objectives: Sequence, n_actions: int = 9):
        self.objectives = list(objectives)
        self.n_actions = n_actions
        self._lock = threading.Lock()

    @property
    def q_objectives(self) -> list[QObjectiveDef]:
        return [o for o in self.objectives if isinstance(o, QObjectiveDef)]

    def level_of(self, obj: QObjectiveDef) -> int:
        """1-based stack level of an objective."""
        return self.objectives.index(obj) + 1

    def _batch_view(self, obj: QObjectiveDef, states: Sequence):
        views = [obj.view(s) for s in states]
        ego = np.stack([v[0] for v in views])
        veh = np.stack([v[1] for v in views])
        mask = np.stack([v[2] for v in views])
        return ego, veh, mask

    def batch_q(self, obj: QObjectiveDef, states: Sequence, params: Parameters):
        ego, veh, mask = self._batch_view(obj, states)
        return nets.forward(obj.spec, params, ego, veh, mask)

    def masks_upto(self, states: Sequence, level: int) -> np.ndarray:
        """A_level(s) for a batch, folding objectives 1..level. Level 0 = full."""
        b = len(states)
        prior = np.ones((b, self.n_actions), dtype=bool)
        for obj in self.objectives[:level]:
            if isinstance(obj, QObjectiveDef):
                q, _, _ = self.batch_q(obj, states, obj.online)
                q = q if q.ndim == 2 else q[None]
                prior = admissible_mask(q, prior, obj.slack)
            else:
                rule = np.stack([obj.mask_fn(s) for s in states])
                nxt = prior & rule
                keep = nxt.any(axis=1)
                prior = np.where(keep[:, None], nxt, prior)
        return prior


def td_target(stack: DeepStack, obj: QObjectiveDef, transition: Transition,
              reward_index: int) -> float:
    """Restricted double-DQN target for a single transition (test surface)."""
    y, _ = _batch_main_targets(stack, obj, [transition], reward_index)
    return float(y[0])


def _batch_main_targets(stack: DeepStack, obj: QObjectiveDef,
                        batch: Sequence[Transition], reward_index: int):
    """Targets y and the restricted next-state argmax a* for a batch."""
    level = stack.level_of(obj)
    next_states = [t.next_state for t in batch]
    rewards = np.array([t.rewards[reward_index] for t in batch], dtype=float)
    terminals = np.array([t.terminals[reward_index] for t in batch], dtype=bool)
    restricted = stack.masks_upto(next_states, level - 1)
    if not restricted.any(axis=1).all():
        raise ContractViolationError("empty restricted set in td target")
    q_online, _, _ = stack.batch_q(obj, next_states, obj.online)
    a_star = np.where(restricted, q_online, -np.inf).argmax(axis=1)
    q_target, _, _ = stack.batch_q(obj, next_states, obj.target)
    boot = q_target[np.arange(len(batch)), a_star]
    y = rewards + obj.gamma * np.where(terminals, 0.0, boot)
    return y, restricted


def factored_td_targets(stack: DeepStack, obj: QObjectiveDef,
                        batch: Sequence[Transition], restricted: np.ndarray):
    """Per-vehicle auxiliary targets (B, m) and the slots carrying loss (B, m).

    Each present instance bootstraps from its own factored head at its
    next-state slot, action chosen by the online head under the same
    restriction as the main target. Terminal instances take the reward alone.
    """
    next_states = [t.next_state for t in batch]
    q_on, qf_on, _ = stack.batch_q(obj, next_states, obj.online)
    q_tg, qf_tg, _ = stack.batch_q(obj, next_states, obj.target)
    b, m = len(batch), obj.spec.m
    targets = np.zeros((b, m))
    active = np.zeros((b, m), dtype=bool)
    for bi, t in enumerate(batch):
        _, _, state_mask = obj.view(t.state)
        for i in range(m):
            if not state_mask[i]:
                continue
            active[bi, i] = True
            r_i = float(t.factored_rewards[i])
            if t.factored_terminals[i] or t.next_slot[i] < 0:
                targets[bi, i] = r_i
                continue
            j = int(t.next_slot[i])
            qi_on = np.where(restricted[bi], qf_on[bi, j], -np.inf)
            a_i = int(qi_on.argmax())
            targets[bi, i] = r_i + obj.gamma * qf_tg[bi, j, a_i]
    return targets, active


@dataclass
class LossReport:
    losses: dict
    td_abs_mean: dict
    skipped: bool = False


def train_step(buffer: ReplayBuffer, stack: DeepStack, batch_size: int,
               step: int, rng: np.random.Generator,
               warmup: int = 1000) -> Optional[LossReport]:
    """One prioritized batch through every q-based objective.

    Priorities are refreshed with the mean absolute main TD error across the
    q-based objectives plus the buffer epsilon.
    """
    if len(buffer) < max(warmup, batch_size):
        return None
    indices, batch, weights = buffer.sample(batch_size, step, rng)
    b = len(batch)
    rows = np.arange(b)
    losses, td_stats = {}, {}
    abs_err_acc = np.zeros(b)
    for ridx, obj in enumerate(stack.q_objectives):
        y, restricted = _batch_main_targets(stack, obj, batch, ridx)
        ego, veh, vmask = stack._batch_view(obj, [t.state for t in batch])
        q, q_fact, cache = nets.forward(obj.spec, obj.online, ego, veh, vmask)
        actions = np.array([t.action for t in batch])
        delta = q[rows, actions] - y
        dq = np.zeros_like(q)
        dq[rows, actions] = weights * delta / b
        dq_fact = None
        loss = float(0.5 * (weights * delta ** 2).mean())
        if obj.factored:
            targets, active = factored_td_targets(stack, obj, batch, restricted)
            slots = np.arange(obj.spec.m)[None, :]
            q_taken = q_fact[rows[:, None], slots, actions[:, None]]
            delta_f = np.where(active, q_taken - targets, 0.0)
            dq_fact = np.zeros_like(q_fact)
            dq_fact[rows[:, None], slots, actions[:, None]] = weights[:, None] * delta_f / b
            loss += float(0.5 * (weights[:, None] * delta_f ** 2).mean())
        try:
            if not np.isfinite(loss):
                raise NumericsError("non-finite loss")
            grad = nets.backward(obj.spec, obj.online, cache, dq, dq_fact)
            nets.apply_update(obj.online, grad, obj.opt)
        except NumericsError:
            return LossReport(losses={}, td_abs_mean={}, skipped=True)
        losses[obj.name] = loss
        td_stats[obj.name] = float(np.abs(delta).mean())
        abs_err_acc += np.abs(delta)
    buffer.update_priorities(indices, abs_err_acc / max(1, len(stack.q_objectives)))
    return LossReport(losses=losses, td_abs_mean=td_stats)


def sync_targets(stack: DeepStack) -> None:
    for obj in stack.q_objectives:
        obj.target = obj.online.copy()
