"""Prioritized experience replay: transitions, sum tree, and the ring buffer."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolationError


@dataclass
class Transition:
    """One environment step, with per-objective and per-vehicle-instance extras.

    Feature arrays follow the full state view; per-objective views are sliced at
    target time. `next_slot[i]` is the slot of state-vehicle i in the next state
    (-1 once it left the scene), keeping the factored arrays slot-aligned.
    """

    state: object
    action: int
    rewards: np.ndarray            # per q-based objective, in stack order
    next_state: object
    terminals: np.ndarray          # per q-based objective
    factored_rewards: np.ndarray   # (m,)
    factored_terminals: np.ndarray  # (m,) bool
    next_slot: np.ndarray          # (m,) int

    def __post_init__(self):
        if not 0 <= self.action < 9:
            raise ContractViolationError(f"action index {self.action} out of range")


class SumTree:
    """Array-backed binary tree whose internal nodes hold children sums.

    Leaves store priorities; sampling a prefix-sum walks down in O(log n).
    """

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.nodes = np.zeros(2 * capacity - 1)

    @property
    def total(self) -> float:
        return float(self.nodes[0])

    def update(self, index: int, priority: float) -> None:
        if priority <= 0:
            raise ContractViolationError("priorities must be > 0")
        idx = index + self.capacity - 1
        change = priority - self.nodes[idx]
        self.nodes[idx] = priority
        while idx > 0:
            idx = (idx - 1) // 2
            self.nodes[idx] += change

    def get(self, index: int) -> float:
        return float(self.nodes[index + self.capacity - 1])

    def find(self, prefix: float) -> int:
        """Leaf index whose cumulative-priority interval contains `prefix`."""
        idx = 0
        while 2 * idx + 1 < len(self.nodes):
            left = 2 * idx + 1
            if prefix <= self.nodes[left] or self.nodes[left + 1] <= 0.0:
                idx = left
            else:
                prefix -= self.nodes[left]
                idx = left + 1
        return idx - (self.capacity - 1)

    def leaf_sum(self) -> float:
        return float(self.nodes[self.capacity - 1:].sum())


class ReplayBuffer:
    """Ring buffer with proportional prioritized sampling.

    alpha=0 degrades to uniform sampling; importance weights are normalized by
    the batch max. Thread-safe for concurrent actor appends and learner draws.
    """

    def __init__(self, capacity: int, alpha: float = 0.6, beta0: float = 0.4,
                 beta_steps: int = 100_000, epsilon: float = 1e-3):
        self.capacity = capacity
        self.alpha = alpha
        self.beta0 = beta0
        self.beta_steps = beta_steps
        self.epsilon = epsilon
        self.tree = SumTree(capacity)
        self.storage: list = [None] * capacity
        self.write = 0
        self.size = 0
        self.max_priority = 1.0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return self.size

    def beta(self, step: int) -> float:
        frac = min(1.0, step / max(1, self.beta_steps))
        return self.beta0 + (1.0 - self.beta0) * frac

    def add(self, transition: Transition) -> None:
        with self._lock:
            self.storage[self.write] = transition
            self.tree.update(self.write, self.max_priority ** self.alpha)
            self.write = (self.write + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, step: int, rng: np.random.Generator):
        """Returns (indices, transitions, importance weights)."""
        with self._lock:
            if self.size == 0:
                raise ContractViolationError("sampling from an empty buffer")
            total = self.tree.total
            prefixes = rng.random(batch_size) * total
            indices = np.array([self.tree.find(p) for p in prefixes], dtype=int)
            indices = np.minimum(indices, self.size - 1)
            priorities = np.array([self.tree.get(i) for i in indices])
            probs = priorities / total
            weights = (self.size * probs) ** (-self.beta(step))
            weights = weights / weights.max()
            batch = [self.storage[i] for i in indices]
        return indices, batch, weights

    def update_priorities(self, indices, td_errors) -> None:
        with self._lock:
            for i, err in zip(indices, np.abs(np.asarray(td_errors, dtype=float))):
                p = err + self.epsilon
                self.max_priority = max(self.max_priority, p)
                self.tree.update(int(i), p ** self.alpha)
