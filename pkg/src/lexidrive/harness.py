"""Run orchestration: training with round-robin actors feeding a single
prioritized-replay learner, violation-rate evaluation, zero-shot transfer
runs, tabular oracle self-checks, and the scalar-reward baseline.

Three model kinds share one pipeline:
  dqn    -- single Q head on a weighted-sum reward (scalar baseline)
  tldqn  -- thresholded lexicographic stack, monolithic safety head
  tlfdqn -- same stack with factored per-vehicle safety heads
"""
from __future__ import annotations

import csv
import json
import time
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import features, momdp, nets, traffic
from .envs import DrivingEpisode, EpisodeConfig
from .errors import ModelValidationError
from .features import (REGULATION_EGO_DIM, REGULATION_VEH_DIM, SAFETY_EGO_DIM,
                       SAFETY_VEH_DIM, EGO_DIM, VEH_DIM, FeatureFrame,
                       regulation_view, safety_view)
from .learner import (DeepStack, QObjectiveDef, RuleObjectiveDef, sync_targets,
                      train_step)
from .nets import AdamState, NetworkSpec, init_parameters
from .objectives import (ObjectiveConfig, comfort_speed_select,
                         lane_change_admissible)
from .policy import ExplorationSchedule
from .replay import ReplayBuffer, Transition
from .traffic import N_ACTIONS, SimConfig

MODEL_KINDS = ("dqn", "tldqn", "tlfdqn")
CHECKPOINT_VERSION = 1


@dataclass
class RunConfig:
    map_kind: str = "cross"
    model: str = "tlfdqn"
    seed: int = 0
    m_slots: int = 8
    actors: int = 4
    train_steps: int = 200_000
    learner_steps_per_cycle: int = 2
    batch_size: int = 32
    buffer_capacity: int = 100_000
    warmup: int = 1000
    target_sync: int = 1000
    lr: float = 3e-4
    shared_sizes: tuple = (32, 32)
    merged_sizes: tuple = (32,)
    factored_head_mode: str = "factored-plus-merged"
    safety_gamma: float = 0.99
    regulation_gamma: float = 0.95
    safety_slack: float = -0.2
    regulation_slack: float = -0.2
    scalar_weights: tuple = (1.0, 1.0)
    explore_probs: tuple = (0.4, 0.3, 0.3)
    explore_anneal: int = 120_000
    explore_final: float = 0.05
    eval_episodes: int = 500
    window: int = 100
    metrics_every: int = 1000
    pre_roll_steps: int = 40
    max_entry_prob: float = 1.0

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ModelValidationError(f"unknown model kind {self.model!r}")
        if self.map_kind not in ("cross", "ring"):
            raise ModelValidationError(f"unknown map kind {self.map_kind!r}")

    @classmethod
    def from_yaml(cls, path) -> "RunConfig":
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
        fields = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - fields
        if unknown:
            raise ModelValidationError(f"unknown config keys: {sorted(unknown)}")
        for key in ("shared_sizes", "merged_sizes", "scalar_weights",
                    "explore_probs"):
            if key in raw:
                raw[key] = tuple(raw[key])
        return cls(**raw)

    def episode_config(self, map_kind: Optional[str] = None) -> EpisodeConfig:
        sim = SimConfig(max_entry_prob=self.max_entry_prob)
        obj = ObjectiveConfig(safety_gamma=self.safety_gamma,
                              regulation_gamma=self.regulation_gamma,
                              safety_slack=self.safety_slack,
                              regulation_slack=self.regulation_slack)
        return EpisodeConfig(map_kind=map_kind or self.map_kind,
                             m_slots=self.m_slots, sim=sim, objectives=obj,
                             pre_roll_steps=self.pre_roll_steps)


# -- model construction ------------------------------------------------------

def _full_view(frame: FeatureFrame):
    return frame.ego_vec, frame.veh_mat, frame.mask


def _lane_change_mask(frame: FeatureFrame) -> np.ndarray:
    allowed = lane_change_admissible(frame.ego, frozenset(range(N_ACTIONS)))
    mask = np.zeros(N_ACTIONS, dtype=bool)
    mask[list(allowed)] = True
    return mask


def build_stack(config: RunConfig, rng: np.random.Generator) -> DeepStack:
    def q_objective(name, view, ego_dim, veh_dim, head_mode, slack, gamma,
                    factored):
        spec = NetworkSpec(ego_dim=ego_dim, veh_dim=veh_dim, m=config.m_slots,
                           shared_sizes=config.shared_sizes,
                           merged_sizes=config.merged_sizes,
                           head_mode=head_mode, n_actions=N_ACTIONS)
        online = init_parameters(spec, rng)
        return QObjectiveDef(name=name, view=view, spec=spec, online=online,
                             target=online.copy(),
                             opt=AdamState(lr=config.lr), slack=slack,
                             gamma=gamma, factored=factored)

    rule = RuleObjectiveDef(name="lane_change", mask_fn=_lane_change_mask)
    if config.model == "dqn":
        combined = q_objective("combined", _full_view, EGO_DIM, VEH_DIM,
                               "monolithic", 0.0, config.safety_gamma, False)
        return DeepStack([rule, combined], n_actions=N_ACTIONS)
    factored = config.model == "tlfdqn"
    safety = q_objective(
        "safety", safety_view, SAFETY_EGO_DIM, SAFETY_VEH_DIM,
        config.factored_head_mode if factored else "monolithic",
        config.safety_slack, config.safety_gamma, factored)
    regulation = q_objective(
        "regulation", regulation_view, REGULATION_EGO_DIM, REGULATION_VEH_DIM,
        "monolithic", config.regulation_slack, config.regulation_gamma, False)
    return DeepStack([rule, safety, regulation], n_actions=N_ACTIONS)


def select_action(stack: DeepStack, frame: FeatureFrame, speed_limit: float,
                  rng: np.random.Generator,
                  explore_level: Optional[int] = None) -> int:
    """Greedy stack action (final preference applied to the admissible set),
    or a uniform draw from A_level when exploring."""
    depth = len(stack.objectives)
    if explore_level is not None:
        level = min(explore_level, depth)
        mask = stack.masks_upto([frame], level)[0]
        choices = np.flatnonzero(mask)
        return int(choices[rng.integers(len(choices))])
    mask = stack.masks_upto([frame], depth)[0]
    return comfort_speed_select(frozenset(int(a) for a in np.flatnonzero(mask)),
                                frame.ego, speed_limit)


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path, config: RunConfig, stack: DeepStack) -> None:
    arrays = {f"{obj.name}.vector": obj.online.flat
              for obj in stack.q_objectives}
    meta = {"version": CHECKPOINT_VERSION, "config": asdict(config)}
    np.savez(path, meta=json.dumps(meta), **arrays)


def load_checkpoint(path, rng: Optional[np.random.Generator] = None
                    ) -> tuple[RunConfig, DeepStack]:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ModelValidationError(
                f"unsupported checkpoint version {meta.get('version')!r}")
        raw = dict(meta["config"])
        for key in ("shared_sizes", "merged_sizes", "scalar_weights",
                    "explore_probs"):
            raw[key] = tuple(raw[key])
        config = RunConfig(**raw)
        stack = build_stack(config, rng or np.random.default_rng(0))
        for obj in stack.q_objectives:
            key = f"{obj.name}.vector"
            if key not in data:
                raise ModelValidationError(f"checkpoint missing {key}")
            vec = np.asarray(data[key])
            if vec.shape != obj.online.flat.shape:
                raise ModelValidationError(f"checkpoint shape mismatch for {key}")
            obj.online.flat[...] = vec
            obj.target = obj.online.copy()
    return config, stack


# -- training ----------------------------------------------------------------

@dataclass
class EpisodeStats:
    collision: bool = False
    yielding: bool = False
    turning: bool = False

    @property
    def combined(self) -> bool:
        return self.collision or self.yielding or self.turning


class Actor:
    """One episode stream; steps once per scheduler cycle."""

    def __init__(self, episode: DrivingEpisode, rng: np.random.Generator):
        self.episode = episode
        self.rng = rng
        self.frame = episode.reset()
        self.stats = EpisodeStats()

    def step(self, stack: DeepStack, model: str,
             explorer: ExplorationSchedule, learner_step: int
             ) -> tuple[Transition, Optional[EpisodeStats]]:
        level = explorer.sample(learner_step, self.rng)
        action = select_action(stack, self.frame, self.episode.speed_limit,
                               self.rng, explore_level=level)
        prev = self.frame
        res = self.episode.step(action)
        if res.events.collision:
            self.stats.collision = True
        if res.regulation.yield_violation:
            self.stats.yielding = True
        if res.events.wrong_lane_at_turn:
            self.stats.turning = True
        if res.events.timeout and not res.events.collision:
            self.stats.yielding = True
        transition = build_transition(model, prev, action, res)
        finished = None
        if res.done:
            finished = self.stats
            self.stats = EpisodeStats()
            self.frame = self.episode.reset()
        else:
            self.frame = res.frame
        return transition, finished


def build_transition(model: str, prev: FeatureFrame, action: int,
                     res) -> Transition:
    next_frame = res.frame if res.frame is not None else prev
    safety_terminal = bool(res.events.collision or res.frame is None)
    if model == "dqn":
        rewards = np.array([res.safety.reward + res.regulation.reward])
        terminals = np.array([safety_terminal])
    else:
        rewards = np.array([res.safety.reward, res.regulation.reward])
        terminals = np.array([safety_terminal,
                              res.regulation.terminal or res.frame is None])
    return Transition(state=prev, action=action, rewards=rewards,
                      next_state=next_frame, terminals=terminals,
                      factored_rewards=res.safety.factored_rewards,
                      factored_terminals=res.safety.factored_terminals,
                      next_slot=res.safety.next_slot)


def run_training(config: RunConfig, out_dir) -> Path:
    """Train per config; writes metrics.csv and checkpoint.npz in out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    root = np.random.default_rng(config.seed)
    stack = build_stack(config, root)
    buffer = ReplayBuffer(config.buffer_capacity)
    learner_rng = np.random.default_rng(config.seed + 1)
    explorer = ExplorationSchedule(level_probs=config.explore_probs,
                                   anneal_steps=config.explore_anneal,
                                   final_scale=config.explore_final)
    ep_cfg = config.episode_config()
    actors = [Actor(DrivingEpisode(ep_cfg, config.seed + 1000 + i),
                    np.random.default_rng(config.seed + 2000 + i))
              for i in range(config.actors)]
    window = deque(maxlen=config.window)
    rows = []
    learner_step = 0
    episodes = 0
    env_steps = 0
    last_losses: dict = {}
    t0 = time.time()
    while learner_step < config.train_steps:
        for actor in actors:
            transition, finished = actor.step(stack, config.model, explorer,
                                              learner_step)
            buffer.add(transition)
            env_steps += 1
            if finished is not None:
                episodes += 1
                window.append(finished)
        for _ in range(config.learner_steps_per_cycle):
            report = train_step(buffer, stack, config.batch_size,
                                learner_step, learner_rng,
                                warmup=config.warmup)
            if report is None:
                break
            learner_step += 1
            if not report.skipped:
                last_losses = report.losses
            if learner_step % config.target_sync == 0:
                sync_targets(stack)
            if learner_step % config.metrics_every == 0:
                rows.append(_metrics_row(learner_step, env_steps, episodes,
                                         window, last_losses,
                                         time.time() - t0))
    checkpoint = out / "checkpoint.npz"
    save_checkpoint(checkpoint, config, stack)
    _write_metrics(out / "metrics.csv", rows)
    return checkpoint


def _window_rates(window) -> tuple[float, float, float]:
    if not window:
        return 0.0, 0.0, 0.0
    n = len(window)
    return (sum(s.collision for s in window) / n,
            sum(s.yielding for s in window) / n,
            sum(s.turning for s in window) / n)


def _metrics_row(learner_step, env_steps, episodes, window, losses, wall):
    cr, yr, tr = _window_rates(window)
    combined = sum(s.combined for s in window) / max(1, len(window))
    return {"learner_step": learner_step, "env_steps": env_steps,
            "episodes": episodes, "collision_rate": round(cr, 6),
            "yielding_rate": round(yr, 6), "turning_rate": round(tr, 6),
            "combined_sq": round(combined ** 2, 6),
            "loss_safety": round(losses.get("safety",
                                            losses.get("combined", 0.0)), 8),
            "loss_regulation": round(losses.get("regulation", 0.0), 8),
            "wall_seconds": round(wall, 1)}


METRICS_COLUMNS = ("learner_step", "env_steps", "episodes", "collision_rate",
                   "yielding_rate", "turning_rate", "combined_sq",
                   "loss_safety", "loss_regulation", "wall_seconds")


def _write_metrics(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def run_baseline_scalar(config: RunConfig, out_dir) -> Path:
    return run_training(replace(config, model="dqn"), out_dir)


# -- evaluation --------------------------------------------------------------

@dataclass
class ViolationReport:
    """Violation rates over evaluation episodes, in table order
    (Collision, Yielding, Turning). Turning is None where not applicable."""

    episodes: int
    collisions: int
    yieldings: int
    turnings: Optional[int]

    @property
    def collision_rate(self) -> float:
        return self.collisions / max(1, self.episodes)

    @property
    def yielding_rate(self) -> float:
        return self.yieldings / max(1, self.episodes)

    @property
    def turning_rate(self) -> Optional[float]:
        if self.turnings is None:
            return None
        return self.turnings / max(1, self.episodes)

    @property
    def combined_rate(self) -> float:
        total = self.collisions + self.yieldings + (self.turnings or 0)
        return min(1.0, total / max(1, self.episodes))

    def row(self) -> str:
        turning = "N/A" if self.turnings is None else \
            f"{self.turning_rate:.3f}"
        return (f"collision {self.collision_rate:.3f}  "
                f"yielding {self.yielding_rate:.3f}  turning {turning}")


def evaluate_policy(stack: DeepStack, ep_cfg: EpisodeConfig, n_episodes: int,
                    seed: int, report_turning: bool = True
                    ) -> ViolationReport:
    """Greedy-stack rollout over seeded random scenarios."""
    collisions = yieldings = turnings = 0
    max_steps = int(ep_cfg.sim.timeout / ep_cfg.sim.dt) + 10
    for i in range(n_episodes):
        episode = DrivingEpisode(ep_cfg, seed + i)
        rng = np.random.default_rng(seed + 500_000 + i)
        frame = episode.reset()
        stats = EpisodeStats()
        for _ in range(max_steps):
            action = select_action(stack, frame, episode.speed_limit, rng)
            res = episode.step(action)
            if res.events.collision:
                stats.collision = True
            if res.regulation.yield_violation:
                stats.yielding = True
            if res.events.wrong_lane_at_turn:
                stats.turning = True
            if res.events.timeout and not res.events.collision:
                stats.yielding = True
            if res.done:
                break
            frame = res.frame
        collisions += stats.collision
        yieldings += stats.yielding
        turnings += stats.turning
    return ViolationReport(episodes=n_episodes, collisions=collisions,
                           yieldings=yieldings,
                           turnings=turnings if report_turning else None)


def run_evaluation(config: RunConfig, checkpoint, n_episodes: int,
                   seed: Optional[int] = None) -> ViolationReport:
    _, stack = load_checkpoint(checkpoint)
    return evaluate_policy(stack, config.episode_config(), n_episodes,
                           seed if seed is not None else config.seed + 9000)


def run_transfer_eval(config: RunConfig, checkpoint,
                      n_episodes: Optional[int] = None,
                      seed: Optional[int] = None) -> ViolationReport:
    """Evaluate a cross-map checkpoint on the ring road, no updates;
    the turning category does not apply there."""
    _, stack = load_checkpoint(checkpoint)
    ep_cfg = config.episode_config(map_kind="ring")
    return evaluate_policy(stack, ep_cfg,
                           n_episodes or config.eval_episodes,
                           seed if seed is not None else config.seed + 9500,
                           report_turning=False)


# -- oracle self-checks ------------------------------------------------------

def run_oracle_check(n_instances: int = 50, seed: int = 0,
                     tol: float = 1e-6) -> dict:
    """Tabular correctness suite: enumeration-oracle equivalence, the
    lexicographic guarantee inequality, and the rectified-target bias gap."""
    rng = np.random.default_rng(seed)
    equiv = guarantee = 0
    worst_margin = np.inf
    for _ in range(n_instances):
        k = int(rng.integers(1, 4))
        problem = momdp.random_momdp(rng,
                                     n_states=int(rng.integers(2, 7)),
                                     n_actions=int(rng.integers(2, 4)),
                                     n_objectives=k)
        slacks = -rng.uniform(0.05, 0.5, size=k)
        stack, sets = momdp.lexicographic_value_iteration(problem, slacks)
        oracle_stack, oracle_sets = momdp.enumeration_oracle(problem, slacks)
        if np.array_equal(sets.masks, oracle_sets.masks) and \
                np.max(np.abs(stack.q - oracle_stack.q)) <= tol:
            equiv += 1
        margin = momdp.verify_guarantee(problem, slacks, tol=tol)
        worst_margin = min(worst_margin, margin)
        if margin >= -tol:
            guarantee += 1
    gap, se = momdp.min_bias_gap(
        tau=-0.2, sample_values=rng.normal(-0.2, 0.5, size=20_000))
    report = {
        "instances": n_instances,
        "oracle_equivalent": equiv,
        "guarantee_ok": guarantee,
        "worst_guarantee_margin": float(worst_margin),
        "min_bias_gap": float(gap),
        "min_bias_se": float(se),
        "min_bias_significant": bool(gap > 3 * se),
        "ok": bool(equiv == n_instances and guarantee == n_instances
                   and gap > 3 * se),
    }
    return report
