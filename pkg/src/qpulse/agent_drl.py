"""Deep Q-learning agent for pulse design.

Epsilon follows the exploit convention: it is the probability of taking
the greedy action, and it grows from 0 towards ``epsilon_max`` while
training. Evaluation always uses epsilon = 1.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import write_sidecar
from .dynamics import N_ACTIONS, BathParams, DivergenceError
from .encoding import POVM_CONVENTION
from .neural import (MlpParameters, Optimizer, copy_parameters, dqn_loss_and_gradient,
                     forward, init_network, save_checkpoint)
from .rollout import Physics, Policy, PreparationEnv, design_trajectory

log = logging.getLogger(__name__)

CURVE_COLUMNS = ["epoch", "mean_validation_fidelity", "mean_cumulative_reward", "epsilon",
                 "loss_moving_avg"]


class ReplayMemory:
    """Fixed-capacity ring buffer of (s, a, r, s', terminal) transitions."""

    def __init__(self, capacity: int, width: int):
        self.capacity = int(capacity)
        self.s = np.zeros((capacity, width))
        self.a = np.zeros(capacity, dtype=int)
        self.r = np.zeros(capacity)
        self.s_next = np.zeros((capacity, width))
        self.terminal = np.zeros(capacity, dtype=bool)
        self.cursor = 0
        self.size = 0

    def __len__(self):
        return self.size

    def push(self, s, a, r, s_next, terminal):
        if not 0 <= a < N_ACTIONS:
            raise ValueError(f"action {a} out of range")
        if not np.isfinite(r):
            raise ValueError("non-finite reward")
        i = self.cursor
        self.s[i], self.a[i], self.r[i] = s, a, r
        self.s_next[i], self.terminal[i] = s_next, terminal
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, n: int, rng: np.random.Generator):
        idx = rng.choice(self.size, size=n, replace=False)
        return self.s[idx], self.a[idx], self.r[idx], self.s_next[idx], self.terminal[idx]


@dataclass
class EpsilonSchedule:
    value: float = 0.0
    increment: float = 0.001
    cap: float = 0.95

    def advance(self):
        self.value = min(self.value + self.increment, self.cap)


def select_action(params: MlpParameters, s, epsilon: float, rng: np.random.Generator) -> int:
    """Greedy with probability ``epsilon``, uniform otherwise."""
    if rng.random() < epsilon:
        return int(np.argmax(forward(params, s)))
    return int(rng.integers(N_ACTIONS))


EPSILON_ADVANCE = ("learn_step", "episode")
REWARD_KINDS = ("fidelity_with_success_bonus", "fidelity_gain_with_success_bonus")


@dataclass(frozen=True)
class RewardFunction:
    """Per-step reward with a fixed bonus on success.

    ``fidelity_with_success_bonus`` pays the current fidelity each step;
    ``fidelity_gain_with_success_bonus`` pays the change since the last step.
    """

    success_reward: float = 10.0
    kind: str = "fidelity_with_success_bonus"

    def __post_init__(self):
        if self.kind not in REWARD_KINDS:
            raise ValueError(f"unknown reward kind {self.kind!r}")

    @classmethod
    def from_config(cls, d: dict) -> "RewardFunction":
        return cls(float(d.get("success_reward", 10.0)), d.get("kind", REWARD_KINDS[0]))

    def __call__(self, fidelity: float, reached_threshold: bool, previous: float = 0.0) -> float:
        if reached_threshold:
            return self.success_reward
        if self.kind == "fidelity_gain_with_success_bonus":
            return float(fidelity - previous)
        return float(fidelity)

    def describe(self) -> dict:
        return {"kind": self.kind, "success_reward": self.success_reward}

    def episode_rewards(self, initial: float, fidelities, threshold: float) -> list[float]:
        prev = [initial, *fidelities[:-1]]
        return [self(f, f >= threshold, p) for f, p in zip(fidelities, prev)]


def compute_reward(fidelity, reached_threshold, reward: RewardFunction = RewardFunction(),
                   previous=0.0) -> float:
    return reward(fidelity, reached_threshold, previous)


def discounted_return(rewards, discount) -> float:
    return float(sum(discount ** t * r for t, r in enumerate(rewards)))


def td_targets(target: MlpParameters, r, s_next, terminal, discount):
    """``r`` for terminal transitions, ``r + discount * max Q_target(s')`` otherwise."""
    y = np.array(r, dtype=float, copy=True)
    live = ~np.asarray(terminal, dtype=bool)
    if live.any():
        y[live] += discount * forward(target, s_next[live]).max(axis=1)
    return y


def learn_step(main, target, memory: ReplayMemory, rng, optimizer, batch_size=32, discount=0.9):
    """One mini-batch update of ``main``; returns the loss, or None if memory is short."""
    if len(memory) < batch_size:
        log.debug("replay memory holds %d < %d transitions; skipping update",
                  len(memory), batch_size)
        return None
    s, a, r, s_next, term = memory.sample(batch_size, rng)
    y = td_targets(target, r, s_next, term, discount)
    loss, grads = dqn_loss_and_gradient(main, s, a, y)
    optimizer.step(main, grads)
    return loss


@dataclass
class EpisodeRecord:
    cumulative_reward: float
    best_fidelity: float
    steps: int
    succeeded: bool
    losses: list = field(default_factory=list)


class DqnAgent:
    """Main/target networks, replay memory and the schedule they share."""

    def __init__(self, layer_sizes, hyper: dict, init_seed: int, rng: np.random.Generator):
        if hyper["epsilon_advance"] not in EPSILON_ADVANCE:
            raise ValueError(f"epsilon_advance must be one of {EPSILON_ADVANCE}")
        self.hyper = hyper
        self.main = init_network(layer_sizes, init_seed, head="q")
        self.target = self.main.copy()
        self.memory = ReplayMemory(hyper["memory_size"], layer_sizes[0])
        self.schedule = EpsilonSchedule(0.0, hyper["epsilon_increment"], hyper["epsilon_max"])
        self.optimizer = Optimizer(hyper["optimizer"], hyper["learning_rate"])
        self.reward = RewardFunction.from_config(hyper["reward"])
        self.rng = rng
        self.learn_steps = 0

    def learn(self):
        loss = learn_step(self.main, self.target, self.memory, self.rng, self.optimizer,
                          self.hyper["batch_size"], self.hyper["discount"])
        if loss is None:
            return None
        self.learn_steps += 1
        if self.hyper["epsilon_advance"] == "learn_step":
            self.schedule.advance()
        if self.learn_steps % self.hyper["replace_period"] == 0:
            copy_parameters(self.main, self.target)
        return loss


def train_episode(agent: DqnAgent, env: PreparationEnv) -> EpisodeRecord:
    """Run one training episode from the task's initial state with fresh memory operators."""
    s = env.reset()
    rewards, losses = [], []
    best = env.fidelity
    try:
        while not env.done:
            a = select_action(agent.main, s, agent.schedule.value, agent.rng)
            f_prev = env.fidelity
            f = env.step(a)
            r = agent.reward(f, env.succeeded, f_prev)
            s_next = env.features()
            agent.memory.push(s, a, r, s_next, env.done)
            rewards.append(r)
            best = max(best, f)
            loss = agent.learn()
            if loss is not None:
                losses.append(loss)
            s = s_next
    except DivergenceError as exc:
        log.warning("episode aborted: %s", exc)
    if agent.hyper["epsilon_advance"] == "episode":
        agent.schedule.advance()
    return EpisodeRecord(discounted_return(rewards, agent.hyper["discount"]), best, env.steps,
                         env.succeeded, losses)


def validation_pass(policy: Policy, taskset, task_ids, baths, physics: Physics,
                    reward: RewardFunction, discount: float):
    """Mean best fidelity and mean discounted return of the greedy policy, per bath."""
    per_bath = {}
    for bath in baths:
        F, R = [], []
        for tid in task_ids:
            ini, tar = taskset.densities(tid)
            tr = design_trajectory(policy, ini, tar, bath, physics)
            F.append(tr.best_fidelity)
            R.append(discounted_return(
                reward.episode_rewards(tr.initial_fidelity, tr.fidelities, physics.threshold),
                discount))
        per_bath[bath] = (float(np.mean(F)), float(np.mean(R)))
    return per_bath


def default_validation_baths(cfg, grid) -> list[BathParams]:
    if cfg.validation_baths:
        return [BathParams.from_dict(b) for b in cfg.validation_baths]
    if cfg.case == 3:
        return [BathParams(G, 4.0, 10.0) for G in (0.01, 0.1, 0.4)]
    return [cfg.training_bath()]


@dataclass
class TrainingResult:
    params: MlpParameters
    best_epoch: int
    best_validation_fidelity: float
    curve: list[dict]
    metadata: dict


def train(cfg, taskset, grid=None, out_dir=None, progress=None) -> TrainingResult:
    """Full DQN training run for one experiment config.

    One epoch is one episode on a uniformly drawn training task (case 3
    also draws a bath from the training grid). The greedy policy is
    validated every ``validation_interval`` epochs and the parameters with
    the best mean validation fidelity are kept.
    """
    hyper = cfg.hyper
    physics = Physics.from_config(cfg)
    if cfg.case == 3:
        if grid is None:
            raise ValueError("case 3 training needs an environment grid")
        baths = list(grid.training)
    else:
        baths = [cfg.training_bath()]
    val_baths = default_validation_baths(cfg, grid)
    rng = np.random.default_rng(cfg.seeds["training"])
    agent = DqnAgent(cfg.layer_sizes, hyper, cfg.seeds["init"], rng)
    train_ids = taskset.subset("train")
    val_ids = taskset.subset("validation")

    curve, window = [], []
    best = (-np.inf, 0, agent.main.copy())
    interval = hyper["validation_interval"]
    for epoch in range(1, hyper["epochs"] + 1):
        tid = train_ids[rng.integers(len(train_ids))]
        bath = baths[rng.integers(len(baths))] if len(baths) > 1 else baths[0]
        ini, tar = taskset.densities(tid)
        env = PreparationEnv(ini, tar, bath, cfg.case, physics, cfg.feature_scaling)
        rec = train_episode(agent, env)
        window.extend(rec.losses)
        if epoch % interval == 0:
            policy = Policy(agent.main, cfg.case, "drl", cfg.feature_scaling)
            per_bath = validation_pass(policy, taskset, val_ids, val_baths, physics,
                                       agent.reward, hyper["discount"])
            F = float(np.mean([v[0] for v in per_bath.values()]))
            R = float(np.mean([v[1] for v in per_bath.values()]))
            row = {"epoch": epoch, "mean_validation_fidelity": F, "mean_cumulative_reward": R,
                   "epsilon": agent.schedule.value,
                   "loss_moving_avg": float(np.mean(window)) if window else float("nan")}
            for b, (f, r) in per_bath.items():
                row[f"F_{b.label()}"] = f
                row[f"R_{b.label()}"] = r
            curve.append(row)
            window = []
            if F > best[0]:
                best = (F, epoch, agent.main.copy())
            if progress:
                progress(row)
            log.info("epoch %d  F=%.4f  R=%.3f  eps=%.3f", epoch, F, R, agent.schedule.value)

    meta = {
        "algorithm": "drl", "case": cfg.case, "config_hash": cfg.hash(),
        "seeds": dict(cfg.seeds), "epoch": best[1], "best_validation_fidelity": best[0],
        "bath": cfg.training_bath().to_dict() if cfg.case != 3 else None,
        "grid": grid.to_dict() if grid is not None and cfg.case == 3 else None,
        "povm_convention": POVM_CONVENTION, "feature_scaling": cfg.feature_scaling,
        "optimizer": hyper["optimizer"], "reward": agent.reward.describe(),
        "fidelity_measure": cfg.fidelity_measure, "zeeman": cfg.zeeman,
        "substeps": cfg.substeps, "hyperparameters": hyper,
        "validation_baths": [b.to_dict() for b in val_baths],
    }
    result = TrainingResult(best[2], best[1], best[0], curve, meta)
    if out_dir is not None:
        save_training(result, cfg, out_dir)
    return result


def save_training(result: TrainingResult, cfg, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.json", result.params, cfg.case, result.metadata)
    write_curve(out / "learning_curve.csv", result.curve)
    write_sidecar(out / "learning_curve.csv", config_hash=cfg.hash(), seeds=cfg.seeds)


def write_curve(path, rows):
    extra = [k for k in rows[0] if k not in CURVE_COLUMNS] if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS + extra, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
