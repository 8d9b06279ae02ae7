"""Trajectory design with a trained network and test-set evaluation."""
from __future__ import annotations

import csv
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import encoding
from .dynamics import (BathParams, EvolutionState, MAX_STEPS, STEP_DURATION, DEFAULT_SUBSTEPS,
                       DEFAULT_ZEEMAN, fidelity_measure, propagate)
from .neural import MlpParameters, forward, load_checkpoint

RESULT_COLUMNS = ["task_id", "case", "algorithm", "Gamma", "gamma", "T", "steps",
                  "best_fidelity", "final_fidelity", "design_time_s", "succeeded"]


@dataclass(frozen=True)
class Physics:
    """Everything about an episode that is not the bath or the task."""

    zeeman: float = DEFAULT_ZEEMAN
    substeps: int = DEFAULT_SUBSTEPS
    duration: float = STEP_DURATION
    max_steps: int = MAX_STEPS
    threshold: float = 0.999
    measure: str = "root"

    @classmethod
    def from_config(cls, cfg) -> "Physics":
        h = cfg.hyper
        return cls(cfg.zeeman, cfg.substeps, h["step_duration"], h["max_steps"],
                   h["fidelity_threshold"], cfg.fidelity_measure)


class PreparationEnv:
    """One preparation episode: current state, target and feature encoding."""

    def __init__(self, rho_ini, rho_tar, bath: BathParams, case: int,
                 physics: Physics = Physics(), scaling=None):
        self.rho_ini = np.asarray(rho_ini, complex)
        self.rho_tar = np.asarray(rho_tar, complex)
        self.bath = bath
        self.case = case
        self.physics = physics
        self.scaling = scaling
        self._score = fidelity_measure(physics.measure)
        self._p_tar = encoding.encode_density(self.rho_tar)
        self.reset()

    def reset(self):
        self.state = EvolutionState.initial(self.rho_ini)
        self.steps = 0
        self.fidelity = self.score(self.state.rho)
        return self.features()

    def score(self, rho) -> float:
        return self._score(rho, self.rho_tar)

    def features(self, rho=None) -> np.ndarray:
        rho = self.state.rho if rho is None else rho
        return encoding.build_features(encoding.encode_density(rho), self._p_tar,
                                       self.bath, self.case, self.scaling)

    def step(self, action: int) -> float:
        p = self.physics
        self.state = propagate(self.state, int(action), self.bath, p.zeeman, p.duration, p.substeps)
        self.steps += 1
        self.fidelity = self.score(self.state.rho)
        return self.fidelity

    @property
    def succeeded(self) -> bool:
        return self.fidelity >= self.physics.threshold

    @property
    def done(self) -> bool:
        return self.succeeded or self.steps >= self.physics.max_steps


@dataclass
class Policy:
    params: MlpParameters
    case: int
    algorithm: str
    scaling: list | None = None
    metadata: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path) -> "Policy":
        params, case, meta = load_checkpoint(path)
        return cls(params, case, meta.get("algorithm", "drl" if params.head == "q" else "sl"),
                   meta.get("feature_scaling"), meta)

    def act(self, features) -> int:
        # argmax of Q-values or of log-probabilities; ties go to the lowest index
        return int(np.argmax(forward(self.params, features)))


@dataclass
class Trajectory:
    actions: list[int]
    fidelities: list[float]
    best_index: int
    design_time: float
    succeeded: bool
    initial_fidelity: float
    executed: list[int] = field(default_factory=list)

    @property
    def best_fidelity(self) -> float:
        if not self.fidelities:
            return self.initial_fidelity
        return self.fidelities[self.best_index]

    @property
    def final_fidelity(self) -> float:
        """Fidelity after the last executed step (before best-prefix truncation)."""
        return self.fidelities[-1] if self.fidelities else self.initial_fidelity

    @property
    def steps(self) -> int:
        return len(self.actions)


def design_trajectory(policy: Policy, rho_ini, rho_tar, bath: BathParams,
                      physics: Physics = Physics()) -> Trajectory:
    """Greedy closed loop: encode, pick an action, propagate, repeat.

    Stops once the fidelity reaches the threshold or after ``max_steps``.
    A failed run is cut back to the prefix that reached its best fidelity.
    """
    if policy.params.input_width != encoding.feature_width(policy.case):
        raise ValueError(f"checkpoint input width {policy.params.input_width} does not "
                         f"match case {policy.case} features")
    env = PreparationEnv(rho_ini, rho_tar, bath, policy.case, physics, policy.scaling)
    t0 = time.perf_counter()
    f0 = env.fidelity
    if env.succeeded:
        return Trajectory([], [], -1, time.perf_counter() - t0, True, f0)
    executed, fids = [], []
    while not env.done:
        a = policy.act(env.features())
        fids.append(env.step(a))
        executed.append(a)
    elapsed = time.perf_counter() - t0
    best = int(np.argmax(fids))
    succeeded = fids[best] >= physics.threshold
    return Trajectory(executed[:best + 1], fids, best, elapsed, succeeded, f0, executed)


@dataclass
class EvalSummary:
    mean_best_fidelity: float
    deviation_above: float
    deviation_below: float
    std_best_fidelity: float
    mean_final_fidelity: float
    mean_design_time: float
    time_deviation_above: float
    time_deviation_below: float
    mean_steps: float
    success_rate: float
    rows: list[dict]

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "rows"}
        d["n_tasks"] = len(self.rows)
        return d


def _task_row(policy, taskset, tid, bath, physics) -> dict:
    ini, tar = taskset.densities(tid)
    tr = design_trajectory(policy, ini, tar, bath, physics)
    return {
        "task_id": tid, "case": policy.case, "algorithm": policy.algorithm,
        "Gamma": bath.coupling, "gamma": bath.frequency, "T": bath.temperature,
        "steps": tr.steps, "best_fidelity": tr.best_fidelity,
        "final_fidelity": tr.final_fidelity, "design_time_s": tr.design_time,
        "succeeded": tr.succeeded, "actions": tr.actions,
    }


def evaluate(policy: Policy, taskset, task_ids, baths, physics: Physics = Physics(),
             workers: int = 1) -> EvalSummary:
    """Design a trajectory for every (task, bath) pair and aggregate.

    With ``workers > 1`` the rollouts run in a process pool; row order and
    values are the same as in the serial loop (timings are per task).
    """
    task_ids = list(task_ids)
    if not task_ids:
        raise ValueError("empty task set")
    jobs = [(tid, bath) for bath in baths for tid in task_ids]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_task_row, *zip(*[(policy, taskset, t, b, physics)
                                                   for t, b in jobs]), chunksize=8))
    else:
        rows = [_task_row(policy, taskset, t, b, physics) for t, b in jobs]
    return summarize(rows)


def summarize(rows) -> EvalSummary:
    F = np.array([r["best_fidelity"] for r in rows])
    t = np.array([r["design_time_s"] for r in rows])
    Fm, tm = float(F.mean()), float(t.mean())
    return EvalSummary(
        mean_best_fidelity=Fm,
        deviation_above=float(F.max() - Fm), deviation_below=float(Fm - F.min()),
        std_best_fidelity=float(F.std()),
        mean_final_fidelity=float(np.mean([r["final_fidelity"] for r in rows])),
        mean_design_time=tm,
        time_deviation_above=float(t.max() - tm), time_deviation_below=float(tm - t.min()),
        mean_steps=float(np.mean([r["steps"] for r in rows])),
        success_rate=float(np.mean([r["succeeded"] for r in rows])),
        rows=rows,
    )


def write_results(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS, extrasaction="ignore",
                           lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "best_fidelity": repr(float(r["best_fidelity"])),
                        "final_fidelity": repr(float(r["final_fidelity"])),
                        "succeeded": int(bool(r["succeeded"]))})


def read_results(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != RESULT_COLUMNS:
            raise ValueError(f"{path}: columns {reader.fieldnames} do not match results schema")
        return list(reader)
