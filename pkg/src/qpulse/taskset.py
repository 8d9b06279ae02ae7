"""State alphabet, preparation tasks, splits and bath grids."""
from __future__ import annotations

import itertools
import json
import math
import random
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dynamics import BathParams, pure_density

SCHEMA_VERSION = 1
N_TRAIN, N_VALIDATION, N_TEST = 700, 50, 242
DEFAULT_SHUFFLE_SEED = 42


@dataclass(frozen=True)
class BlochState:
    theta: float
    phi_az: float

    def ket(self) -> np.ndarray:
        return np.array([math.cos(self.theta / 2),
                         complex(math.cos(self.phi_az), math.sin(self.phi_az))
                         * math.sin(self.theta / 2)], dtype=complex)

    def density(self) -> np.ndarray:
        return pure_density(self.ket())

    def bloch_vector(self) -> np.ndarray:
        st = math.sin(self.theta)
        return np.array([st * math.cos(self.phi_az), st * math.sin(self.phi_az),
                         math.cos(self.theta)])


@dataclass(frozen=True)
class PreparationTask:
    task_id: int
    ini_index: int
    tar_index: int


@dataclass(frozen=True)
class TaskSplit:
    train: tuple[int, ...]
    validation: tuple[int, ...]
    test: tuple[int, ...]
    shuffle_seed: int


@dataclass(frozen=True)
class EnvironmentGrid:
    training: tuple[BathParams, ...]
    held_out: tuple[BathParams, ...] = ()

    def __post_init__(self):
        overlap = set(self.training) & set(self.held_out)
        if overlap:
            raise ValueError(f"held-out points also in training grid: {sorted(b.as_tuple() for b in overlap)}")

    def to_dict(self) -> dict:
        return {"training": [b.to_dict() for b in self.training],
                "held_out": [b.to_dict() for b in self.held_out]}

    @classmethod
    def from_dict(cls, d: dict) -> "EnvironmentGrid":
        return cls(tuple(BathParams.from_dict(b) for b in d["training"]),
                   tuple(BathParams.from_dict(b) for b in d.get("held_out", [])))


def sample_bloch_states() -> list[BlochState]:
    """Both poles plus rings of ten at polar angles pi/4, pi/2, 3pi/4."""
    states = [BlochState(0.0, 0.0), BlochState(math.pi, 0.0)]
    for theta in (math.pi / 4, math.pi / 2, 3 * math.pi / 4):
        states.extend(BlochState(theta, 2 * math.pi * k / 10) for k in range(10))
    return states


def enumerate_tasks(states) -> list[PreparationTask]:
    n = len(states)
    pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
    return [PreparationTask(k, i, j) for k, (i, j) in enumerate(pairs)]


def split_tasks(tasks, seed=DEFAULT_SHUFFLE_SEED,
                sizes=(N_TRAIN, N_VALIDATION, N_TEST)) -> TaskSplit:
    if sum(sizes) != len(tasks):
        raise ValueError(f"split sizes {sizes} do not cover {len(tasks)} tasks")
    ids = [t.task_id for t in tasks]
    random.Random(seed).shuffle(ids)  # Fisher-Yates
    a, b = sizes[0], sizes[0] + sizes[1]
    return TaskSplit(tuple(ids[:a]), tuple(ids[a:b]), tuple(ids[b:]), int(seed))


DEFAULT_GRID_AXES = {
    "Gamma": [0.0, 0.01, 0.1, 0.2, 0.4],
    "gamma": [2.0, 4.0, 8.0],
    "T": [5.0, 10.0, 20.0],
}
DEFAULT_HELD_OUT = [
    {"Gamma": 0.05, "gamma": 4.0, "T": 10.0},
    {"Gamma": 0.1, "gamma": 6.0, "T": 10.0},
    {"Gamma": 0.1, "gamma": 4.0, "T": 15.0},
]


def environment_grid(config: dict | None = None) -> EnvironmentGrid:
    """Cartesian training grid from ``config["axes"]`` plus held-out points.

    ``config`` may hold ``axes`` (dict of Gamma/gamma/T value lists) and
    ``held_out`` (list of point dicts). Missing keys fall back to defaults.
    """
    config = config or {}
    axes = config.get("axes", DEFAULT_GRID_AXES)
    held = config.get("held_out", DEFAULT_HELD_OUT)
    training = tuple(BathParams(G, g, T) for G, g, T in
                     itertools.product(axes["Gamma"], axes["gamma"], axes["T"]))
    held_out = tuple(BathParams.from_dict(d) for d in held)
    return EnvironmentGrid(training, held_out)


class TaskSet:
    """The state alphabet, its ordered task pairs and one shuffled split."""

    def __init__(self, states, tasks, split: TaskSplit):
        self.states = list(states)
        self.tasks = list(tasks)
        self.split = split
        self._by_id = {t.task_id: t for t in self.tasks}

    @classmethod
    def default(cls, seed=DEFAULT_SHUFFLE_SEED) -> "TaskSet":
        states = sample_bloch_states()
        tasks = enumerate_tasks(states)
        return cls(states, tasks, split_tasks(tasks, seed))

    def task(self, task_id: int) -> PreparationTask:
        return self._by_id[task_id]

    def densities(self, task_id: int) -> tuple[np.ndarray, np.ndarray]:
        t = self._by_id[task_id]
        return self.states[t.ini_index].density(), self.states[t.tar_index].density()

    def subset(self, name: str) -> tuple[int, ...]:
        return getattr(self.split, name)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "shuffle_seed": self.split.shuffle_seed,
            "states": [{"theta": s.theta, "phi_az": s.phi_az} for s in self.states],
            "tasks": [{"id": t.task_id, "ini_index": t.ini_index, "tar_index": t.tar_index}
                      for t in self.tasks],
            "split": {"train": list(self.split.train),
                      "validation": list(self.split.validation),
                      "test": list(self.split.test)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSet":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"tasks file schema_version {d.get('schema_version')!r}, "
                             f"expected {SCHEMA_VERSION}")
        states = [BlochState(s["theta"], s["phi_az"]) for s in d["states"]]
        tasks = [PreparationTask(t["id"], t["ini_index"], t["tar_index"]) for t in d["tasks"]]
        sp = d["split"]
        split = TaskSplit(tuple(sp["train"]), tuple(sp["validation"]), tuple(sp["test"]),
                          int(d["shuffle_seed"]))
        return cls(states, tasks, split)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "TaskSet":
        return cls.from_dict(json.loads(Path(path).read_text()))


def save_grid(grid: EnvironmentGrid, path):
    Path(path).write_text(json.dumps(grid.to_dict(), indent=1))


def load_grid(path) -> EnvironmentGrid:
    return EnvironmentGrid.from_dict(json.loads(Path(path).read_text()))
