"""Experiment configuration, hyperparameter tables and artifact metadata."""
from __future__ import annotations

import copy
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

from .dynamics import BathParams, DEFAULT_SUBSTEPS, DEFAULT_ZEEMAN

SCHEMA_VERSION = 1
SEED_ENV = "QPULSE_SEED"

# DRL hyperparameters, columns "Case (1) or (2)" and "Case (3)"
TABLE2 = {
    "case12": {
        "total_time": 2 * math.pi, "step_duration": math.pi / 5, "max_steps": 10,
        "batch_size": 32, "learning_rate": 0.002, "hidden_layers": [32, 64, 32],
        "fidelity_threshold": 0.999, "epochs": 10000, "activation": "relu",
        "memory_size": 20000, "replace_period": 200, "discount": 0.9,
        "epsilon_increment": 0.001, "epsilon_max": 0.95, "epsilon_eval": 1.0,
    },
    "case3": {
        "total_time": 2 * math.pi, "step_duration": math.pi / 5, "max_steps": 10,
        "batch_size": 32, "learning_rate": 0.001, "hidden_layers": [44, 88, 176, 88, 44],
        "fidelity_threshold": 0.999, "epochs": 10000, "activation": "relu",
        "memory_size": 20000, "replace_period": 200, "discount": 0.9,
        "epsilon_increment": 0.001, "epsilon_max": 0.95, "epsilon_eval": 1.0,
    },
}

# SL hyperparameters
TABLE3 = {
    "case12": {
        "total_time": 2 * math.pi, "step_duration": math.pi / 5, "max_steps": 10,
        "batch_size": 16, "learning_rate": 0.001, "hidden_layers": [32, 64, 32],
        "fidelity_threshold": 0.999, "epochs": 500, "activation": "relu",
    },
    "case3": {
        "total_time": 2 * math.pi, "step_duration": math.pi / 5, "max_steps": 10,
        "batch_size": 16, "learning_rate": 0.001, "hidden_layers": [44, 88, 176, 88, 44],
        "fidelity_threshold": 0.999, "epochs": 500, "activation": "relu",
    },
}

PROFILES = {"table2": TABLE2, "table3": TABLE3}
ALGORITHM_PROFILE = {"drl": "table2", "sl": "table3"}

# Not in the tables: validation cadence, reward shaping, dataset split.
EXTRA_DEFAULTS = {
    "drl": {"validation_interval": 200, "optimizer": "adam", "epsilon_advance": "learn_step",
            "reward": {"kind": "fidelity_gain_with_success_bonus", "success_reward": 10.0}},
    "sl": {"optimizer": "adam", "train_fraction": 0.8},
}

REFERENCE_BATH = BathParams(0.1, 4.0, 10.0)
SEED_NAMES = ("tasks", "init", "training", "rollout")


def table_defaults(algorithm: str, case: int, profile: str | None = None) -> dict:
    profile = profile or ALGORITHM_PROFILE[algorithm]
    column = "case3" if case == 3 else "case12"
    hyper = copy.deepcopy(PROFILES[profile][column])
    hyper.update(copy.deepcopy(EXTRA_DEFAULTS[algorithm]))
    return hyper


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    case: int
    algorithm: str
    bath: BathParams | None = None
    grid: dict | None = None
    seeds: dict = field(default_factory=lambda: {"tasks": 42, "init": 0, "training": 0, "rollout": 0})
    overrides: dict = field(default_factory=dict)
    zeeman: float = DEFAULT_ZEEMAN
    substeps: int = DEFAULT_SUBSTEPS
    fidelity_measure: str = "root"
    feature_scaling: list | None = None
    validation_baths: list | None = None
    paths: dict = field(default_factory=dict)
    defaults_profile: str | None = None

    def __post_init__(self):
        if self.case not in (1, 2, 3):
            raise ConfigError(f"case must be 1, 2 or 3, got {self.case!r}")
        if self.algorithm not in ("drl", "sl"):
            raise ConfigError(f"algorithm must be 'drl' or 'sl', got {self.algorithm!r}")
        if self.defaults_profile is None:
            self.defaults_profile = ALGORITHM_PROFILE[self.algorithm]
        if self.defaults_profile != ALGORITHM_PROFILE[self.algorithm]:
            raise ConfigError(f"profile {self.defaults_profile!r} does not match algorithm "
                              f"{self.algorithm!r}")
        self.seeds = {**{k: 0 for k in SEED_NAMES}, "tasks": 42, **self.seeds}
        env_seed = os.environ.get(SEED_ENV)
        if env_seed is not None:
            self.override_seeds(int(env_seed))
        if self.case == 2 and self.bath is None:
            raise ConfigError("case 2 needs a single bath (Gamma, gamma, T)")
        if self.case == 3 and self.bath is not None and self.grid is None:
            raise ConfigError("case 3 trains on a grid, not a single bath")

    def override_seeds(self, seed: int):
        for k in SEED_NAMES:
            self.seeds[k] = int(seed)

    @property
    def hyper(self) -> dict:
        h = table_defaults(self.algorithm, self.case, self.defaults_profile)
        for k, v in self.overrides.items():
            if k not in h:
                raise ConfigError(f"unknown hyperparameter override {k!r}")
            h[k] = v
        return h

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        width = 11 if self.case == 3 else 8
        return (width, *self.hyper["hidden_layers"], 27)

    def training_bath(self) -> BathParams | None:
        """Bath used while training cases 1 and 2 (case 1 is noise-free)."""
        if self.case == 1:
            ref = self.bath or REFERENCE_BATH
            return BathParams(0.0, ref.frequency, ref.temperature)
        return self.bath

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "case": self.case,
            "algorithm": self.algorithm,
            "defaults_profile": self.defaults_profile,
            "bath": self.bath.to_dict() if self.bath else None,
            "grid": self.grid,
            "seeds": dict(self.seeds),
            "overrides": dict(self.overrides),
            "zeeman": self.zeeman,
            "substeps": self.substeps,
            "fidelity_measure": self.fidelity_measure,
            "feature_scaling": self.feature_scaling,
            "validation_baths": self.validation_baths,
            "paths": dict(self.paths),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"config schema_version {version!r}, expected {SCHEMA_VERSION}")
        bath = d.pop("bath", None)
        if bath is not None:
            bath = BathParams.from_dict(bath)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(bath=bath, **d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def hash(self) -> str:
        """Digest of everything that affects results (paths excluded)."""
        d = self.to_dict()
        d.pop("paths")
        d["resolved_hyperparameters"] = self.hyper
        return stable_hash(d)


def stable_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def write_sidecar(path, **meta):
    """Metadata next to a CSV artifact: ``<name>.meta.json``."""
    meta = {"schema_version": SCHEMA_VERSION, **meta}
    write_json(Path(str(path) + ".meta.json"), meta)
