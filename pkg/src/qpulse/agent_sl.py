"""Supervised pulse designer: greedy one-step labels and an NLL classifier."""
from __future__ import annotations

import csv
import logging
import random
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import write_sidecar
from .dynamics import BathParams, EvolutionState, fidelity_measure, propagate_all_actions
from .encoding import POVM_CONVENTION, build_features, encode_density, feature_width
from .neural import (MlpParameters, Optimizer, forward, init_network, nll_loss_and_gradient,
                     save_checkpoint)
from .rollout import Physics

log = logging.getLogger(__name__)

CURVE_COLUMNS = ["epoch", "train_loss", "validation_loss", "validation_accuracy"]


@dataclass(frozen=True)
class LabeledExample:
    features: np.ndarray
    label: int
    fidelity_before: float
    fidelity_after: float
    task_id: int
    bath: BathParams


def greedy_label_step(state: EvolutionState, target, bath: BathParams,
                      physics: Physics = Physics(), return_states=False):
    """Try all 27 actions from the same snapshot and keep the best.

    Returns ``(best_action, fidelities)``; ties resolve to the lowest
    action index. With ``return_states`` the 27 end states are appended.
    """
    score = fidelity_measure(physics.measure)
    branches = propagate_all_actions(state, bath, physics.zeeman, physics.duration,
                                     physics.substeps)
    fids = np.array([score(b.rho, target) for b in branches])
    best = int(np.argmax(fids))
    if return_states:
        return best, fids, branches
    return best, fids


def greedy_rollout(rho_ini, rho_tar, bath, case, physics: Physics = Physics(),
                   scaling=None, task_id=-1) -> list[LabeledExample]:
    """Unfiltered greedy episode; one example per executed step."""
    score = fidelity_measure(physics.measure)
    state = EvolutionState.initial(rho_ini)
    p_tar = encode_density(rho_tar)
    f = score(state.rho, rho_tar)
    out = []
    for _ in range(physics.max_steps):
        if f >= physics.threshold:
            break
        s = build_features(encode_density(state.rho), p_tar, bath, case, scaling)
        a, fids, branches = greedy_label_step(state, rho_tar, bath, physics, return_states=True)
        out.append(LabeledExample(s, a, f, float(fids[a]), task_id, bath))
        state, f = branches[a], float(fids[a])
    return out


def keep_improving(examples):
    """Drop every step whose fidelity did not rise above the step before it."""
    return [e for e in examples if e.fidelity_after > e.fidelity_before]


@dataclass
class Dataset:
    examples: list[LabeledExample]
    n_train: int
    case: int

    @property
    def train(self):
        return self.examples[:self.n_train]

    @property
    def validation(self):
        return self.examples[self.n_train:]

    def arrays(self, part):
        rows = getattr(self, part)
        width = feature_width(self.case)
        X = np.array([e.features for e in rows]).reshape(-1, width)
        y = np.array([e.label for e in rows], dtype=int)
        return X, y


def generate_dataset(taskset, task_ids, baths, case, physics: Physics = Physics(), seed=0,
                     scaling=None, train_fraction=0.8) -> Dataset:
    """Greedy-label every (task, bath) pair, filter, shuffle and split."""
    task_ids = list(task_ids)
    if not task_ids:
        raise ValueError("no tasks to label")
    examples = []
    for bath in baths:
        for tid in task_ids:
            ini, tar = taskset.densities(tid)
            examples += keep_improving(greedy_rollout(ini, tar, bath, case, physics, scaling, tid))
    if not examples:
        raise ValueError("filtering left an empty dataset")
    random.Random(seed).shuffle(examples)
    return Dataset(examples, int(np.floor(train_fraction * len(examples))), case)


def write_dataset(path, ds: Dataset):
    width = feature_width(ds.case)
    cols = [f"f{i}" for i in range(width)] + ["label", "fidelity_before", "fidelity_after",
                                              "task_id", "Gamma", "gamma", "T", "subset"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for k, e in enumerate(ds.examples):
            w.writerow([repr(float(v)) for v in e.features]
                       + [e.label, repr(e.fidelity_before), repr(e.fidelity_after), e.task_id,
                          repr(e.bath.coupling), repr(e.bath.frequency), repr(e.bath.temperature),
                          "train" if k < ds.n_train else "validation"])


def read_dataset(path, case) -> Dataset:
    width = feature_width(case)
    examples, n_train = [], 0
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            bath = BathParams(float(row["Gamma"]), float(row["gamma"]), float(row["T"]))
            examples.append(LabeledExample(
                np.array([float(row[f"f{i}"]) for i in range(width)]), int(row["label"]),
                float(row["fidelity_before"]), float(row["fidelity_after"]),
                int(row["task_id"]), bath))
            n_train += row["subset"] == "train"
    return Dataset(examples, n_train, case)


@dataclass
class ClassifierResult:
    params: MlpParameters
    best_epoch: int
    best_validation_loss: float
    curve: list[dict]
    metadata: dict
    dataset: Dataset | None = None


def _evaluate(params, X, y):
    if len(X) == 0:
        return float("nan"), float("nan")
    logp = forward(params, X)
    loss = float(-np.mean(logp[np.arange(len(y)), y]))
    acc = float(np.mean(np.argmax(logp, axis=1) == y))
    return loss, acc


def train_classifier(ds: Dataset, layer_sizes, hyper: dict, init_seed=0, shuffle_seed=0,
                     progress=None):
    """Mini-batch NLL training; keeps the parameters with the lowest validation loss."""
    params = init_network(layer_sizes, init_seed, head="logsoftmax")
    opt = Optimizer(hyper.get("optimizer", "sgd"), hyper["learning_rate"])
    X, y = ds.arrays("train")
    Xv, yv = ds.arrays("validation")
    rng = np.random.default_rng(shuffle_seed)
    bs = hyper["batch_size"]
    curve = []
    best = (np.inf, 0, params.copy())
    for epoch in range(1, hyper["epochs"] + 1):
        order = rng.permutation(len(X))
        losses = []
        for start in range(0, len(X), bs):
            idx = order[start:start + bs]
            loss, grads = nll_loss_and_gradient(params, X[idx], y[idx])
            opt.step(params, grads)
            losses.append(loss * len(idx))
        vloss, vacc = _evaluate(params, Xv, yv)
        row = {"epoch": epoch, "train_loss": float(np.sum(losses) / max(len(X), 1)),
               "validation_loss": vloss, "validation_accuracy": vacc}
        curve.append(row)
        if vloss < best[0]:
            best = (vloss, epoch, params.copy())
        if progress:
            progress(row)
    if not np.isfinite(best[0]):
        # no validation rows: fall back to the final parameters
        best = (float("nan"), hyper["epochs"], params.copy())
    return ClassifierResult(best[2], best[1], best[0], curve, {})


def training_baths(cfg, grid):
    if cfg.case == 3:
        if grid is None:
            raise ValueError("case 3 needs an environment grid")
        return list(grid.training)
    return [cfg.training_bath()]


def run_pipeline(cfg, taskset, grid=None, out_dir=None, progress=None) -> ClassifierResult:
    """Dataset generation followed by classifier training for one config."""
    hyper = cfg.hyper
    physics = Physics.from_config(cfg)
    baths = training_baths(cfg, grid)
    ds = generate_dataset(taskset, taskset.subset("train"), baths, cfg.case, physics,
                          seed=cfg.seeds["training"], scaling=cfg.feature_scaling,
                          train_fraction=hyper["train_fraction"])
    log.info("dataset: %d examples (%d train)", len(ds.examples), ds.n_train)
    res = train_classifier(ds, cfg.layer_sizes, hyper, cfg.seeds["init"], cfg.seeds["training"],
                           progress)
    res.metadata = {
        "algorithm": "sl", "case": cfg.case, "config_hash": cfg.hash(), "seeds": dict(cfg.seeds),
        "epoch": res.best_epoch, "best_validation_loss": res.best_validation_loss,
        "bath": cfg.training_bath().to_dict() if cfg.case != 3 else None,
        "grid": grid.to_dict() if grid is not None and cfg.case == 3 else None,
        "povm_convention": POVM_CONVENTION, "feature_scaling": cfg.feature_scaling,
        "optimizer": hyper["optimizer"], "fidelity_measure": cfg.fidelity_measure,
        "zeeman": cfg.zeeman, "substeps": cfg.substeps, "hyperparameters": hyper,
        "dataset_size": len(ds.examples), "dataset_train_size": ds.n_train,
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_dataset(out / "dataset.csv", ds)
        write_sidecar(out / "dataset.csv", config_hash=cfg.hash(), seeds=cfg.seeds)
        save_checkpoint(out / "checkpoint.json", res.params, cfg.case, res.metadata)
        with open(out / "loss_curve.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS, lineterminator="\n")
            w.writeheader()
            for r in res.curve:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
        write_sidecar(out / "loss_curve.csv", config_hash=cfg.hash(), seeds=cfg.seeds)
    res.dataset = ds
    return res
