"""Command-line entry point: ``qpulse gen-tasks|train|eval|sweep|report``.

Every command reads an optional JSON experiment config (``--config``) and
writes CSV/JSON artifacts into ``--out``. Nothing is plotted; the CSV
columns are laid out so that figures can be drawn by an external tool.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .config import (REFERENCE_BATH, SEED_ENV, ConfigError, ExperimentConfig, file_hash,
                     stable_hash, write_json, write_sidecar)
from .dynamics import BathParams
from .rollout import RESULT_COLUMNS, Physics, Policy, evaluate, write_results
from .taskset import (DEFAULT_SHUFFLE_SEED, TaskSet, environment_grid, load_grid, save_grid)

log = logging.getLogger("qpulse")

SWEEP_AXES = {"Gamma": "coupling", "gamma": "frequency", "T": "temperature"}
SWEEP_DEFAULT_VALUES = {
    "Gamma": [0.0, 0.01, 0.05, 0.1, 0.2, 0.4],
    "gamma": [2.0, 4.0, 6.0, 8.0],
    "T": [5.0, 10.0, 15.0, 20.0],
}
SWEEP_COLUMNS = ["checkpoint", "case", "algorithm", "axis", "Gamma", "gamma", "T",
                 "mean_best_fidelity", "deviation_above", "deviation_below",
                 "mean_final_fidelity", "mean_steps", "mean_design_time", "success_rate",
                 "n_tasks", "seen_in_training"]


class CliError(Exception):
    """A user-facing error; reported without a traceback."""


# ---------------------------------------------------------------- helpers

def _out_dir(path) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise CliError(f"--out {out} exists and is not a directory")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _guard(path: Path, force: bool):
    if path.exists() and not force:
        raise CliError(f"{path} exists; pass --force to overwrite")


def _parse_bath(text: str) -> BathParams:
    try:
        G, g, T = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bath must be 'Gamma,gamma,T', got {text!r}") from None
    try:
        return BathParams(G, g, T)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _load_config(args) -> ExperimentConfig:
    """Config file (if any) plus command-line overrides; seed flags win last."""
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}") from exc
    if getattr(args, "case", None) is not None:
        doc["case"] = args.case
    if getattr(args, "algorithm", None) is not None:
        doc["algorithm"] = args.algorithm
    if getattr(args, "bath", None) is not None:
        doc["bath"] = args.bath.to_dict()
    doc.setdefault("case", 2)
    doc.setdefault("algorithm", "drl")
    if doc["case"] == 2 and doc.get("bath") is None:
        doc["bath"] = REFERENCE_BATH.to_dict()
    try:
        cfg = ExperimentConfig.from_dict(doc)
    except (ConfigError, TypeError, ValueError) as exc:
        raise CliError(f"invalid config: {exc}") from exc
    if args.seed is not None and os.environ.get(SEED_ENV) is None:
        cfg.override_seeds(args.seed)
    return cfg


def _taskset(path, cfg: ExperimentConfig | None = None) -> TaskSet:
    if path:
        try:
            return TaskSet.load(path)
        except (OSError, ValueError, KeyError) as exc:
            raise CliError(f"cannot load tasks file {path}: {exc}") from exc
    return TaskSet.default(cfg.seeds["tasks"] if cfg else DEFAULT_SHUFFLE_SEED)


def _grid(path):
    try:
        return load_grid(path)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(f"cannot load grid file {path}: {exc}") from exc


def _policy(path) -> Policy:
    try:
        return Policy.load(path)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot load checkpoint {path}: {exc}") from exc


def _physics_for(policy: Policy) -> Physics:
    meta = policy.metadata
    hyper = meta.get("hyperparameters", {})
    base = Physics()
    return Physics(meta.get("zeeman", base.zeeman), meta.get("substeps", base.substeps),
                   hyper.get("step_duration", base.duration), hyper.get("max_steps", base.max_steps),
                   hyper.get("fidelity_threshold", base.threshold),
                   meta.get("fidelity_measure", base.measure))


def _checkpoint_name(path) -> str:
    p = Path(path)
    return p.parent.name if p.name == "checkpoint.json" else p.stem


def seen_in_training(policy: Policy, bath: BathParams) -> bool:
    """Whether ``bath`` was part of the environments the model trained on."""
    meta = policy.metadata
    if policy.case == 3:
        grid = meta.get("grid")
        if not grid:
            return False
        return bath in {BathParams.from_dict(b) for b in grid["training"]}
    trained = meta.get("bath")
    return trained is not None and BathParams.from_dict(trained) == bath


# ---------------------------------------------------------------- commands

def cmd_gen_tasks(args) -> int:
    out = _out_dir(args.out)
    seed = args.seed if args.seed is not None else DEFAULT_SHUFFLE_SEED
    if os.environ.get(SEED_ENV) is not None:
        seed = int(os.environ[SEED_ENV])
    tasks_path, grid_path = out / "tasks.json", out / "grid.json"
    _guard(tasks_path, args.force)
    _guard(grid_path, args.force)
    grid_cfg = None
    if args.config:
        grid_cfg = json.loads(Path(args.config).read_text()).get("grid")
    ts = TaskSet.default(seed)
    ts.save(tasks_path)
    save_grid(environment_grid(grid_cfg), grid_path)
    for p in (tasks_path, grid_path):
        write_sidecar(p, seeds={"tasks": seed}, config_hash=stable_hash({"seed": seed,
                                                                          "grid": grid_cfg}),
                      sha256=file_hash(p), version=__version__)
    print(f"wrote {tasks_path} ({len(ts.tasks)} tasks: {len(ts.split.train)}/"
          f"{len(ts.split.validation)}/{len(ts.split.test)}) and {grid_path}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args.out)
    _guard(out / "checkpoint.json", args.force)
    tasks_path = args.tasks or cfg.paths.get("tasks")
    grid_path = args.grid or cfg.paths.get("grid")
    grid = None
    if cfg.case == 3:
        if not grid_path:
            raise CliError("case 3 training needs an environment grid file (--grid)")
        grid = _grid(grid_path)
    ts = _taskset(tasks_path, cfg)
    write_json(out / "config.json", cfg.to_dict())

    def progress(row):
        keys = [k for k in row if k != "epoch"][:3]
        log.info("epoch %s  %s", row["epoch"],
                 "  ".join(f"{k}={row[k]:.4f}" for k in keys))

    if cfg.algorithm == "drl":
        from .agent_drl import train
        res = train(cfg, ts, grid, out, progress)
        print(f"best validation F = {res.best_validation_fidelity:.4f} at epoch {res.best_epoch}")
    else:
        from .agent_sl import run_pipeline
        res = run_pipeline(cfg, ts, grid, out, progress)
        print(f"best validation loss = {res.best_validation_loss:.4f} at epoch {res.best_epoch}")
    print(f"checkpoint: {out / 'checkpoint.json'}")
    return 0


def cmd_eval(args) -> int:
    out = _out_dir(args.out)
    ts = _taskset(args.tasks)
    baths = args.bath or [REFERENCE_BATH]
    ids = ts.subset(args.subset)
    for ckpt in args.checkpoint:
        policy = _policy(ckpt)
        name = _checkpoint_name(ckpt)
        res_path, sum_path = out / f"{name}_results.csv", out / f"{name}_summary.json"
        _guard(res_path, args.force)
        summary = evaluate(policy, ts, ids, baths, _physics_for(policy), workers=args.workers)
        write_results(res_path, summary.rows)
        meta = policy.metadata
        doc = {
            "schema_version": 1, "checkpoint": str(ckpt), "checkpoint_sha256": file_hash(ckpt),
            "config_hash": meta.get("config_hash"), "seeds": meta.get("seeds"),
            "case": policy.case, "algorithm": policy.algorithm, "subset": args.subset,
            "baths": [b.to_dict() for b in baths], **summary.to_dict(),
        }
        write_json(sum_path, doc)
        write_sidecar(res_path, config_hash=meta.get("config_hash"), seeds=meta.get("seeds"),
                      checkpoint=str(ckpt))
        print(f"{name}: F={summary.mean_best_fidelity:.4f} "
              f"(+{summary.deviation_above:.4f}/-{summary.deviation_below:.4f})  "
              f"n={summary.mean_steps:.2f}  t={summary.mean_design_time:.4f}s")
    return 0


def sweep_points(axis: str, values) -> list[BathParams]:
    """Baths along one axis, the other two held at (Gamma, gamma, T) = (0.1, 4, 10)."""
    if axis not in SWEEP_AXES:
        raise CliError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_AXES)}")
    values = list(values)
    if not values:
        raise CliError(f"empty value list for sweep axis {axis!r}")
    ref = REFERENCE_BATH
    base = {"coupling": ref.coupling, "frequency": ref.frequency, "temperature": ref.temperature}
    return [BathParams(**{**base, SWEEP_AXES[axis]: float(v)}) for v in values]


def run_sweep(policies, ts, axes: dict, subset="test", workers=1) -> list[dict]:
    if not axes:
        raise CliError("sweep needs at least one axis")
    rows = []
    ids = ts.subset(subset)
    for axis, values in axes.items():
        points = sweep_points(axis, values)
        for name, policy in policies:
            for bath in points:
                # per-environment models are only meaningful at their own bath
                if policy.case == 2 and not seen_in_training(policy, bath):
                    continue
                s = evaluate(policy, ts, ids, [bath], _physics_for(policy), workers=workers)
                rows.append({
                    "checkpoint": name, "case": policy.case, "algorithm": policy.algorithm,
                    "axis": axis, "Gamma": bath.coupling, "gamma": bath.frequency,
                    "T": bath.temperature, "mean_best_fidelity": s.mean_best_fidelity,
                    "deviation_above": s.deviation_above, "deviation_below": s.deviation_below,
                    "mean_final_fidelity": s.mean_final_fidelity, "mean_steps": s.mean_steps,
                    "mean_design_time": s.mean_design_time, "success_rate": s.success_rate,
                    "n_tasks": len(s.rows), "seen_in_training": seen_in_training(policy, bath),
                })
                log.info("%s %s=%s F=%.4f", name, axis, getattr(bath, SWEEP_AXES[axis]),
                         s.mean_best_fidelity)
    return rows


def write_sweep(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def cmd_sweep(args) -> int:
    out = _out_dir(args.out)
    path = out / "sweep.csv"
    _guard(path, args.force)
    ts = _taskset(args.tasks)
    axes = {}
    for axis in args.axis or list(SWEEP_AXES):
        axes[axis] = SWEEP_DEFAULT_VALUES.get(axis, []) if args.values is None else args.values
    policies = [(_checkpoint_name(c), _policy(c)) for c in args.checkpoint]
    rows = run_sweep(policies, ts, axes, args.subset, args.workers)
    write_sweep(path, rows)
    write_sidecar(path, checkpoints=[str(c) for c in args.checkpoint],
                  config_hashes=[p.metadata.get("config_hash") for _, p in policies],
                  seeds=[p.metadata.get("seeds") for _, p in policies])
    print(f"wrote {path} ({len(rows)} rows)")
    return 0


def merge_csv(paths, out_path):
    """Concatenate CSV files that share one header; refuses mixed schemas."""
    header, rows = None, []
    for p in paths:
        with open(p, newline="") as fh:
            reader = csv.reader(fh)
            try:
                h = next(reader)
            except StopIteration:
                raise CliError(f"{p} is empty") from None
            if header is None:
                header = h
            elif h != header:
                raise CliError(f"{p}: columns {h} do not match {header}")
            rows.extend(reader)
    if header not in (RESULT_COLUMNS, SWEEP_COLUMNS):
        raise CliError(f"unrecognised columns {header}; expected a results or sweep file")
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return len(rows)


def cmd_report(args) -> int:
    out = Path(args.out)
    if out.exists() and not args.force and out.resolve() not in {Path(p).resolve()
                                                                for p in args.inputs}:
        raise CliError(f"{out} exists; pass --force to overwrite")
    missing = [p for p in args.inputs if not Path(p).is_file()]
    if missing:
        raise CliError(f"missing input files: {missing}")
    n = merge_csv(args.inputs, out)
    print(f"wrote {out} ({n} rows from {len(args.inputs)} files)")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON")
    common.add_argument("--seed", type=int, help="override every seed")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--workers", type=int, default=1, help="parallel rollout workers")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="qpulse", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-tasks", parents=[common], help="write tasks.json and grid.json")
    p.set_defaults(func=cmd_gen_tasks)

    p = sub.add_parser("train", parents=[common], help="train a DRL or SL model")
    p.add_argument("--case", type=int, choices=(1, 2, 3))
    p.add_argument("--algorithm", choices=("drl", "sl"))
    p.add_argument("--bath", type=_parse_bath, help="Gamma,gamma,T for case 1/2")
    p.add_argument("--tasks", help="tasks.json (default: regenerate)")
    p.add_argument("--grid", help="grid.json (required for case 3)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate checkpoints on a task subset")
    p.add_argument("checkpoint", nargs="+")
    p.add_argument("--tasks")
    p.add_argument("--bath", type=_parse_bath, action="append",
                   help="Gamma,gamma,T (repeatable; default 0.1,4,10)")
    p.add_argument("--subset", default="test", choices=("train", "validation", "test"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common], help="F-bar along Gamma, gamma or T")
    p.add_argument("checkpoint", nargs="+")
    p.add_argument("--tasks")
    p.add_argument("--axis", action="append", choices=sorted(SWEEP_AXES))
    p.add_argument("--values", type=float, nargs="*",
                   help="axis values (default depends on the axis)")
    p.add_argument("--subset", default="test", choices=("train", "validation", "test"))
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", parents=[common], help="merge result CSVs with a schema check")
    p.add_argument("inputs", nargs="+")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.command == "report" and args.out == ".":
        parser.error("report needs --out FILE")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"qpulse {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
