"""Command-line pipeline: collect -> train-model [-> train-teacher] -> run -> eval.

Every command writes its outputs into ``--out`` together with a ``config.json``
holding the fully resolved experiment configuration and seed.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict, fields
from typing import Sequence

import numpy as np

from . import __version__
from .envs import make_env
from .expr import write_policy
from .genetics import (
    GAConfig, PolicySpace, read_archive_csv, run_gprl, squash_fronts, write_archive_csv,
)
from .regressor import TrainConfig, TrainingDiverged
from .rl import (
    ModelFitness, RegressionFitness, RolloutConfig, TeacherConfig, TeacherPolicy,
    evaluate_real, make_imitation_dataset, train_teacher,
)
from .worldmodel import ModelConfig, TransitionDataset, WorldModel, build_world_model, \
    collect_transitions

log = logging.getLogger("gprl")

EXIT_USAGE = 2
EXIT_DATA = 3
CONFIG_SCHEMA_VERSION = 1


class DataError(RuntimeError):
    """Missing or unusable input artifact (exit code 3)."""


# -- configuration ----------------------------------------------------------------

_BASE = {
    "dataset": {"size": 10000, "episode_length": 100, "walk_scale": 1.0,
                "stop_on_absorption": None},
    "model": {**asdict(ModelConfig().train), "clip_to_data": True},
    "rollout": {"q": 0.05, "reward": "model", "eval_starts": 100, "eval_seed": 20240101,
                "eval_low": None, "eval_high": None},
    "teacher": {**asdict(TeacherConfig()), "starts": 100},
}

# full published scale ("paper") and a 10x smaller desk scale
PROFILES = {
    ("paper", "mc"): {"rollout": {"horizon": 200, "train_starts": 1000},
                      "ga": {"population_size": 100, "generations": 1000},
                      "regress": {"population_size": 1000, "generations": 1000, "samples": 70000}},
    ("paper", "cpb"): {"rollout": {"horizon": 100, "train_starts": 1000},
                       "ga": {"population_size": 1000, "generations": 1000},
                       "regress": {"population_size": 10000, "generations": 1000,
                                   "samples": 70000}},
    ("desk", "mc"): {"rollout": {"horizon": 200, "train_starts": 30},
                     "ga": {"population_size": 100, "generations": 100},
                     "regress": {"population_size": 100, "generations": 100, "samples": 7000}},
    ("desk", "cpb"): {"rollout": {"horizon": 100, "train_starts": 30},
                      "ga": {"population_size": 100, "generations": 100},
                      "regress": {"population_size": 1000, "generations": 100, "samples": 7000}},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def experiment_config(env: str, profile: str = "desk", seed: int = 0, mode: str = "gprl",
                      overrides: dict | None = None) -> dict:
    """Fully resolved experiment configuration as a JSON-ready dict."""
    if (profile, env) not in PROFILES:
        raise ValueError(f"no profile {profile!r} for environment {env!r}")
    cfg = _merge(_BASE, PROFILES[(profile, env)])
    cfg["ga"] = _merge(asdict(GAConfig()), cfg["ga"])
    cfg.update({"schema_version": CONFIG_SCHEMA_VERSION, "env": env, "profile": profile,
                "seed": seed, "mode": mode, "version": __version__})
    if overrides:
        cfg = _merge(cfg, overrides)
    if cfg["mode"] not in ("gprl", "regress"):
        raise ValueError(f"unknown mode {cfg['mode']!r}")
    return cfg


def _sub(cfg: dict, cls, section: dict):
    names = {f.name for f in fields(cls)}
    kw = {k: v for k, v in section.items() if k in names}
    if "hidden" in kw:
        kw["hidden"] = tuple(kw["hidden"])
    return cls(**kw)


def ga_config(cfg: dict, mode: str | None = None) -> GAConfig:
    section = dict(cfg["ga"])
    if (mode or cfg["mode"]) == "regress":
        section.update({k: v for k, v in cfg["regress"].items() if k != "samples"})
    section["seed"] = int(np.random.SeedSequence([cfg["seed"], 3]).generate_state(1)[0])
    return _sub(cfg, GAConfig, section)


def _rng(cfg: dict, stream: int) -> np.random.Generator:
    """Independent, reproducible random stream per pipeline stage."""
    return np.random.default_rng(np.random.SeedSequence([cfg["seed"], stream]))


def train_starts(cfg: dict, env) -> np.ndarray:
    return env.sample_starts(cfg["rollout"]["train_starts"], _rng(cfg, 2))


def eval_starts(cfg: dict, env) -> np.ndarray:
    r = cfg["rollout"]
    return env.sample_starts(r["eval_starts"], np.random.default_rng(r["eval_seed"]),
                             r.get("eval_low"), r.get("eval_high"))


# -- pipeline stages (library-level, used by the commands and the notebooks) --------

def stage_collect(cfg: dict) -> TransitionDataset:
    env = make_env(cfg["env"])
    d = cfg["dataset"]
    stop = d["stop_on_absorption"]
    if stop is None:
        stop = cfg["env"] == "cpb"
    data = collect_transitions(env, d["size"], _rng(cfg, 0), d["episode_length"],
                               walk_scale=d["walk_scale"], stop_on_absorption=stop)
    data.meta["seed"] = cfg["seed"]
    return data


def stage_train_model(cfg: dict, data: TransitionDataset):
    m = cfg["model"]
    mc = ModelConfig(_sub(cfg, TrainConfig, m), clip_to_data=m["clip_to_data"])
    return build_world_model(data, mc, _rng(cfg, 1))


def stage_train_teacher(cfg: dict, model: WorldModel):
    env = make_env(cfg["env"])
    t = cfg["teacher"]
    rc = RolloutConfig(cfg["rollout"]["horizon"], cfg["rollout"]["q"],
                       env.sample_starts(t["starts"], _rng(cfg, 4)))
    lo, hi = env.start_low, env.start_high
    # scale inputs by the start box and the model's state range
    mean = 0.5 * (model.state_low + model.state_high) if model.state_low is not None \
        else 0.5 * (lo + hi)
    std = 0.5 * (model.state_high - model.state_low) if model.state_low is not None \
        else np.ones_like(lo)
    return train_teacher(model, rc, _rng(cfg, 5), _sub(cfg, TeacherConfig, t), mean, std,
                         env.action_low, env.action_high)


def fitness_for(cfg: dict, model: WorldModel, teacher: TeacherPolicy | None = None):
    """The GA fitness of the configured mode plus a description for the manifest."""
    env = make_env(cfg["env"])
    r = cfg["rollout"]
    if cfg["mode"] == "gprl":
        rc = RolloutConfig(r["horizon"], r["q"], train_starts(cfg, env))
        return ModelFitness(model, rc, r["reward"], cfg["env"])
    if teacher is None:
        raise DataError("regress mode needs a teacher")
    n = max(1, cfg["regress"]["samples"] // r["horizon"])
    data = make_imitation_dataset(teacher, model, env.sample_starts(n, _rng(cfg, 6)),
                                  r["horizon"])
    return RegressionFitness(data)


def stage_run(cfg: dict, model: WorldModel, teacher: TeacherPolicy | None = None,
              on_generation=None):
    env = make_env(cfg["env"])
    fit = fitness_for(cfg, model, teacher)
    space = PolicySpace(env.state_dim, tuple(env.action_low), tuple(env.action_high))
    return run_gprl(ga_config(cfg), fit, space, on_generation=on_generation)


# -- I/O helpers ------------------------------------------------------------------------

def _write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _read_json(path, producer: str):
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        raise DataError(f"{path} not found; produce it with `gprl {producer}`")
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON ({e})")


def load_model(path) -> WorldModel:
    d = _read_json(path, "train-model")
    try:
        return WorldModel.from_dict(d)
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"{path}: not a world-model file ({e})")


def load_teacher(path) -> TeacherPolicy:
    d = _read_json(path, "train-teacher")
    try:
        return TeacherPolicy.from_dict(d)
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"{path}: not a teacher file ({e})")


def load_dataset(path) -> TransitionDataset:
    meta_path = os.path.splitext(path)[0] + ".meta.json"
    meta = _read_json(meta_path, "collect") if os.path.exists(meta_path) else {}
    try:
        return TransitionDataset.read_jsonl(path, meta)
    except FileNotFoundError:
        raise DataError(f"{path} not found; produce it with `gprl collect`")
    except (KeyError, ValueError, json.JSONDecodeError) as e:
        raise DataError(f"{path}: unreadable dataset ({e})")


def _prepare(args) -> dict:
    overrides = {}
    if args.config:
        overrides = _read_json(args.config, "--config")
    if getattr(args, "mode", None):
        overrides["mode"] = args.mode
    cfg = experiment_config(args.env, args.profile, args.seed,
                            overrides.pop("mode", "gprl"), overrides)
    if getattr(args, "workers", None):
        cfg["ga"]["workers"] = args.workers
    if getattr(args, "generations", None) is not None:
        cfg["ga"]["generations"] = args.generations
        cfg["regress"]["generations"] = args.generations
    os.makedirs(args.out, exist_ok=True)
    _write_json(os.path.join(args.out, "config.json"), cfg)
    return cfg


# -- commands ---------------------------------------------------------------------------

def cmd_collect(args) -> int:
    cfg = _prepare(args)
    if args.count is not None:
        cfg["dataset"]["size"] = args.count
        _write_json(os.path.join(args.out, "config.json"), cfg)
    data = stage_collect(cfg)
    path = os.path.join(args.out, "dataset.jsonl")
    data.write_jsonl(path)
    _write_json(os.path.join(args.out, "dataset.meta.json"), data.meta)
    print(f"wrote {len(data)} transitions to {path}")
    return 0


def cmd_train_model(args) -> int:
    cfg = _prepare(args)
    data = load_dataset(args.data)
    if data.meta.get("env", cfg["env"]) != cfg["env"]:
        raise DataError(f"{args.data} holds {data.meta['env']} data, not {cfg['env']}")
    try:
        model, reports = stage_train_model(cfg, data)
    except TrainingDiverged as e:
        raise DataError(f"world-model training diverged: {e}")
    model.provenance.update({"dataset": os.path.abspath(args.data), "seed": cfg["seed"]})
    path = os.path.join(args.out, "model.json")
    model.save(path)
    _write_json(os.path.join(args.out, "model_report.json"),
                {k: r.to_dict() for k, r in reports.items()})
    for k, r in reports.items():
        print(f"{k}: train {r.train_mse:.3g}  val {r.val_mse:.3g}  gen {r.gen_mse:.3g}  "
              f"R2 {r.gen_r2:.4f}  epochs {r.epochs} (best {r.best_epoch})")
    print(f"wrote {path}")
    return 0


def cmd_train_teacher(args) -> int:
    cfg = _prepare(args)
    model = load_model(args.model)
    teacher, report = stage_train_teacher(cfg, model)
    path = os.path.join(args.out, "teacher.json")
    _write_json(path, teacher.to_dict())
    _write_json(os.path.join(args.out, "teacher_report.json"),
                {"method": report.method, "model_fitness": report.fitness,
                 "restarts": report.restarts_used})
    print(f"teacher ({report.method}) model penalty {-report.fitness:.4f}; wrote {path}")
    return 0


def cmd_run(args) -> int:
    cfg = _prepare(args)
    model = load_model(args.model)
    teacher = None
    if cfg["mode"] == "regress":
        if args.teacher:
            teacher = load_teacher(args.teacher)
        else:
            log.info("no --teacher given; training one")
            teacher, _ = stage_train_teacher(cfg, model)
            _write_json(os.path.join(args.out, "teacher.json"), teacher.to_dict())

    def progress(gen, pop, archive):
        if args.verbose and gen % 10 == 0:
            best = max(archive.slots.values(), key=lambda s: s.fitness)
            print(f"gen {gen}: {len(archive)} levels, best {best.fitness:.4f} "
                  f"(complexity {best.complexity})", flush=True)

    res = stage_run(cfg, model, teacher, progress)
    env = make_env(cfg["env"])
    names = list(env.state_names)
    members = res.archive.members()
    write_archive_csv(os.path.join(args.out, "archive.csv"), members, names=names)
    pol_dir = os.path.join(args.out, "policies")
    os.makedirs(pol_dir, exist_ok=True)
    for m in members:
        write_policy(os.path.join(pol_dir, f"c{m.complexity:03d}.txt"), m.policy, names)
    _write_json(os.path.join(args.out, "manifest.json"), {
        "env": cfg["env"], "mode": cfg["mode"], "seed": cfg["seed"], "config": cfg,
        "model": os.path.abspath(args.model), "generations": res.generations,
        "evaluations": res.evaluations, "wall_time": res.wall_time,
        "archive_levels": len(res.archive), "front_size": len(res.archive.front())})
    print(f"{res.generations} generations, {len(members)} complexity levels, "
          f"{res.wall_time:.1f} s; wrote {args.out}/archive.csv")
    return 0


def _load_run(run_dir):
    manifest = _read_json(os.path.join(run_dir, "manifest.json"), "run")
    env = make_env(manifest["env"])
    try:
        archive, _ = read_archive_csv(os.path.join(run_dir, "archive.csv"), env.action_low,
                                      env.action_high, env.state_names)
    except FileNotFoundError:
        raise DataError(f"{run_dir}/archive.csv not found; produce it with `gprl run`")
    return manifest, archive


def cmd_eval(args) -> int:
    cfg = _prepare(args)
    env = make_env(cfg["env"])
    starts = eval_starts(cfg, env)
    rc = RolloutConfig(cfg["rollout"]["horizon"], cfg["rollout"]["q"], starts)
    per_run = []
    for run_dir in args.runs:
        manifest, archive = _load_run(run_dir)
        if manifest["env"] != cfg["env"]:
            raise DataError(f"{run_dir} was run on {manifest['env']}, not {cfg['env']}")
        rows = evaluate_real(archive, env, rc, env.state_names)
        name = os.path.basename(os.path.normpath(run_dir))
        with open(os.path.join(args.out, f"eval_{name}.csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["complexity", "model_penalty", "real_penalty", "success_rate",
                        "expression"])
            for r in rows:
                w.writerow([r.complexity, repr(r.model_penalty), repr(r.real_penalty),
                            r.success_rate, r.expression])
        per_run.append([(r.complexity, r.real_penalty) for r in rows])
    table = squash_fronts([], penalties=per_run)
    path = os.path.join(args.out, "squashed.csv")
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["complexity", "median", "min", "max", "runs"])
        for row in table:
            w.writerow([row.complexity, repr(row.median), repr(row.min), repr(row.max), row.runs])
    print(f"evaluated {len(per_run)} run(s) on {len(starts)} fresh starts; wrote {path}")
    return 0


def cmd_pareto_export(args) -> int:
    manifest, archive = _load_run(args.run)
    env = make_env(manifest["env"])
    os.makedirs(args.out, exist_ok=True)
    front = archive.front()
    write_archive_csv(os.path.join(args.out, "front.csv"), front, names=env.state_names)
    for m in front:
        write_policy(os.path.join(args.out, f"front_c{m.complexity:03d}.txt"), m.policy,
                     env.state_names)
    _write_json(os.path.join(args.out, "config.json"), manifest["config"])
    print(f"exported {len(front)} front members to {args.out}")
    return 0


# -- argument parsing -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gprl", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, env_required=True):
        sp.add_argument("--env", choices=["mc", "cpb"], required=env_required)
        sp.add_argument("--config", help="JSON file overriding profile values")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--profile", choices=["paper", "desk"], default="desk")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    sp = common(sub.add_parser("collect", help="roll exploratory trajectories"))
    sp.add_argument("--count", type=int, help="number of transitions")
    sp.set_defaults(func=cmd_collect)

    sp = common(sub.add_parser("train-model", help="fit the world model"))
    sp.add_argument("--data", required=True)
    sp.set_defaults(func=cmd_train_model)

    sp = common(sub.add_parser("train-teacher", help="fit the neural teacher on a model"))
    sp.add_argument("--model", required=True)
    sp.set_defaults(func=cmd_train_teacher)

    sp = common(sub.add_parser("run", help="evolve policies"))
    sp.add_argument("--model", required=True)
    sp.add_argument("--teacher")
    sp.add_argument("--mode", choices=["gprl", "regress"])
    sp.add_argument("--workers", type=int)
    sp.add_argument("--generations", type=int)
    sp.set_defaults(func=cmd_run)

    sp = common(sub.add_parser("eval", help="real-dynamics evaluation and squashed fronts"))
    sp.add_argument("runs", nargs="+", help="run directories produced by `gprl run`")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("pareto-export", help="write the non-dominated front of a run")
    sp.add_argument("run", help="run directory")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_pareto_export)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"error: {e.filename or ''}: {e.strerror or e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
