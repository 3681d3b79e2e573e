"""Command-line entry point: stage orchestration, configuration, run management.

Commands: pretrain, transfer, eval, validate-task, inspect-model. Exit codes:
0 success, 1 validation/configuration error, 2 runtime fault. Configuration
is file-first with flag overrides (flags > file > defaults); every run
directory receives a resolved config snapshot, a version string, and the
seed, which together reproduce the run bit-exactly.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__, nets
from .eval_harness import (
    EvalSetup, converged_iteration, export_trajectory, robustness_grid,
    write_robustness_csv,
)
from .homotopy import interpolate_model
from .ppo import TrainConfig, Trainer, train_stage
from .rigid_body.model import ModelError, builtin_model_path, load_model, nominal_composite
from .tasks import TaskError, resolve_task

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

_BASELINE_ALIASES = {"ours": "ours", "direct": "direct_transfer",
                     "direct_transfer": "direct_transfer", "vanilla": "vanilla"}


def _apply_thread_cap() -> None:
    cap = os.environ.get("HOMOTOPY_GYM_THREADS")
    if cap:
        import numba

        numba.set_num_threads(max(1, int(cap)))


def _version_string() -> str:
    version = f"homotopy-gym {__version__}"
    try:
        desc = subprocess.run(["git", "describe", "--always", "--dirty"],
                              capture_output=True, text=True, timeout=5,
                              cwd=Path(__file__).parent)
        if desc.returncode == 0:
            version += f" ({desc.stdout.strip()})"
    except (OSError, subprocess.SubprocessError):
        pass
    return version


def _load_config(args) -> TrainConfig:
    """Precedence: command-line --set overrides > config file > defaults."""
    data = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            data.update(yaml.safe_load(fh) or {})
    for item in getattr(args, "set", None) or []:
        key, _, value = item.partition("=")
        if not _:
            raise TaskError(f"--set {item}", "expected key=value")
        data[key] = yaml.safe_load(value)
    field_names = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(data) - field_names
    if unknown:
        raise TaskError("config", f"unknown config keys: {sorted(unknown)}")
    for name in ("policy_hidden", "value_hidden"):
        if name in data:
            data[name] = tuple(data[name])
    return TrainConfig(**data)


def _snapshot(out_dir: Path, config: TrainConfig, args, extra=None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    snap = {
        "version": _version_string(),
        "command": " ".join(sys.argv),
        "seed": config.seed,
        "config": dataclasses.asdict(config),
        "task": str(args.task),
        "model": str(getattr(args, "model", "") or builtin_model_path()),
    }
    if extra:
        snap.update(extra)
    with open(out_dir / "config.json", "w") as fh:
        json.dump(snap, fh, indent=2, sort_keys=True, default=list)


def _get_model(args):
    path = getattr(args, "model", None) or builtin_model_path()
    return load_model(path)


def cmd_pretrain(args) -> int:
    config = _load_config(args)
    config = dataclasses.replace(config, stage="srb", seed=args.seed)
    if args.iterations:
        config = dataclasses.replace(config, iterations=args.iterations)
    task = resolve_task(args.task)
    model = _get_model(args)
    out_dir = Path(args.out)
    _snapshot(out_dir, config, args)
    train_stage(config, task, model, out_dir, eval_every=args.eval_every or 0)
    print(f"pretraining complete: {out_dir / 'checkpoint_final.bin'}")
    return EXIT_OK


def cmd_transfer(args) -> int:
    baseline = _BASELINE_ALIASES.get(args.baseline)
    if baseline is None:
        raise TaskError("--baseline", f"unknown baseline {args.baseline!r}")
    config = _load_config(args)
    config = dataclasses.replace(config, stage="homotopy", baseline=baseline,
                                 seed=args.seed)
    task = resolve_task(args.task)
    model = _get_model(args)
    checkpoint = args.checkpoint
    if baseline == "vanilla":
        checkpoint = None
    elif checkpoint is None:
        raise TaskError("--checkpoint", f"{baseline} transfer needs a pretrained checkpoint")
    else:
        payload = nets.load_checkpoint(checkpoint)
        expected = nets.OBS_DIM + nets.COMMAND_DIM
        if payload.get("obs_dim") != expected:
            print(f"error: checkpoint/task mismatch: checkpoint observation "
                  f"dimension {payload.get('obs_dim')} != expected {expected}",
                  file=sys.stderr)
            return EXIT_VALIDATION
    out_dir = Path(args.out)
    _snapshot(out_dir, config, args, {"checkpoint_in": str(checkpoint)})
    train_stage(config, task, model, out_dir, checkpoint_path=checkpoint)
    print(f"transfer complete: {out_dir / 'checkpoint_final.bin'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    task = resolve_task(args.task)
    model = _get_model(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.mode == "metrics":
        import csv as _csv

        with open(args.metrics or args.checkpoint, newline="") as fh:
            rows = list(_csv.DictReader(fh))
        series = np.array([float(r["return_mean"]) for r in rows])
        conv = converged_iteration(series, window=args.window)
        out = {"converged_iteration": conv, "final_mean":
               float(series[-args.window:].mean()) if len(series) > args.window else None}
        with open(out_dir / "convergence.json", "w") as fh:
            json.dump(out, fh, indent=2)
        print(json.dumps(out))
        return EXIT_OK

    payload = nets.load_checkpoint(args.checkpoint)
    setup = EvalSetup.from_checkpoint(payload, task, model)
    if args.mode == "trajectory":
        path = out_dir / "trajectory.csv"
        commands = None
        if task.has_commands and args.command:
            commands = np.array([[float(x) for x in args.command.split(",")]])
        result = export_trajectory(setup, path, seed=args.seed, commands=commands)
        print(f"trajectory written to {path} (success={bool(result.success[0])}, "
              f"return={result.returns[0]:.3f})")
        return EXIT_OK
    if args.mode == "robustness":
        forces = [float(x) for x in args.grid_forces.split(",")]
        torques = [float(x) for x in args.grid_torques.split(",")]
        grid = robustness_grid(setup, forces, torques,
                               n_directions=args.directions, seed=args.seed)
        path = out_dir / ("robustness_long.csv" if args.plot_data else "robustness.csv")
        write_robustness_csv(grid, path, plot_data=args.plot_data)
        print(f"robustness grid written to {path}")
        return EXIT_OK
    raise TaskError("--mode", f"unknown eval mode {args.mode!r}")


def cmd_validate_task(args) -> int:
    task = resolve_task(args.task)
    print(f"task {task.name!r} ({task.family}) is valid:")
    print(f"  duration {task.duration} s, {len(task.rewards.terms)} reward terms")
    plan = task.plan
    if plan.periodic:
        print(f"  periodic plan: stance {plan.stance_duration} s, swing "
              f"{plan.swing_duration} s")
    else:
        print(f"  interval plan with clock offset {plan.clock_offset} s")
    if task.keyframes is not None:
        print(f"  {len(task.keyframes.frames)} keyframe phases")
    return EXIT_OK


def cmd_inspect_model(args) -> int:
    model = _get_model(args)
    lams = [float(x) for x in args.lambdas.split(",")]
    print(f"model {model.name!r}: {model.n_links} links, total mass "
          f"{model.total_mass:.6f} kg")
    for lam in lams:
        m = interpolate_model(model, lam)
        mc, ic, cc = nominal_composite(m)
        print(f"lambda={lam:<6g} total={sum(l.mass for l in m.links):.9f} kg  "
              f"trunk={m.links[0].mass:.6f} kg  composite inertia diag="
              f"({ic[0, 0]:.5f}, {ic[1, 1]:.5f}, {ic[2, 2]:.5f})  com="
              f"({cc[0]:.5f}, {cc[1]:.5f}, {cc[2]:.5f})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="homotopy-gym",
        description="SRB pretraining and model-homotopy transfer for quadruped "
                    "motion policies")
    parser.add_argument("--version", action="version", version=_version_string())
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, needs_out=True):
        p.add_argument("--task", required=True, help="task name or task file path")
        p.add_argument("--model", help="robot model file (default: built-in quadruped)")
        p.add_argument("--seed", type=int, default=0)
        if needs_out:
            p.add_argument("--out", required=True, help="run output directory")
        p.add_argument("--config", help="YAML training-config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config field (repeatable)")

    p = sub.add_parser("pretrain", help="SRB pretraining stage")
    add_common(p)
    p.add_argument("--iterations", type=int)
    p.add_argument("--eval-every", type=int, default=0)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("transfer", help="transfer to the full-body environment")
    add_common(p)
    p.add_argument("--checkpoint", help="pretraining checkpoint (ours/direct)")
    p.add_argument("--baseline", default="ours",
                   choices=sorted(_BASELINE_ALIASES))
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("eval", help="evaluate a checkpoint or a metrics series")
    add_common(p)
    p.add_argument("--checkpoint", required=True,
                   help="checkpoint file (or metrics.csv in metrics mode)")
    p.add_argument("--mode", required=True,
                   choices=("trajectory", "robustness", "metrics"))
    p.add_argument("--metrics", help="metrics.csv path for metrics mode")
    p.add_argument("--window", type=int, default=100)
    p.add_argument("--command", help="vx,vy,yaw_rate for trajectory evaluation")
    p.add_argument("--grid-forces", default="0,5,10,15,20,25")
    p.add_argument("--grid-torques", default="0,1,2,3,4,5")
    p.add_argument("--directions", type=int, default=100)
    p.add_argument("--plot-data", action="store_true",
                   help="emit tidy long-format CSV instead of the matrix")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("validate-task", help="validate a task file")
    p.add_argument("--task", required=True)
    p.set_defaults(func=cmd_validate_task)

    p = sub.add_parser("inspect-model",
                       help="print composite mass/inertia at sampled lambda")
    p.add_argument("--model")
    p.add_argument("--lambdas", default="0.01,0.25,0.5,0.75,1.0")
    p.set_defaults(func=cmd_inspect_model)
    return parser


def main(argv=None) -> int:
    _apply_thread_cap()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (TaskError, ModelError, FileNotFoundError, NotImplementedError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (FloatingPointError, RuntimeError, OSError) as exc:
        print(f"runtime fault: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
