"""Command-line entry point: ``compliant <command> ...``.

Exit codes: 0 on success, 1 on a runtime failure (diagnostic on stderr),
2 on a usage error. ``COMPLIANT_LOG`` sets the log level.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import CompliantError

log = logging.getLogger("compliant")

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


def _floats(text: str, n: int | None = None, what: str = "value") -> list[float]:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"{what}: expected comma-separated numbers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise UsageError(f"{what}: expected {n} numbers, got {len(vals)}")
    return vals


def _ints(text: str, n: int, what: str) -> list[int]:
    vals = _floats(text, n, what)
    if any(v != int(v) for v in vals):
        raise UsageError(f"{what}: expected integers, got {text!r}")
    return [int(v) for v in vals]


def _ranges(text: str, n_cables: int) -> list[tuple[float, float]]:
    parts = text.split(",")
    out = []
    for p in parts:
        lo_hi = p.split(":")
        if len(lo_hi) != 2:
            raise UsageError(f"--range: expected lo:hi, got {p!r}")
        lo, hi = _floats(lo_hi[0], 1, "--range")[0], _floats(lo_hi[1], 1, "--range")[0]
        if lo > hi:
            raise UsageError(f"--range: empty interval {p!r}")
        out.append((lo, hi))
    if len(out) == 1:
        out = out * n_cables
    if len(out) != n_cables:
        raise UsageError(f"--range: {len(out)} intervals for {n_cables} cables")
    return out


def _write_json(path, data) -> None:
    Path(path).write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


# ------------------------------------------------------------------ commands

def cmd_mesh_gen(args) -> int:
    from .mesh import build_box_mesh, save_mesh

    dims = _floats(args.dims, 3, "--dims")
    res = _ints(args.res, 3, "--res")
    mesh = build_box_mesh(dims, res)
    save_mesh(mesh, args.output)
    log.info("wrote %d nodes, %d tets to %s", mesh.n_nodes, mesh.n_tets, args.output)
    return 0


def cmd_collect(args) -> int:
    from .learn import collect, save_dataset
    from .robot import load_robot

    robot = load_robot(args.robot)
    sc = robot.scenario
    if args.range:
        ranges = _ranges(args.range, len(robot.cables))
    elif "course" in sc:
        ranges = [tuple(sc["course"])] * len(robot.cables)
    else:
        raise UsageError("--range is required for robots without a default course")
    samples = args.samples if args.samples is not None else sc.get("samples")
    if samples is None or samples < 1:
        raise UsageError("--samples must be a positive integer")
    ds = collect(robot, ranges, samples, seed=args.seed, jobs=args.jobs)
    if "train" in sc:
        ds.meta["train_hint"] = sc["train"]
    save_dataset(ds, args.output)
    log.info("wrote %d training and %d test samples", len(ds.train), len(ds.test))
    if ds.meta["skipped"]:
        print(f"warning: {len(ds.meta['skipped'])} point(s) did not converge and were skipped",
              file=sys.stderr)
    return 0


def cmd_train(args) -> int:
    from .learn import TrainConfig, load_dataset, train

    ds = load_dataset(args.data)
    hidden = None
    if args.hidden:
        hidden = tuple(_ints(args.hidden, args.arch - 1, "--hidden"))
    elif ds.meta.get("train_hint", {}).get("hidden") and not args.weights:
        hint = ds.meta["train_hint"]["hidden"]
        if len(hint) == args.arch - 1:
            hidden = tuple(hint)
    if args.arch < 1:
        raise UsageError("--arch must be at least 1")
    cfg = TrainConfig(
        n_layers=args.arch, hidden=hidden, weights=args.weights or 400, lr=args.lr,
        epochs=args.epochs, batch=args.batch, seed=args.seed, patience=args.patience,
    )
    model, _ = train(ds, cfg)
    model.save(args.output)
    log.info("best test loss %.3e at epoch %d", model.meta["best_test_loss"], model.meta["best_epoch"])
    return 0


def _load_goals(spec: str, session) -> np.ndarray:
    from .control import scenario_circle

    if spec.startswith("circle:"):
        try:
            n = int(spec.split(":", 1)[1])
        except ValueError:
            raise UsageError(f"--goals: bad circle count in {spec!r}") from None
        return scenario_circle(session, n)
    path = Path(spec)
    if not path.exists():
        raise UsageError(f"--goals: {spec!r} is neither circle:N nor an existing file")
    if path.suffix == ".json":
        goals = np.asarray(json.loads(path.read_text()), dtype=float)
    else:
        goals = np.loadtxt(path, delimiter=",", ndmin=2)
    return goals.reshape(-1, 3)


def _control_config(args, robot):
    from .control import ControlConfig

    tol = args.tol if args.tol is not None else 0.005 * robot.height
    return ControlConfig(mode=args.mode, tol_goal=tol, max_steps=args.max_steps, alpha=args.alpha,
                         tol_newton=args.tol_newton)


def _surrogate(args):
    from .learn import SurrogateModel

    if args.mode == "learned":
        if not args.model:
            raise UsageError("--mode learned requires --model")
        return SurrogateModel.load(args.model)
    return None


def cmd_control(args) -> int:
    from .control import ControlSession, run_trajectory, write_trajectory_csv
    from .robot import load_robot

    robot = load_robot(args.robot)
    session = ControlSession(robot, _control_config(args, robot), _surrogate(args))
    goals = _load_goals(args.goals, session)
    results = run_trajectory(session, goals)
    write_trajectory_csv(args.output, session.records)
    failed = [i for i, r in enumerate(results) if not r.converged]
    if failed:
        print(f"error: {len(failed)} of {len(results)} goals not reached: {failed}", file=sys.stderr)
        return 1
    return 0


def cmd_grasp(args) -> int:
    from .control import GraspSession, run_grasp, write_grasp_csv
    from .robot import load_robot

    robot = load_robot(args.robot)
    sc = robot.scenario.get("grasp", {})
    plane = args.plane if args.plane is not None else sc.get("plane")
    goal = _floats(args.goal, 3, "--goal") if args.goal else sc.get("goal")
    beta = _floats(args.beta, 3, "--beta") if args.beta else sc.get("beta", [0.0, 0.0, 0.0])
    if plane is None or goal is None:
        raise UsageError("--plane and --goal are required for robots without a grasp scenario")
    args.tol_newton = min(args.tol_newton, 1e-12)
    session = GraspSession(robot, float(plane), _control_config(args, robot), _surrogate(args))
    result = run_grasp(session, goal, beta)
    write_grasp_csv(args.output, session.records, goal, beta)
    if not result.converged:
        print(f"error: grasp goal not reached (error {result.final_error:.4g})", file=sys.stderr)
        return 1
    return 0


def cmd_evaluate(args) -> int:
    from .control import read_final_errors

    report = {}
    for mode, path in (("full", args.full), ("learned", args.learned)):
        if path is None:
            continue
        e = read_final_errors(path)
        report[mode] = {"goals": int(len(e)), "mean_final_error": float(e.mean()) if len(e) else 0.0,
                        "max_final_error": float(e.max()) if len(e) else 0.0}
    if not report:
        raise UsageError("give --full and/or --learned")
    if "full" in report and "learned" in report and report["full"]["mean_final_error"] > 0:
        report["mean_ratio"] = report["learned"]["mean_final_error"] / report["full"]["mean_final_error"]
    text = json.dumps(report, indent=1, sort_keys=True) + "\n"
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for all randomness (default 0)")

    ctl = argparse.ArgumentParser(add_help=False)
    ctl.add_argument("--robot", required=True, help="robot config JSON or reference name")
    ctl.add_argument("--mode", choices=("full", "learned"), default="full")
    ctl.add_argument("--model", help="trained surrogate (learned mode)")
    ctl.add_argument("--tol", type=float, help="goal tolerance (default 0.5%% of robot height)")
    ctl.add_argument("--max-steps", type=int, default=50)
    ctl.add_argument("--alpha", type=float, default=0.25, help="per-step course fraction")
    ctl.add_argument("--tol-newton", type=float, default=1e-6)
    ctl.add_argument("-o", "--output", required=True)

    p = argparse.ArgumentParser(prog="compliant", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("mesh-gen", parents=[common], help="write a box tetrahedral mesh")
    s.add_argument("--dims", required=True, help="box extents x,y,z")
    s.add_argument("--res", required=True, help="cells per axis i,j,k")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_mesh_gen)

    s = sub.add_parser("collect", parents=[common], help="sweep cable pull-ins into a dataset")
    s.add_argument("--robot", required=True)
    s.add_argument("--range", help="lo:hi for every cable, or one lo:hi per cable separated by commas")
    s.add_argument("--samples", type=int, help="grid points per cable")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_collect)

    s = sub.add_parser("train", parents=[common], help="fit the surrogate network")
    s.add_argument("--data", required=True)
    s.add_argument("--arch", type=int, default=3, help="number of layers")
    s.add_argument("--hidden", help="hidden widths, comma-separated")
    s.add_argument("--weights", type=int, help="target weight count when --hidden is absent")
    s.add_argument("--epochs", type=int, default=10000)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--batch", type=int, default=64)
    s.add_argument("--patience", type=int, help="stop after this many epochs without improvement")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("control", parents=[common, ctl], help="reach a goal schedule")
    s.add_argument("--goals", default="circle:30", help="circle:N or a JSON/CSV goal file")
    s.set_defaults(func=cmd_control)

    s = sub.add_parser("grasp", parents=[common, ctl], help="coupled two-finger grasp")
    s.add_argument("--plane", type=float, help="mirror plane x position for finger 2")
    s.add_argument("--goal", help="goal for finger 1's effector x,y,z")
    s.add_argument("--beta", help="object offset x,y,z")
    s.set_defaults(func=cmd_grasp)

    s = sub.add_parser("evaluate", parents=[common], help="compare trajectory logs")
    s.add_argument("--full")
    s.add_argument("--learned")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    level = LOG_LEVELS.get(os.environ.get("COMPLIANT_LOG", "warn").lower(), logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"compliant: error: {exc}", file=sys.stderr)
        return 2
    except (CompliantError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
