"""``shield`` command line: generate | train | eval | solve | validate.

Errors are reported as a single line ``shield: error: <kind>: <message>`` on
stderr.  Exit codes: 0 success, 1 runtime failure or violations found,
2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .core import brute_force_optimal, check_instance, solution_cost, validate
from .errors import InputError, ShieldError
from .instance_gen import (GenConfig, SolutionRecord, generate_instances, read_instances,
                           read_solutions, resolve_source, write_instances, write_solutions)
from .tasks import TASK_NAMES, TaskSpec

log = logging.getLogger("shield_vrp")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"{self.prog}: error: usage: {message}\n")


def _task(name: str) -> TaskSpec:
    try:
        return TaskSpec.from_name(name)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"unknown task {name!r}; valid tasks: {', '.join(TASK_NAMES)}") from None


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("SHIELD_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise InputError(f"SHIELD_SEED must be an integer, got {env!r}") from None


def _set_threads(n: int) -> None:
    if n < 1:
        raise InputError("--threads must be >= 1")
    from ._accel import USE_NUMBA
    if USE_NUMBA:
        import numba
        avail = numba.config.NUMBA_NUM_THREADS
        if n < avail:   # only touch the threading layer when actually capping
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                numba.set_num_threads(n)


def _load_instances(path):
    instances = read_instances(path)
    for i, inst in enumerate(instances, 1):
        try:
            check_instance(inst, inst.task)
        except ShieldError as e:
            raise InputError(f"{path}:{i}: {e}") from None
    return instances


def _load_params(path):
    from .training import load_checkpoint
    return load_checkpoint(path).to_state().params


# ----------------------------------------------------------------- commands

def cmd_generate(args) -> int:
    seed = _seed(args)
    cfg = GenConfig(n=args.n, capacity=args.capacity, seed=seed)
    source = resolve_source(args.dist)
    instances = generate_instances(source, args.task, cfg, args.count, seed=seed)
    write_instances(args.out, instances)
    print(f"generated {len(instances)} {args.task.name} instances (n={args.n}, seed={seed}) "
          f"-> {args.out}")
    return 0


def cmd_train(args) -> int:
    from .training import TrainConfig, train
    if args.config is None and args.resume is None:
        raise InputError("train needs --config or --resume")
    cfg = None
    if args.config is not None:
        raw = json.loads(Path(args.config).read_text())
        if not isinstance(raw, dict):
            raise InputError(f"{args.config}: config must be a JSON object")
        # flags take precedence over the JSON file
        for key in ("epochs", "seed", "learn_rate"):
            val = getattr(args, key)
            if val is not None:
                raw[key] = val
        if args.seed is None and "seed" not in raw and "SHIELD_SEED" in os.environ:
            raw["seed"] = _seed(args)
        cfg = TrainConfig.from_dict(raw)
    metrics = args.metrics or str(args.out) + ".metrics.csv"
    state = train(cfg, args.out, metrics, resume=args.resume, epochs=args.epochs)
    print(f"trained to epoch {state.epoch}; checkpoint -> {args.out}; metrics -> {metrics}")
    return 0


def cmd_eval(args) -> int:
    from .evaluation import evaluate
    params = _load_params(args.ckpt)
    instances = _load_instances(args.instances)
    refs = read_solutions(args.refs) if args.refs else None
    rng = np.random.default_rng(_seed(args)) if args.samples else None
    report = evaluate(params, instances, refs, n_starts=args.n_starts, samples=args.samples,
                      augment=not args.no_augment, rng=rng)
    print(report.pretty())
    if args.report:
        Path(args.report).write_text(report.to_csv())
    return 0


def cmd_solve(args) -> int:
    instances = _load_instances(args.instances)
    if args.method == "policy":
        from .evaluation import solve_instances
        if not args.ckpt:
            raise InputError("--method policy needs --ckpt")
        params = _load_params(args.ckpt)
        rng = np.random.default_rng(_seed(args)) if args.samples else None
        results = solve_instances(params, instances, args.n_starts, not args.no_augment,
                                  args.samples, rng)
        records = [SolutionRecord(r.cost, r.solution, "policy") for r in results]
    elif args.method == "heuristic":
        from .evaluation import HEURISTIC_LABEL, heuristic_baseline
        records = []
        for inst in instances:
            sol = heuristic_baseline(inst, inst.task)
            records.append(SolutionRecord(solution_cost(inst, sol, inst.task), sol,
                                          HEURISTIC_LABEL))
    else:
        records = []
        for inst in instances:
            sol, cost = brute_force_optimal(inst, inst.task)
            records.append(SolutionRecord(cost, sol, "bruteforce"))
    write_solutions(args.out_solutions, records)
    mean = float(np.mean([r.cost for r in records])) if records else float("nan")
    print(f"solved {len(records)} instances with {args.method}; mean cost {mean:.6f} "
          f"-> {args.out_solutions}")
    return 0


def cmd_validate(args) -> int:
    instances = _load_instances(args.instances)
    records = read_solutions(args.solutions)
    if len(records) != len(instances):
        raise InputError(f"{len(records)} solutions for {len(instances)} instances")
    bad = 0
    for i, (inst, rec) in enumerate(zip(instances, records), 1):
        viol = validate(inst, rec.solution, inst.task)
        if not viol:
            cost = solution_cost(inst, rec.solution, inst.task, check=False)
            if abs(cost - rec.cost) > 1e-6 * max(1.0, abs(cost)):
                viol = [("CostMismatch", f"recorded {rec.cost} but tours cost {cost}")]
        if viol:
            bad += 1
            print(f"{i}: " + "; ".join(f"{k}: {d}" for k, d in viol))
        else:
            print(f"{i}: ok")
    print(f"{len(instances) - bad}/{len(instances)} valid")
    return 1 if bad else 0


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="shield", description="Multi-task VRP solver")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--threads", type=int, default=1, help="worker threads (default 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write random instances as JSON lines")
    g.add_argument("--task", type=_task, required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--dist", default="uniform", help="uniform, map:<path>, or a bundled map")
    g.add_argument("--capacity", type=float, default=None)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a policy")
    t.add_argument("--config")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--resume")
    t.add_argument("--metrics", help="metrics CSV (default <out>.metrics.csv)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", dest="learn_rate", type=float)
    t.set_defaults(func=cmd_train)

    def decode_flags(sp):
        sp.add_argument("--n-starts", type=int, default=None,
                        help="multi-start agents per instance (default n)")
        sp.add_argument("--samples", type=int, default=0,
                        help="extra sampled rollouts per augmentation")
        sp.add_argument("--no-augment", action="store_true")
        sp.add_argument("--seed", type=int, default=None)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--instances", required=True)
    e.add_argument("--refs")
    e.add_argument("--report", help="CSV report path")
    decode_flags(e)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("solve", help="write solutions for an instance file")
    s.add_argument("--ckpt")
    s.add_argument("--instances", required=True)
    s.add_argument("--out-solutions", required=True)
    s.add_argument("--method", choices=("policy", "heuristic", "bruteforce"), default="policy")
    decode_flags(s)
    s.set_defaults(func=cmd_solve)

    v = sub.add_parser("validate", help="check solutions against instances")
    v.add_argument("--instances", required=True)
    v.add_argument("--solutions", required=True)
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _set_threads(args.threads)
        return args.func(args)
    except ShieldError as e:
        msg = str(e).replace("\n", " ")
        print(f"shield: error: {type(e).__name__}: {msg}", file=sys.stderr)
        return 1
    except (OSError, json.JSONDecodeError) as e:
        print(f"shield: error: {type(e).__name__}: {e}".replace("\n", " "), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
