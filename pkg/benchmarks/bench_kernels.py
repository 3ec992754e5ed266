"""Compiled kernels vs the pure NumPy/Python path.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--quick]

Part 1 times the batched mask/step kernels in-process: the numba loop
versions against their vectorised NumPy twins.  Part 2 runs the same
workload in two subprocesses, SHIELD_NUMBA=1 and SHIELD_NUMBA=0, covering
exact search, the heuristic and a full policy rollout.
"""
import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

_WORKLOAD = r"""
import json, sys, time
import numpy as np
from shield_vrp import _accel
from shield_vrp import model as M
from shield_vrp.core import brute_force_optimal
from shield_vrp.evaluation import heuristic_baseline
from shield_vrp.instance_gen import DistributionSource, GenConfig, generate_instances
from shield_vrp.tasks import TaskSpec
from shield_vrp.training import rollout
from shield_vrp import tensor as T

quick = sys.argv[1] == "1"
src = DistributionSource.uniform()
task = TaskSpec.from_name("VRPBLTW")
out = {"numba": _accel.USE_NUMBA}

def timed(fn):
    fn()   # warm-up (compilation on the numba path)
    t = time.perf_counter()
    fn()
    return time.perf_counter() - t

small = generate_instances(src, task, GenConfig(n=6, capacity=15), 2 if quick else 8, seed=1)
out["exact n=6"] = timed(lambda: [brute_force_optimal(i, task) for i in small])
mid = generate_instances(src, task, GenConfig(n=20), 4 if quick else 32, seed=2)
out["heuristic n=20"] = timed(lambda: [heuristic_baseline(i, task) for i in mid])
P = M.PolicyParams.init(M.ModelConfig(d=32, heads=4, ff_dim=64, enc_layers=1, dec_layers=1),
                        np.random.default_rng(0))
def roll():
    with T.no_grad():
        rollout(P, mid, task, 20, "greedy")
out["rollout n=20"] = timed(roll)
print(json.dumps(out))
"""


def _inprocess(repeat: int, quick: bool):
    from shield_vrp import _accel, kernels
    from shield_vrp.env import BatchEnv
    from shield_vrp.instance_gen import DistributionSource, GenConfig, generate_instances
    from shield_vrp.tasks import TaskSpec

    if not _accel.USE_NUMBA:
        print("numba disabled (SHIELD_NUMBA=0); skipping the in-process comparison")
        return
    task = TaskSpec.from_name("OVRPBLTW")
    B, A, n = (8, 10, 20) if quick else (64, 50, 50)
    env = BatchEnv(generate_instances(DistributionSource.uniform(), task, GenConfig(n=n), B,
                                      seed=0), task, A)
    out = np.empty((B, A, n + 1), dtype=bool)
    args = (env.dist, env.demand, env.tw, env.service, env.limit, task.open, task.time_window,
            task.duration_limit, env.pos, env.z, env.t, env.l, env.visited, env.done, out)
    rows = []
    for name, fn in (("mask loop (numba)", kernels.batch_mask_loop),
                     ("mask numpy", kernels.batch_mask_numpy)):
        fn(*args)
        t = time.perf_counter()
        for _ in range(repeat * 20):
            fn(*args)
        rows.append((name, (time.perf_counter() - t) / (repeat * 20)))

    def full_episode(step_fn, mask_fn):
        e = BatchEnv(env.instances, task, A)
        m = np.empty((B, A, n + 1), dtype=bool)
        rng = np.random.default_rng(0)
        while not e.all_done:
            mask_fn(e.dist, e.demand, e.tw, e.service, e.limit, task.open, task.time_window,
                    task.duration_limit, e.pos, e.z, e.t, e.l, e.visited, e.done, m)
            # first feasible node after a random offset: cheap, valid, deterministic
            off = rng.integers(n + 1, size=(B, A, 1))
            order = (np.arange(n + 1) + off) % (n + 1)
            a = np.take_along_axis(order, np.argmax(np.take_along_axis(m, order, -1), -1)[..., None],
                                   -1)[..., 0]
            step_fn(e.dist, e.demand, e.tw, e.service, task.time_window, e.pos, e.z, e.t, e.l,
                    e.visited, e.linehauls_left, e.done, a)

    for name, s, m in (("episode loop (numba)", kernels.batch_step_loop, kernels.batch_mask_loop),
                       ("episode numpy", kernels.batch_step_numpy, kernels.batch_mask_numpy)):
        full_episode(s, m)
        t = time.perf_counter()
        for _ in range(repeat):
            full_episode(s, m)
        rows.append((name, (time.perf_counter() - t) / repeat))
    print(f"in-process kernels (B={B}, agents={A}, n={n})")
    for name, sec in rows:
        print(f"  {name:<22} {sec * 1e3:9.3f} ms")


def _subprocess(quick: bool):
    res = {}
    for flag in ("1", "0"):
        env = dict(os.environ, SHIELD_NUMBA=flag)
        p = subprocess.run([sys.executable, "-c", _WORKLOAD, "1" if quick else "0"], env=env,
                           capture_output=True, text=True, check=True)
        res[flag] = json.loads(p.stdout.strip().splitlines()[-1])
    print("end to end (SHIELD_NUMBA=1 vs 0)")
    for key in res["1"]:
        if key == "numba":
            continue
        a, b = res["1"][key], res["0"][key]
        print(f"  {key:<16} numba {a:8.3f} s   python {b:8.3f} s   x{b / max(a, 1e-12):7.1f}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--quick", action="store_true", help="small sizes, for smoke runs")
    args = ap.parse_args()
    _inprocess(args.repeat, args.quick)
    _subprocess(args.quick)


if __name__ == "__main__":
    main()
