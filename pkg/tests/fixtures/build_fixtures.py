"""Regenerate the frozen fixture files in this directory.

    python3 tests/fixtures/build_fixtures.py [n6|cvrp10|all]

n6: 50 instances per task (n=6, capacity 15) with exact optima, each
cross-checked against the independent set-partition DP in helpers.py.
cvrp10: held-out n=10 CVRP set with exact optima from the search kernel
(offline: about 5 s per instance).
"""
import math
import sys
import time
from pathlib import Path

HERE = Path(__file__).resolve().parent
sys.path.insert(0, str(HERE.parent))

from helpers import SMALL_CAPACITY, dp_optimal_cost  # noqa: E402
from shield_vrp import kernels  # noqa: E402
from shield_vrp.core import Solution, brute_force_optimal, solution_cost, validate  # noqa: E402
from shield_vrp.instance_gen import (DistributionSource, GenConfig, SolutionRecord,  # noqa: E402
                                     generate_instances, write_instances, write_solutions)
from shield_vrp.tasks import ALL_TASKS, TaskSpec  # noqa: E402

N6_PER_TASK = 50
N6_SEED = 606
CVRP10_COUNT = 64
CVRP10_SEED = 12345


def build_n6():
    insts, recs = [], []
    for k, task in enumerate(ALL_TASKS):
        batch = generate_instances(DistributionSource.uniform(), task,
                                   GenConfig(n=6, capacity=SMALL_CAPACITY),
                                   N6_PER_TASK, seed=N6_SEED + k)
        for inst in batch:
            sol, cost = brute_force_optimal(inst, task)
            dp = dp_optimal_cost(inst, task)
            if not math.isclose(cost, dp, rel_tol=0, abs_tol=1e-9):
                raise SystemExit(f"{task}: search {cost} disagrees with DP {dp}")
            insts.append(inst)
            recs.append(SolutionRecord(cost, sol, "exact"))
    write_instances(HERE / "n6_instances.jsonl", insts)
    write_solutions(HERE / "n6_exact.jsonl", recs)


def build_cvrp10():
    task = TaskSpec()
    insts = generate_instances(DistributionSource.uniform(), task, GenConfig(n=10),
                               CVRP10_COUNT, seed=CVRP10_SEED)
    recs = []
    t0 = time.perf_counter()
    for i, inst in enumerate(insts):
        # same search as brute_force_optimal, past its interactive size cap
        _, seq = kernels.exact_search(*inst.kernel_args(task))
        sol = Solution.from_actions(seq)
        assert validate(inst, sol, task) == []
        cost = solution_cost(inst, sol, task)
        recs.append(SolutionRecord(cost, sol, "exact"))
        print(f"{i + 1}/{len(insts)} {cost:.6f} ({time.perf_counter() - t0:.0f}s)", flush=True)
    write_instances(HERE / "cvrp10_instances.jsonl", insts)
    write_solutions(HERE / "cvrp10_exact.jsonl", recs)


if __name__ == "__main__":
    which = sys.argv[1] if len(sys.argv) > 1 else "all"
    if which in ("n6", "all"):
        build_n6()
    if which in ("cvrp10", "all"):
        build_cvrp10()
