"""The numba loop kernels and their NumPy twins must agree exactly, and the
pure-Python fallback (SHIELD_NUMBA=0) must reproduce the compiled results."""
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from shield_vrp import kernels
from shield_vrp.core import Solution, solution_cost, validate
from shield_vrp.env import BatchEnv
from shield_vrp.errors import ContractViolation, InputError
from shield_vrp.instance_gen import DistributionSource, GenConfig, builtin_source, generate_instances
from shield_vrp.tasks import ALL_TASKS, TaskSpec


def _batch(task, seed, count=4, n=20, source=None):
    return generate_instances(source or DistributionSource.uniform(), task, GenConfig(n=n),
                              count, seed=seed)


@pytest.mark.parametrize("task", ALL_TASKS, ids=str)
def test_loop_and_numpy_kernels_agree(task):
    rng = np.random.default_rng(0)
    env = BatchEnv(_batch(task, 1), task, 6)
    twin = BatchEnv(env.instances, task, 6)
    while not env.all_done:
        m = env.mask()
        out = np.empty_like(m)
        kernels.batch_mask_numpy(env.dist, env.demand, env.tw, env.service, env.limit,
                                 task.open, task.time_window, task.duration_limit, env.pos,
                                 env.z, env.t, env.l, env.visited, env.done, out)
        assert np.array_equal(out, m)
        a = np.array([[rng.choice(np.flatnonzero(m[b, i])) for i in range(6)]
                      for b in range(env.B)])
        env.step(a, m)
        kernels.batch_step_numpy(twin.dist, twin.demand, twin.tw, twin.service,
                                 task.time_window, twin.pos, twin.z, twin.t, twin.l,
                                 twin.visited, twin.linehauls_left, twin.done, a)
        for name in ("pos", "z", "t", "l", "visited", "linehauls_left", "done"):
            assert np.array_equal(getattr(env, name), getattr(twin, name)), name


@pytest.mark.parametrize("task", ALL_TASKS, ids=str)
def test_env_rollouts_validate_and_costs_agree(task):
    rng = np.random.default_rng(1)
    insts = _batch(task, 2, source=builtin_source("grid"))
    env = BatchEnv(insts, task, 5)
    while not env.all_done:
        m = env.mask()
        env.step(np.array([[rng.choice(np.flatnonzero(m[b, i])) for i in range(5)]
                           for b in range(env.B)]), m)
    costs = env.costs()
    for b, row in enumerate(env.solutions()):
        for a, sol in enumerate(row):
            assert validate(insts[b], sol, task) == []
            assert solution_cost(insts[b], sol, task) == pytest.approx(costs[b, a], abs=1e-12)


def test_env_guards():
    task = TaskSpec()
    insts = _batch(task, 3)
    with pytest.raises(InputError):
        BatchEnv([], task, 2)
    with pytest.raises(InputError):
        BatchEnv(insts + _batch(task, 3, count=1, n=10), task, 2)
    env = BatchEnv(insts, task, 2)
    with pytest.raises(ContractViolation):
        env.step(np.zeros((len(insts), 2), dtype=int), env.mask())


def test_done_agents_idle_at_their_last_node():
    task = TaskSpec()
    inst = _batch(task, 4, count=1, n=10)[0]
    env = BatchEnv([inst], task, 2)
    order = list(range(1, 11))
    while not env.all_done:
        m = env.mask()
        act = []
        for i in range(2):
            nxt = [j for j in order if m[0, i, j]]
            act.append(nxt[0] if nxt else 0)
        env.step(np.array([act]), m)
    sols = env.solutions()[0]
    assert sols[0] == sols[1]
    assert env.steps[0, 0] == len(sols[0].actions())


_FALLBACK_SCRIPT = r"""
import json, sys
import numpy as np
from shield_vrp import _accel, kernels
from shield_vrp.core import brute_force_optimal
from shield_vrp.evaluation import heuristic_baseline
from shield_vrp.instance_gen import DistributionSource, GenConfig, generate_instances
from shield_vrp.tasks import ALL_TASKS
out = {"numba": _accel.USE_NUMBA, "bf": [], "heur": []}
for task in ALL_TASKS:
    inst = generate_instances(DistributionSource.uniform(), task,
                              GenConfig(n=6, capacity=15), 1, seed=21)[0]
    sol, cost = brute_force_optimal(inst, task)
    out["bf"].append([cost, sol.tours])
    out["heur"].append(heuristic_baseline(inst, task).tours)
print(json.dumps(out))
"""


def _run_fallback(flag):
    env = dict(os.environ, SHIELD_NUMBA=flag)
    res = subprocess.run([sys.executable, "-c", _FALLBACK_SCRIPT], env=env, capture_output=True,
                         text=True, timeout=600, check=True)
    return json.loads(res.stdout.strip().splitlines()[-1])


@pytest.mark.slow
def test_pure_python_fallback_reproduces_compiled_results():
    compiled = _run_fallback("1")
    plain = _run_fallback("0")
    assert compiled["numba"] is True and plain["numba"] is False
    assert compiled["bf"] == plain["bf"]
    assert compiled["heur"] == plain["heur"]
