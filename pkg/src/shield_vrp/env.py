"""Batched multi-agent environment: B instances (same n and task) x A agents."""
from __future__ import annotations

import numpy as np

from . import kernels
from .core import Instance, Solution, check_instance
from .errors import ContractViolation, InfeasibleError, InputError
from .tasks import TaskSpec


class BatchEnv:
    def __init__(self, instances, task: TaskSpec, n_agents: int, check: bool = True):
        if not instances:
            raise InputError("empty instance batch")
        n1 = instances[0].n + 1
        if any(inst.n + 1 != n1 for inst in instances):
            raise InputError("all instances in a batch must share n")
        if check:
            for inst in instances:
                check_instance(inst, task)
        self.instances = instances
        self.task = task
        B, A = len(instances), n_agents
        self.B, self.A, self.N = B, A, n1
        self.dist = np.stack([inst.dist for inst in instances])
        self.demand = np.stack([inst.demand for inst in instances])
        self.tw = np.stack([inst.tw for inst in instances])
        self.service = np.stack([inst.service for inst in instances])
        self.limit = np.array([inst.limit_value for inst in instances])

        lh = (self.demand[:, 1:] > 0).sum(axis=1)
        self.pos = np.zeros((B, A), dtype=np.int64)
        self.linehauls_left = np.repeat(lh[:, None], A, axis=1).astype(np.int64)
        self.z = np.where(self.linehauls_left > 0, 1.0, 0.0)
        self.t = np.zeros((B, A))
        self.l = np.zeros((B, A))
        self.visited = np.zeros((B, A, n1), dtype=np.bool_)
        self.done = np.zeros((B, A), dtype=np.bool_)
        self.steps = np.zeros((B, A), dtype=np.int64)   # real moves; finished agents idle
        self.history = [self.pos.copy()]

    def mask(self) -> np.ndarray:
        out = np.empty((self.B, self.A, self.N), dtype=np.bool_)
        kernels.batch_mask(self.dist, self.demand, self.tw, self.service, self.limit,
                           self.task.open, self.task.time_window, self.task.duration_limit,
                           self.pos, self.z, self.t, self.l, self.visited, self.done, out)
        stuck = ~out.any(axis=-1)
        if stuck.any():
            b, a = np.argwhere(stuck)[0]
            raise InfeasibleError(f"agent {a} of instance {b} has no feasible action")
        return out

    def step(self, action: np.ndarray, mask: np.ndarray | None = None) -> None:
        action = np.asarray(action, dtype=np.int64)
        if mask is not None:
            picked = np.take_along_axis(mask, action[:, :, None], axis=2)[:, :, 0]
            if not picked.all():
                raise ContractViolation("infeasible action selected")
        self.steps += ~self.done
        kernels.batch_step(self.dist, self.demand, self.tw, self.service,
                           self.task.time_window, self.pos, self.z, self.t, self.l,
                           self.visited, self.linehauls_left, self.done, action)
        self.history.append(self.pos.copy())

    @property
    def all_done(self) -> bool:
        return bool(self.done.all())

    def dynamic_features(self) -> np.ndarray:
        """(B, A, 4): load, current route length, clock, open flag."""
        o = np.full((self.B, self.A), float(self.task.open))
        return np.stack([self.z, self.l, self.t, o], axis=-1)

    def visited_mask(self) -> np.ndarray:
        return self.visited

    def trajectories(self) -> np.ndarray:
        """(B, A, T+1) visited positions starting at the depot."""
        return np.stack(self.history, axis=-1)

    def costs(self) -> np.ndarray:
        seq = self.trajectories()
        bidx = np.arange(self.B)[:, None, None]
        edge = self.dist[bidx, seq[..., :-1], seq[..., 1:]]
        if self.task.open:
            edge = np.where(seq[..., 1:] == 0, 0.0, edge)
        total = edge.sum(axis=-1)
        if not self.task.open:
            total = total + self.dist[np.arange(self.B)[:, None], self.pos, 0]
        return total

    def solutions(self) -> list:
        seq = self.trajectories()
        return [[Solution.from_actions(seq[b, a, 1:1 + self.steps[b, a]]) for a in range(self.A)]
                for b in range(self.B)]


def make_instance_env(inst: Instance, task: TaskSpec, n_agents: int = 1) -> BatchEnv:
    return BatchEnv([inst], task, n_agents)
