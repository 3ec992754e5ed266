"""Problem data, per-agent rollout state and the exact semantics of all 16
variants: masking, transitions, cost, validation and an exhaustive solver.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple

import numpy as np

from . import kernels
from .errors import ContractViolation, InfeasibleError, SizeError, ValidationError
from .kernels import EPS
from .tasks import TaskSpec

DEPOT_CLOSE = 3.0
SERVICE_TIME = 0.2
DURATION_LIMIT = 3.0
BRUTE_FORCE_MAX_N = 8


def distance_matrix(coords: np.ndarray) -> np.ndarray:
    diff = coords[:, None, :] - coords[None, :, :]
    return np.sqrt((diff * diff).sum(-1))


@dataclass(eq=False)
class Instance:
    """One routing instance.  Arrays include the depot at index 0.

    ``demand`` is already divided by ``capacity``; backhauls are negative.
    Inactive constraints carry zeroed features (``tw``/``service`` zeros,
    ``limit`` None).
    """

    task: TaskSpec
    coords: np.ndarray          # (n+1, 2)
    demand: np.ndarray          # (n+1,)
    tw: np.ndarray              # (n+1, 2) open/close
    service: np.ndarray         # (n+1,)
    capacity: float
    limit: float | None = None
    source: str = "uniform"

    def __post_init__(self):
        self.coords = np.ascontiguousarray(self.coords, dtype=np.float64)
        self.demand = np.ascontiguousarray(self.demand, dtype=np.float64)
        self.tw = np.ascontiguousarray(self.tw, dtype=np.float64)
        self.service = np.ascontiguousarray(self.service, dtype=np.float64)

    @property
    def n(self) -> int:
        return self.coords.shape[0] - 1

    @cached_property
    def dist(self) -> np.ndarray:
        return distance_matrix(self.coords)

    @property
    def limit_value(self) -> float:
        return float(self.limit) if self.limit is not None else np.inf

    def kernel_args(self, task: TaskSpec | None = None):
        task = task or self.task
        return (self.dist, self.demand, self.tw, self.service, self.limit_value,
                task.open, task.time_window, task.duration_limit)

    def replace(self, **kw) -> "Instance":
        fields = dict(task=self.task, coords=self.coords, demand=self.demand, tw=self.tw,
                      service=self.service, capacity=self.capacity, limit=self.limit,
                      source=self.source)
        fields.update(kw)
        return Instance(**fields)

    def __eq__(self, other):
        if not isinstance(other, Instance):
            return NotImplemented
        return (
            self.task == other.task
            and self.capacity == other.capacity
            and self.limit == other.limit
            and self.source == other.source
            and all(np.array_equal(getattr(self, k), getattr(other, k))
                    for k in ("coords", "demand", "tw", "service"))
        )


def check_instance(inst: Instance, task: TaskSpec | None = None) -> None:
    """Raise ValidationError if ``inst`` is malformed for ``task``."""
    task = task or inst.task
    n1 = inst.coords.shape[0]
    problems = []
    if n1 < 2 or inst.coords.shape != (n1, 2):
        problems.append(f"coords shape {inst.coords.shape}")
    for name, shape in (("demand", (n1,)), ("tw", (n1, 2)), ("service", (n1,))):
        if getattr(inst, name).shape != shape:
            problems.append(f"{name} shape {getattr(inst, name).shape} != {shape}")
    if problems:
        raise ValidationError("; ".join(problems))
    if not np.all(np.isfinite(inst.coords)) or inst.coords.min() < 0 or inst.coords.max() > 1:
        problems.append("coords outside unit square")
    if inst.demand[0] != 0:
        problems.append("depot demand must be 0")
    cust = inst.demand[1:]
    if np.any(cust == 0):
        problems.append("zero customer demand")
    if np.any(np.abs(cust) > 1):
        problems.append("customer demand exceeds capacity")
    if not task.backhaul and np.any(cust < 0):
        problems.append("negative demand without backhaul task")
    if not inst.capacity > 0:
        problems.append("capacity must be positive")
    if task.time_window:
        if np.any(inst.tw[:, 0] > inst.tw[:, 1]) or inst.tw.min() < 0:
            problems.append("time window open > close")
        if inst.tw[0, 0] != 0 or inst.service[0] != 0:
            problems.append("depot window must open at 0 with no service")
    elif np.any(inst.tw != 0) or np.any(inst.service != 0):
        problems.append("time-window features must be zero for non-TW task")
    if task.duration_limit and (inst.limit is None or not inst.limit > 0):
        problems.append("duration limit missing")
    if problems:
        raise ValidationError("; ".join(problems))


@dataclass(frozen=True)
class RolloutState:
    position: int
    z: float
    t: float
    l: float
    open_flag: int
    visited: tuple
    linehauls_left: int
    done: bool

    def dynamic_features(self) -> np.ndarray:
        return np.array([self.z, self.l, self.t, float(self.open_flag)])


@dataclass
class Solution:
    """Sub-tours as customer sequences; the depot is implicit at the start of
    every tour and at its end unless the task is open."""

    tours: list = field(default_factory=list)

    @classmethod
    def from_actions(cls, actions) -> "Solution":
        tours, cur = [], []
        for a in actions:
            a = int(a)
            if a == 0:
                if cur:
                    tours.append(cur)
                cur = []
            else:
                cur.append(a)
        if cur:
            tours.append(cur)
        return cls(tours)

    def actions(self) -> list:
        out = []
        for k, tour in enumerate(self.tours):
            if k:
                out.append(0)
            out.extend(tour)
        return out


def initial_state(inst: Instance, task: TaskSpec) -> RolloutState:
    check_instance(inst, task)
    lh = int((inst.demand[1:] > 0).sum())
    return RolloutState(
        position=0, z=1.0 if lh > 0 else 0.0, t=0.0, l=0.0, open_flag=int(task.open),
        visited=(False,) * (inst.n + 1), linehauls_left=lh, done=False,
    )


def feasible_mask(state: RolloutState, inst: Instance, task: TaskSpec) -> np.ndarray:
    if state.done:
        raise ContractViolation("feasible_mask called on a finished rollout")
    out = np.zeros(inst.n + 1, dtype=np.bool_)
    visited = np.array(state.visited, dtype=np.bool_)
    any_ok = kernels.single_mask(*inst.kernel_args(task), state.position, state.z, state.t,
                                 state.l, visited, out)
    if not any_ok:
        raise InfeasibleError(
            f"no feasible action at node {state.position} (z={state.z:.4f}, t={state.t:.4f}, "
            f"l={state.l:.4f})"
        )
    return out


def step(state: RolloutState, inst: Instance, task: TaskSpec, action: int) -> RolloutState:
    action = int(action)
    if not 0 <= action <= inst.n or not feasible_mask(state, inst, task)[action]:
        raise ContractViolation(f"infeasible action {action} from node {state.position}")
    visited = list(state.visited)
    lh = state.linehauls_left
    if action:
        visited[action] = True
        if inst.demand[action] > 0:
            lh -= 1
    dist, demand, tw, service, _, _, use_tw, _ = inst.kernel_args(task)
    z, t, l = kernels.advance(dist, demand, tw, service, use_tw, state.position, state.z,
                              state.t, state.l, action, lh)
    return RolloutState(
        position=action, z=float(z), t=float(t), l=float(l), open_flag=state.open_flag,
        visited=tuple(visited), linehauls_left=lh, done=all(visited[1:]),
    )


def solution_cost(inst: Instance, sol: Solution, task: TaskSpec, check: bool = True) -> float:
    if check:
        violations = validate(inst, sol, task)
        if violations:
            raise ValidationError(f"invalid solution: {violations[0]}")
    dist = inst.dist
    total = 0.0
    for tour in sol.tours:
        prev = 0
        for j in tour:
            total += dist[prev, j]
            prev = j
        if not task.open:
            total += dist[prev, 0]
    return float(total)


class Violation(NamedTuple):
    kind: str
    detail: str


def validate(inst: Instance, sol: Solution, task: TaskSpec, partial: bool = False) -> list:
    """All constraint violations of ``sol``; an empty list means feasible.

    Written as a direct per-tour simulation, independent of the mask kernel.
    With ``partial=True`` missing customers are not reported, so a prefix of
    a rollout can be checked.
    """
    n = inst.n
    dist, demand, tw, service = inst.dist, inst.demand, inst.tw, inst.service
    out = []
    counts = np.zeros(n + 1, dtype=int)
    for tour in sol.tours:
        for j in tour:
            if isinstance(j, (int, np.integer)) and 1 <= j <= n:
                counts[j] += 1
    for j in range(1, n + 1):
        if counts[j] > 1 or (counts[j] == 0 and not partial):
            out.append(Violation("VisitCount", f"customer {j} visited {counts[j]} times"))

    seen = np.zeros(n + 1, dtype=bool)
    for k, tour in enumerate(sol.tours):
        if len(tour) == 0:
            out.append(Violation("EmptyTour", f"tour {k} is empty"))
            continue
        if any(not isinstance(j, (int, np.integer)) or not 1 <= j <= n for j in tour):
            out.append(Violation("BadNode", f"tour {k} has a non-customer node"))
            continue
        linehaul_pending = any(demand[j] > 0 and not seen[j] for j in range(1, n + 1))
        z = 1.0 if linehaul_pending else 0.0
        t = length = 0.0
        prev = 0
        for pos, j in enumerate(tour):
            d = dist[prev, j]
            z_new = z - demand[j]
            if z_new < -EPS:
                out.append(Violation("Capacity", f"tour {k} overloaded at customer {j}"))
            elif z_new > 1.0 + EPS:
                if pos == 0 and demand[j] < 0:
                    out.append(Violation("BackhaulStart",
                                         f"tour {k} starts at backhaul {j} while linehauls remain"))
                else:
                    out.append(Violation("Capacity", f"tour {k} pickup overflow at customer {j}"))
            z = min(max(z_new, 0.0), 1.0)
            length = length + d
            if task.duration_limit and task.open and length > inst.limit_value + EPS:
                out.append(Violation("DurationLimit", f"tour {k} exceeds limit at customer {j}"))
            if task.time_window:
                arrive = t + d
                if arrive > tw[j, 1] + EPS:
                    out.append(Violation("TimeWindow", f"tour {k} late at customer {j}"))
                t = max(arrive, tw[j, 0]) + service[j]
            seen[j] = True
            prev = j
        if not task.open:
            back = dist[prev, 0]
            if task.duration_limit and length + back > inst.limit_value + EPS:
                out.append(Violation("DurationLimit", f"closed tour {k} exceeds limit"))
            if task.time_window and t + back > tw[0, 1] + EPS:
                out.append(Violation("DepotReturn", f"tour {k} returns after depot close"))
    return out


def brute_force_optimal(inst: Instance, task: TaskSpec):
    """Exact optimum by exhaustive search; returns (Solution, cost)."""
    if inst.n > BRUTE_FORCE_MAX_N:
        raise SizeError(f"brute force supports n <= {BRUTE_FORCE_MAX_N}, got {inst.n}")
    check_instance(inst, task)
    best, seq = kernels.exact_search(*inst.kernel_args(task))
    if not np.isfinite(best):
        raise InfeasibleError("instance admits no feasible solution")
    sol = Solution.from_actions(seq)
    return sol, solution_cost(inst, sol, task)
