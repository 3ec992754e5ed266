"""The 16 routing variants: capacity is always on, plus any subset of
open routes (O), time windows (TW), duration limit (L) and backhauls (B)."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TaskSpec:
    open: bool = False
    time_window: bool = False
    duration_limit: bool = False
    backhaul: bool = False

    @property
    def name(self) -> str:
        if not (self.open or self.time_window or self.duration_limit or self.backhaul):
            return "CVRP"
        return (
            ("O" if self.open else "")
            + "VRP"
            + ("B" if self.backhaul else "")
            + ("L" if self.duration_limit else "")
            + ("TW" if self.time_window else "")
        )

    def onehot(self) -> np.ndarray:
        return task_onehot(self)

    @classmethod
    def from_name(cls, name: str) -> "TaskSpec":
        try:
            return _BY_NAME[name.strip().upper()]
        except KeyError:
            raise ValueError(
                f"unknown task {name!r}; expected one of: {', '.join(TASK_NAMES)}"
            ) from None

    def __str__(self) -> str:
        return self.name


def task_onehot(task: TaskSpec) -> np.ndarray:
    """Constraint prompt vector in (open, time-window, route length, backhaul) order."""
    return np.array(
        [task.open, task.time_window, task.duration_limit, task.backhaul], dtype=np.float64
    )


ALL_TASKS = [TaskSpec(*bits) for bits in itertools.product((False, True), repeat=4)]
_BY_NAME = {t.name: t for t in ALL_TASKS}

TASK_NAMES = [
    "CVRP", "OVRP", "VRPB", "VRPL", "VRPTW", "OVRPTW", "OVRPB", "OVRPL",
    "VRPBL", "VRPBTW", "VRPLTW", "OVRPBL", "OVRPBTW", "OVRPLTW", "VRPBLTW", "OVRPBLTW",
]
IN_TASKS = TASK_NAMES[:6]
OUT_TASKS = TASK_NAMES[6:]

assert sorted(TASK_NAMES) == sorted(_BY_NAME)
