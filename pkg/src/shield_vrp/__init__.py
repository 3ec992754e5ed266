"""Multi-task, multi-distribution vehicle routing with a MoE/MoD policy."""
from .core import (Instance, RolloutState, Solution, brute_force_optimal, feasible_mask,
                   initial_state, solution_cost, step, validate)
from .tasks import ALL_TASKS, IN_TASKS, OUT_TASKS, TASK_NAMES, TaskSpec

__version__ = "0.1.0"

__all__ = [
    "Instance", "RolloutState", "Solution", "TaskSpec", "ALL_TASKS", "IN_TASKS", "OUT_TASKS",
    "TASK_NAMES", "brute_force_optimal", "feasible_mask", "initial_state", "solution_cost",
    "step", "validate", "__version__",
]
