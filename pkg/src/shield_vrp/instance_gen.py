"""Instance sampling for the 16 variants, map-point sources and file I/O."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import DEPOT_CLOSE, DURATION_LIMIT, SERVICE_TIME, Instance, Solution
from .errors import ConfigError, ParseError, SizeError
from .tasks import TaskSpec

log = logging.getLogger(__name__)

# Q for the sizes where a value is conventional; anything else must be given.
DEFAULT_CAPACITY = {10: 20.0, 20: 30.0, 50: 40.0, 100: 50.0}

DATA_DIR = Path(__file__).resolve().parent / "data"


@dataclass
class DistributionSource:
    kind: str = "uniform"               # "uniform" | "map_points"
    points: np.ndarray | None = None    # (M, 2) in [0,1]^2 for map_points
    name: str = "uniform"

    def __post_init__(self):
        if self.kind not in ("uniform", "map_points"):
            raise ConfigError(f"unknown distribution kind {self.kind!r}")
        if self.kind == "map_points":
            if self.points is None or self.points.ndim != 2 or self.points.shape[1] != 2:
                raise ConfigError("map_points source needs an (M, 2) point array")

    @classmethod
    def uniform(cls) -> "DistributionSource":
        return cls()


@dataclass
class GenConfig:
    n: int
    capacity: float | None = None
    demand_choices: tuple = tuple(range(1, 10))
    backhaul_fraction: float = 0.2
    duration_cap: float = DURATION_LIMIT
    depot_window: tuple = (0.0, DEPOT_CLOSE)
    service_time: float = SERVICE_TIME
    halfwidth_range: tuple = (0.1, 1.0)
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.capacity is None:
            if self.n not in DEFAULT_CAPACITY:
                raise ConfigError(
                    f"no conventional capacity for n={self.n}; pass capacity explicitly"
                )
            self.capacity = DEFAULT_CAPACITY[self.n]
        if self.n < 1 or not self.capacity > 0:
            raise ConfigError("n and capacity must be positive")
        if not 0 <= self.backhaul_fraction < 1:
            raise ConfigError("backhaul_fraction must lie in [0, 1)")
        if max(self.demand_choices) > self.capacity:
            raise ConfigError("a single demand may not exceed capacity")
        lo, hi = self.halfwidth_range
        if not 0 < lo <= hi or self.service_time <= 0 or self.duration_cap <= 0:
            raise ConfigError("time-window and limit constants must be positive")


def instance_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based per-instance stream: instance i of a batch only depends
    on (seed, i), so batches can be generated in any order or in parallel."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(index)])))


def sample_coords(source: DistributionSource, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` points; index 0 becomes the depot."""
    if source.kind == "uniform":
        return rng.random((count, 2))
    m = source.points.shape[0]
    if m < count:
        raise SizeError(f"map {source.name!r} has {m} points, need {count}")
    idx = rng.choice(m, size=count, replace=False)
    return source.points[idx].copy()


def generate_instance(coords: np.ndarray, task: TaskSpec, cfg: GenConfig,
                      rng: np.random.Generator, source_name: str = "uniform") -> Instance:
    n = coords.shape[0] - 1
    Q = float(cfg.capacity)
    raw = rng.choice(np.asarray(cfg.demand_choices), size=n).astype(np.float64)
    if task.backhaul:
        n_back = int(np.floor(cfg.backhaul_fraction * n))
        flip = rng.choice(n, size=n_back, replace=False)
        raw[flip] *= -1
    demand = np.concatenate([[0.0], raw / Q])

    tw = np.zeros((n + 1, 2))
    service = np.zeros(n + 1)
    if task.time_window:
        w_open, w_close = map(float, cfg.depot_window)
        s = cfg.service_time
        d0 = np.sqrt(((coords[1:] - coords[0]) ** 2).sum(-1))
        lo = w_open + d0
        hi = w_close - d0 - s
        u_center = rng.random(n)
        u_half = rng.random(n)
        center = lo + (hi - lo) * u_center
        empty = lo > hi
        if empty.any():
            center[empty] = 0.5 * (lo[empty] + hi[empty])
            log.warning("time-window center interval empty for %d node(s); center clamped "
                        "to midpoint", int(empty.sum()))
        h_lo, h_hi = cfg.halfwidth_range
        half = h_lo + (h_hi - h_lo) * u_half
        tw[0] = (w_open, w_close)
        tw[1:, 0] = np.maximum(w_open, center - half)
        tw[1:, 1] = np.minimum(w_close, center + half)
        service[1:] = s

    limit = float(cfg.duration_cap) if task.duration_limit else None
    return Instance(task=task, coords=coords, demand=demand, tw=tw, service=service,
                    capacity=Q, limit=limit, source=source_name)


def _tw_reachable(coords: np.ndarray, cfg: GenConfig) -> bool:
    d0 = np.sqrt(((coords[1:] - coords[0]) ** 2).sum(-1))
    return bool(np.all(cfg.depot_window[0] + 2 * d0 + cfg.service_time <= cfg.depot_window[1]))


def generate_instances(source: DistributionSource, task: TaskSpec, cfg: GenConfig, count: int,
                       seed: int | None = None, start: int = 0) -> list:
    """``count`` instances, instance i drawn from stream (seed, start + i).

    For time-window tasks a node farther than (w_close - s) / 2 from the
    depot cannot be served by any vehicle; such draws are rejected and the
    coordinates resampled from the same stream.
    """
    seed = cfg.seed if seed is None else seed
    out = []
    for i in range(count):
        rng = instance_rng(seed, start + i)
        coords = sample_coords(source, cfg.n + 1, rng)
        tries = 0
        while task.time_window and not _tw_reachable(coords, cfg):
            tries += 1
            if tries > 1000:
                raise SizeError(f"source {source.name!r} cannot produce a servable TW instance")
            coords = sample_coords(source, cfg.n + 1, rng)
        if tries:
            log.info("instance %d: resampled coordinates %d time(s) for TW reachability", i, tries)
        out.append(generate_instance(coords, task, cfg, rng, source.name))
    return out


# ---------------------------------------------------------------- map files

def normalize_points(points: np.ndarray) -> np.ndarray:
    lo = points.min(axis=0)
    span = points.max(axis=0) - lo
    if np.any(span <= 0):
        raise ValueError("degenerate bounding box")
    out = (points - lo) / span
    # exact endpoints regardless of rounding in the division
    out[points == points.max(axis=0)] = 1.0
    out[points == lo] = 0.0
    return out


def load_map_points(path) -> DistributionSource:
    path = Path(path)
    pts = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if len(parts) != 3:
                raise ParseError(f"expected '<id> <x> <y>', got {len(parts)} field(s)", path, lineno)
            try:
                x, y = float(parts[1]), float(parts[2])
            except ValueError:
                raise ParseError("non-numeric coordinate", path, lineno) from None
            if not (np.isfinite(x) and np.isfinite(y)):
                raise ParseError("non-finite coordinate", path, lineno)
            pts.append((x, y))
    if len(pts) < 2:
        raise ParseError("map needs at least 2 points", path)
    try:
        norm = normalize_points(np.array(pts, dtype=np.float64))
    except ValueError as exc:
        raise ParseError(str(exc), path) from None
    return DistributionSource("map_points", norm, path.stem)


def write_map_points(path, points: np.ndarray, comment: str | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        for i, (x, y) in enumerate(points):
            fh.write(f"{i} {float(x)!r} {float(y)!r}\n")


def synthetic_map(kind: str, m: int, rng: np.random.Generator) -> np.ndarray:
    """Small structured point sets standing in for country maps."""
    if kind == "clusters":
        centers = rng.random((5, 2))
        lab = rng.integers(0, 5, m)
        pts = centers[lab] + 0.05 * rng.standard_normal((m, 2))
    elif kind == "ring":
        ang = rng.random(m) * 2 * np.pi
        rad = 0.4 + 0.03 * rng.standard_normal(m)
        pts = 0.5 + rad[:, None] * np.stack([np.cos(ang), np.sin(ang)], 1)
    elif kind == "coast":
        x = rng.random(m)
        pts = np.stack([x, 0.3 * np.sin(3 * x) + 0.05 * rng.standard_normal(m)], 1)
    elif kind == "skewed":
        pts = rng.beta(0.6, 2.5, (m, 2))
    elif kind == "grid":
        side = int(np.ceil(np.sqrt(m)))
        g = np.stack(np.meshgrid(np.arange(side), np.arange(side)), -1).reshape(-1, 2)[:m]
        pts = g + 0.2 * rng.random((m, 2))
    else:
        raise ValueError(f"unknown synthetic map kind {kind!r}")
    return normalize_points(pts)


def builtin_source(name: str) -> DistributionSource:
    if name == "uniform":
        return DistributionSource.uniform()
    path = DATA_DIR / f"{name}.txt"
    if not path.exists():
        raise ConfigError(f"unknown distribution {name!r}")
    return load_map_points(path)


def resolve_source(spec: str) -> DistributionSource:
    """'uniform', 'map:<path>' or the name of a bundled map."""
    if spec.startswith("map:"):
        return load_map_points(spec[4:])
    return builtin_source(spec)


# ----------------------------------------------------------- instance files

_FIELDS = ("task", "n", "coords", "demand", "tw", "service", "L", "Q", "dist")


def instance_to_record(inst: Instance) -> dict:
    return {
        "task": inst.task.name,
        "n": inst.n,
        "coords": inst.coords.tolist(),
        "demand": inst.demand.tolist(),
        "tw": inst.tw.tolist(),
        "service": inst.service.tolist(),
        "L": inst.limit,
        "Q": inst.capacity,
        "dist": inst.source,
    }


def instance_from_record(rec: dict) -> Instance:
    missing = [k for k in _FIELDS[:-1] if k not in rec]
    if missing:
        raise ValueError(f"missing field(s) {missing}")
    task = TaskSpec.from_name(rec["task"])
    inst = Instance(
        task=task,
        coords=np.array(rec["coords"], dtype=np.float64),
        demand=np.array(rec["demand"], dtype=np.float64),
        tw=np.array(rec["tw"], dtype=np.float64),
        service=np.array(rec["service"], dtype=np.float64),
        capacity=float(rec["Q"]),
        limit=None if rec["L"] is None else float(rec["L"]),
        source=str(rec.get("dist", "uniform")),
    )
    if inst.n != int(rec["n"]):
        raise ValueError(f"n={rec['n']} but {inst.n} customers in coords")
    return inst


def write_instances(path, instances) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(instance_to_record(inst)) + "\n")


def _read_jsonl(path, convert):
    path = Path(path)
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(convert(json.loads(line)))
            except (ValueError, TypeError, KeyError) as exc:
                raise ParseError(str(exc), path, lineno) from None
    return out


def read_instances(path) -> list:
    return _read_jsonl(path, instance_from_record)


@dataclass
class SolutionRecord:
    cost: float
    solution: Solution
    solver: str | None = None


def write_solutions(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            row = {"cost": rec.cost, "tours": [[int(j) for j in t] for t in rec.solution.tours]}
            if rec.solver:
                row["solver"] = rec.solver
            fh.write(json.dumps(row) + "\n")


def _solution_from_record(rec: dict) -> SolutionRecord:
    tours = [[int(j) for j in t] for t in rec["tours"]]
    return SolutionRecord(float(rec["cost"]), Solution(tours), rec.get("solver"))


def read_solutions(path) -> list:
    return _read_jsonl(path, _solution_from_record)
