"""REINFORCE with a shared multi-start baseline, Adam, and checkpointing."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import struct
import time
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import model as M
from . import tensor as T
from .env import BatchEnv
from .errors import CheckpointError, ConfigError, InfeasibleError, NonFiniteError
from .instance_gen import GenConfig, generate_instances, resolve_source
from .tasks import IN_TASKS, TaskSpec
from .tensor import Tensor

log = logging.getLogger(__name__)

CKPT_MAGIC = b"SHLD"
CKPT_VERSION = 1
METRIC_COLUMNS = ("epoch", "mean_cost", "loss", "grad_norm", "wallclock")


@dataclass
class TrainConfig:
    epochs: int = 30
    episodes_per_epoch: int = 256
    batch_size: int = 32
    learn_rate: float = 1e-4
    n_starts: int = 8
    n: int = 20
    beta: float = 0.1
    n_clusters: int = 5
    cluster_iters: int = 5
    d: int = 64
    heads: int = 4
    ff_dim: int = 128
    enc_layers: int = 3
    dec_layers: int = 3
    n_experts: int = 4
    top_k: int = 2
    seed: int = 0
    task_set: list = field(default_factory=lambda: list(IN_TASKS))
    distribution_set: list = field(default_factory=lambda: ["uniform", "clusters", "ring", "coast"])

    def __post_init__(self):
        if self.n_starts < 2:
            raise ConfigError("n_starts must be >= 2 for the shared baseline")
        if self.epochs < 0 or self.episodes_per_epoch < 1 or self.batch_size < 1:
            raise ConfigError("epochs, episodes_per_epoch and batch_size must be positive")
        if not self.learn_rate >= 0:
            raise ConfigError("learn_rate must be non-negative")
        if not self.task_set or not self.distribution_set:
            raise ConfigError("task_set and distribution_set must be non-empty")
        try:
            self.tasks = [TaskSpec.from_name(t) for t in self.task_set]
        except ValueError as e:
            raise ConfigError(str(e)) from None
        self.model_config()   # shape checks

    def model_config(self) -> M.ModelConfig:
        return M.ModelConfig(d=self.d, heads=self.heads, ff_dim=self.ff_dim,
                             enc_layers=self.enc_layers, dec_layers=self.dec_layers,
                             n_experts=self.n_experts, top_k=self.top_k,
                             n_clusters=self.n_clusters, cluster_iters=self.cluster_iters,
                             beta=self.beta)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        try:
            with open(path) as fh:
                return cls.from_dict(json.load(fh))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: line {e.lineno}: {e.msg}") from None


# ------------------------------------------------------------------ rollout

@dataclass
class Rollout:
    actions: np.ndarray        # (B, A, T+1) positions, starting at the depot
    logprob: Tensor            # (B, A) sum of log-probabilities of sampled moves
    rewards: np.ndarray        # (B, A) negative tour length
    solutions: list            # [B][A] Solution
    costs: np.ndarray          # (B, A)


def first_moves(mask: np.ndarray, n_starts: int, mode: str, rng=None) -> np.ndarray:
    """Distinct forced first customers per instance.

    Greedy picks the lowest-indexed feasible nodes.  Sampling draws without
    replacement and, only when there are fewer feasible nodes than starts,
    tops up with replacement.
    """
    B = mask.shape[0]
    out = np.empty((B, n_starts), dtype=np.int64)
    for b in range(B):
        cand = np.flatnonzero(mask[b])
        if mode == "greedy":
            out[b] = np.resize(cand, n_starts)
        else:
            k = min(n_starts, cand.size)
            picks = rng.choice(cand, size=k, replace=False)
            if k < n_starts:
                log.info("instance %d: %d starts but %d feasible first moves; sampling with "
                         "replacement", b, n_starts, cand.size)
                picks = np.concatenate([picks, rng.choice(cand, size=n_starts - k)])
            out[b] = picks
    if mode == "greedy" and mask.shape[1] - 1 < n_starts:
        log.info("more starts than customers; first moves repeat cyclically")
    return out


def _sample(probs: np.ndarray, rng) -> np.ndarray:
    # inverse CDF with u in (0, 1]: a zero-probability node is never drawn
    cdf = np.cumsum(probs, axis=-1)
    u = 1.0 - rng.random(probs.shape[:-1])
    idx = (cdf < (u * cdf[..., -1])[..., None]).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def rollout(params: M.PolicyParams, instances, task: TaskSpec, n_starts: int,
            mode: str = "sample", rng=None, feats=None, replay=None) -> Rollout:
    """Decode every instance with ``n_starts`` agents forced to distinct first moves.

    ``replay`` takes the ``actions`` array of an earlier rollout and re-scores
    exactly that trajectory (used for gradient checks).
    """
    if mode not in ("sample", "greedy", "replay") or (mode == "replay") != (replay is not None):
        raise ValueError(f"bad decoding mode {mode!r}")
    if mode == "sample" and rng is None:
        raise ValueError("sampling requires an rng")
    env = BatchEnv(instances, task, n_starts)
    B, A = env.B, env.A
    feats = M.static_features(instances) if feats is None else feats
    H = M.encode(feats, params)
    cs = M.cluster(H, task.onehot(), params)
    cache = M.decoder_cache(H, params)

    if replay is not None:
        first = np.asarray(replay)[:, :, 1]
    else:
        first = first_moves(env.mask()[:, 0], n_starts, mode, rng)
    env.step(first)
    C = M.subtract_visited(cs.centers, cs.psi, H, first)
    h_first = T.gather_rows(H, first)
    bi = np.arange(B)[:, None]
    ai = np.arange(A)[None, :]
    logprob = None
    t = 1
    while not env.all_done:
        t += 1
        mask = env.mask()
        live = ~env.done
        probs, _ = M.decode_step(T.gather_rows(H, env.pos), h_first, H, C,
                                 env.dynamic_features(), env.visited, mask, params, cache)
        if mode == "greedy":
            action = np.argmax(probs.data, axis=-1)
        elif mode == "replay":
            action = np.asarray(replay)[:, :, t]
        else:
            action = _sample(probs.data, rng)
        action = np.where(live, action, 0)
        p = T.index(probs, (np.broadcast_to(bi, (B, A)), np.broadcast_to(ai, (B, A)), action))
        lp = T.log(T.masked_fill(p, ~live, 1.0)) * live.astype(np.float64)
        logprob = lp if logprob is None else logprob + lp
        C = M.subtract_visited(C, cs.psi, H, action)
        env.step(action, mask)
    if logprob is None:
        logprob = T.tensor(np.zeros((B, A)))
    costs = env.costs()
    return Rollout(env.trajectories(), logprob, -costs, env.solutions(), costs)


def greedy_costs(params, instances, task, n_starts: int, batch_size: int = 64) -> np.ndarray:
    """Best-of-starts greedy cost per instance (no augmentation)."""
    out = []
    with T.no_grad():
        for i in range(0, len(instances), batch_size):
            r = rollout(params, instances[i:i + batch_size], task, n_starts, "greedy")
            out.append(r.costs.min(axis=1))
    return np.concatenate(out)


def reinforce_loss(logprob, rewards) -> Tensor:
    """-mean((R - b) * log p) with b the per-instance mean over starts."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.ndim != 2 or rewards.shape[1] < 2:
        raise ConfigError("reinforce_loss needs rewards shaped (instances, starts >= 2)")
    adv = rewards - rewards.mean(axis=1, keepdims=True)
    return T.mean(T.tensor(logprob) * adv) * -1.0


# ---------------------------------------------------------------- optimizer

class Adam:
    def __init__(self, params: M.PolicyParams, lr: float, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.tensors.items()}

    def step(self, params: M.PolicyParams) -> None:
        self.step_count += 1
        c1 = 1.0 - self.b1 ** self.step_count
        c2 = 1.0 - self.b2 ** self.step_count
        for k, p in params.tensors.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            if self.lr:
                p.data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def grad_norm(params: M.PolicyParams) -> float:
    sq = 0.0
    for name in params.names():   # fixed order keeps the sum reproducible
        g = params[name].grad
        if g is not None:
            sq += float(np.sum(g * g))
    return math.sqrt(sq)


# -------------------------------------------------------------------- epoch

@dataclass
class TrainState:
    cfg: TrainConfig
    params: M.PolicyParams
    opt: Adam
    rng: np.random.Generator
    epoch: int = 0

    @classmethod
    def fresh(cls, cfg: TrainConfig) -> "TrainState":
        rng = np.random.default_rng(cfg.seed)
        params = M.PolicyParams.init(cfg.model_config(), rng)
        return cls(cfg, params, Adam(params, cfg.learn_rate), rng)


def _dump_nonfinite(state: TrainState, batch: int, what: str):
    bad = [k for k, v in state.params.tensors.items() if not np.all(np.isfinite(v.data))]
    raise NonFiniteError(f"non-finite {what} at epoch {state.epoch + 1} batch {batch}; "
                         f"adam step {state.opt.step_count}; non-finite params: {bad or 'none'}")


def train_epoch(state: TrainState) -> dict:
    cfg, P, rng = state.cfg, state.params, state.rng
    sources = [resolve_source(s) for s in cfg.distribution_set]
    n_batches = math.ceil(cfg.episodes_per_epoch / cfg.batch_size)
    costs, losses, norms = [], [], []
    for b in range(n_batches):
        size = min(cfg.batch_size, cfg.episodes_per_epoch - b * cfg.batch_size)
        source = sources[rng.integers(len(sources))]
        task = cfg.tasks[rng.integers(len(cfg.tasks))]
        gen_seed = int(rng.integers(2 ** 63))
        instances = generate_instances(source, task, GenConfig(n=cfg.n), size, seed=gen_seed)
        P.zero_grad()
        try:
            r = rollout(P, instances, task, cfg.n_starts, "sample", rng)
        except (InfeasibleError, NonFiniteError) as e:
            raise type(e)(f"epoch {state.epoch + 1} batch {b} task {task}: {e}") from e
        loss = reinforce_loss(r.logprob, r.rewards)
        if not np.isfinite(loss.data):
            _dump_nonfinite(state, b, "loss")
        loss.backward()
        gn = grad_norm(P)
        if not np.isfinite(gn):
            _dump_nonfinite(state, b, "gradient")
        state.opt.step(P)
        costs.append(float(r.costs.mean()))
        losses.append(float(loss.data))
        norms.append(gn)
    state.epoch += 1
    return {"epoch": state.epoch, "mean_cost": float(np.mean(costs)),
            "loss": float(np.mean(losses)), "grad_norm": float(np.mean(norms))}


# --------------------------------------------------------------- checkpoint

@dataclass
class Checkpoint:
    config: dict
    epoch: int
    tensors: dict            # parameter name -> array
    adam_m: dict
    adam_v: dict
    adam_step: int
    rng_state: dict
    version: int = CKPT_VERSION

    @classmethod
    def from_state(cls, state: TrainState) -> "Checkpoint":
        return cls(state.cfg.to_dict(), state.epoch,
                   {k: v.data.copy() for k, v in state.params.tensors.items()},
                   {k: v.copy() for k, v in state.opt.m.items()},
                   {k: v.copy() for k, v in state.opt.v.items()},
                   state.opt.step_count, state.rng.bit_generator.state)

    def to_state(self) -> TrainState:
        cfg = TrainConfig.from_dict(self.config)
        params = M.PolicyParams(cfg.model_config(),
                                {k: Tensor(v.copy(), True) for k, v in self.tensors.items()})
        opt = Adam(params, cfg.learn_rate)
        opt.m = {k: v.copy() for k, v in self.adam_m.items()}
        opt.v = {k: v.copy() for k, v in self.adam_v.items()}
        opt.step_count = self.adam_step
        rng = np.random.default_rng()
        rng.bit_generator.state = self.rng_state
        return TrainState(cfg, params, opt, rng, self.epoch)


def _encode_checkpoint(ck: Checkpoint) -> bytes:
    meta = json.dumps({"config": ck.config, "epoch": ck.epoch, "adam_step": ck.adam_step,
                       "rng_state": ck.rng_state}, sort_keys=True).encode()
    table = [(k, v) for k, v in ck.tensors.items()]
    table += [(f"adam.m/{k}", v) for k, v in ck.adam_m.items()]
    table += [(f"adam.v/{k}", v) for k, v in ck.adam_v.items()]
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", ck.version))
    buf.write(struct.pack("<Q", len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(table)))
    for name, arr in table:
        raw = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(path, ck: Checkpoint) -> None:
    """Atomic write: a crash leaves either the old file or the new one."""
    path = Path(path)
    data = _encode_checkpoint(ck)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"{path}: {e.strerror}") from None
    if len(data) < 12 or data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    (version,) = struct.unpack("<I", data[4:8])
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupted)")
    r = _Reader(body)
    r.take(8)
    (meta_len,) = r.unpack("<Q")
    try:
        meta = json.loads(r.take(meta_len))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: bad metadata: {e}") from None
    (count,) = r.unpack("<I")
    tensors, m, v = {}, {}, {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q")
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        if name.startswith("adam.m/"):
            m[name[7:]] = arr
        elif name.startswith("adam.v/"):
            v[name[7:]] = arr
        else:
            tensors[name] = arr
    if r.pos != len(body):
        raise CheckpointError(f"{path}: trailing bytes after tensor table")
    if set(m) != set(tensors) or set(v) != set(tensors):
        raise CheckpointError(f"{path}: optimizer moments do not match parameters")
    return Checkpoint(meta["config"], meta["epoch"], tensors, m, v, meta["adam_step"],
                      meta["rng_state"], version)


# ------------------------------------------------------------------ driver

def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, float) else str(x)


def append_metrics(path, row: dict) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(METRIC_COLUMNS)
        w.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])


def train(cfg: TrainConfig | None, ckpt_path, metrics_path=None, resume=None,
          epochs: int | None = None, callback=None) -> TrainState:
    """Run (or continue) training up to ``epochs`` total epochs, checkpointing
    after every epoch.  Metrics rows are appended to ``metrics_path``."""
    if resume is not None:
        state = load_checkpoint(resume).to_state()
        if cfg is not None and cfg.to_dict() != state.cfg.to_dict():
            log.warning("resuming with the checkpoint's config; the given config is ignored")
    elif cfg is not None:
        state = TrainState.fresh(cfg)
    else:
        raise ConfigError("need a config or a checkpoint to resume from")
    total = state.cfg.epochs if epochs is None else epochs
    while state.epoch < total:
        t0 = time.perf_counter()
        row = train_epoch(state)
        row["wallclock"] = time.perf_counter() - t0
        log.info("epoch %d: cost %.4f loss %.5f grad %.4f (%.1fs)", row["epoch"],
                 row["mean_cost"], row["loss"], row["grad_norm"], row["wallclock"])
        if metrics_path is not None:
            append_metrics(metrics_path, row)
        if ckpt_path is not None:
            save_checkpoint(ckpt_path, Checkpoint.from_state(state))
        if callback is not None:
            callback(state, row)
    return state
