"""The policy network: MoE encoder, prompt-conditioned soft clustering, and a
Mixture-of-Depths decoder feeding a clipped single-head pointer.

All functions work on batches: node embeddings are (B, N, d) with N = n+1
(depot first), agent contexts are (B, A, d).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractViolation
from .tasks import TaskSpec
from .tensor import Tensor

N_STATIC = 5    # x, y, demand, tw open, tw close
N_DYNAMIC = 4   # load, route length, time, open flag


@dataclass
class ModelConfig:
    d: int = 64
    heads: int = 4
    ff_dim: int = 128
    enc_layers: int = 3
    dec_layers: int = 3
    n_experts: int = 4
    top_k: int = 2
    n_clusters: int = 5
    cluster_iters: int = 5
    beta: float = 0.1
    clip: float = 10.0

    def __post_init__(self):
        if self.d % self.heads:
            raise ConfigError("d must be divisible by heads")
        if not 1 <= self.top_k <= self.n_experts:
            raise ConfigError("top_k must lie in [1, n_experts]")
        if not 0 < self.beta <= 1:
            raise ConfigError("beta must lie in (0, 1]")
        if self.n_clusters < 1 or self.cluster_iters < 1:
            raise ConfigError("need at least one cluster and one clustering iteration")

    def to_dict(self):
        return asdict(self)


def mod_capacity(beta: float, a: int) -> int:
    """Tokens processed by one MoD layer: ceil(beta * a), at least 1."""
    # guard against 0.1 * 30 = 3.0000000000000004
    return max(1, min(a, math.ceil(beta * a - 1e-9)))


@dataclass
class PolicyParams:
    config: ModelConfig
    tensors: dict = field(default_factory=dict)

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> "PolicyParams":
        c = config
        d, ff = c.d, c.ff_dim
        spec = []

        def lin(name, fan_in, fan_out, bias=True):
            spec.append((f"{name}.w", (fan_in, fan_out), "u", fan_in))
            if bias:
                spec.append((f"{name}.b", (fan_out,), "u", fan_in))

        def ln(name):
            spec.append((f"{name}.g", (d,), "one", 0))
            spec.append((f"{name}.b", (d,), "zero", 0))

        def attn(prefix):
            for w in ("wq", "wk", "wv", "wo"):
                spec.append((f"{prefix}.{w}", (d, d), "u", d))

        lin("embed.depot", N_STATIC, d)
        lin("embed.node", N_STATIC, d)
        for l in range(c.enc_layers):
            p = f"enc.{l}"
            attn(p)
            ln(f"{p}.ln1")
            lin(f"{p}.gate", d, c.n_experts, bias=False)
            for j in range(c.n_experts):
                lin(f"{p}.exp.{j}.1", d, ff)
                lin(f"{p}.exp.{j}.2", ff, d)
            ln(f"{p}.ln2")
        lin("prompt", 4, d, bias=False)
        lin("cluster.h", d, d, bias=False)
        lin("cluster.c", 2 * d, d, bias=False)
        spec.append(("cluster.init", (c.n_clusters, d), "normal", 0))
        ln("cluster.ln")
        lin("combine", (1 + c.n_clusters) * d, d)
        lin("dyn", N_DYNAMIC, d)
        for l in range(c.dec_layers):
            p = f"dec.{l}"
            lin(f"{p}.router", d, 1, bias=False)
            attn(p)
            ln(f"{p}.ln1")
            lin(f"{p}.ff.1", d, ff)
            lin(f"{p}.ff.2", ff, d)
            ln(f"{p}.ln2")
        lin("ptr.q", d, d, bias=False)
        lin("ptr.k", d, d, bias=False)

        tensors = {}
        for name, shape, kind, fan_in in spec:
            if kind == "u":
                bound = 1.0 / math.sqrt(fan_in)
                arr = rng.uniform(-bound, bound, shape)
            elif kind == "normal":
                arr = rng.standard_normal(shape)
            elif kind == "one":
                arr = np.ones(shape)
            else:
                arr = np.zeros(shape)
            tensors[name] = Tensor(arr, requires_grad=True)
        return cls(config, tensors)

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def names(self):
        return list(self.tensors)

    def group_of(self, name: str) -> str:
        head = name.split(".")[0]
        if head in ("enc", "dec"):
            return head
        if head in ("prompt", "cluster"):
            return "cluster"
        return head

    def groups(self) -> dict:
        out = {}
        for name in self.tensors:
            out.setdefault(self.group_of(name), []).append(name)
        return out

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.config, {k: Tensor(v.data.copy(), True)
                                          for k, v in self.tensors.items()})


# ---------------------------------------------------------------- embedding

def static_features(instances) -> np.ndarray:
    """(B, N, 5) array of (x, y, demand, tw open, tw close)."""
    return np.stack([
        np.concatenate([inst.coords, inst.demand[:, None], inst.tw], axis=1)
        for inst in instances
    ])


def embed(feats, P: PolicyParams) -> Tensor:
    """Row-wise projection of static features; the depot row has its own weights."""
    feats = T.tensor(feats)
    depot = T.linear(feats[:, :1], P["embed.depot.w"], P["embed.depot.b"])
    nodes = T.linear(feats[:, 1:], P["embed.node.w"], P["embed.node.b"])
    return T.concat([depot, nodes], axis=1)


def embed_instance(inst, task: TaskSpec, P: PolicyParams) -> Tensor:
    """(n+1, d) embedding of a single instance."""
    return embed(static_features([inst]), P)[0]


# ------------------------------------------------------------------ encoder

def feed_forward(x, P, prefix):
    h = T.relu(T.linear(x, P[f"{prefix}.1.w"], P[f"{prefix}.1.b"]))
    return T.linear(h, P[f"{prefix}.2.w"], P[f"{prefix}.2.b"])


def _attend(x, kv, P, prefix, mask=None):
    return T.multi_head_attention(x, kv, kv, P.config.heads, mask, P[f"{prefix}.wq"],
                                  P[f"{prefix}.wk"], P[f"{prefix}.wv"], P[f"{prefix}.wo"])


def top_k_gates(logits: Tensor, k: int):
    """Renormalized gate weights: softmax over each token's k largest logits,
    exactly 0 for the rest.  Returns (weights, selected expert ids)."""
    order = np.argsort(-logits.data, axis=-1, kind="stable")
    chosen = order[..., :k]
    dropped = np.ones(logits.shape, dtype=bool)
    np.put_along_axis(dropped, chosen, False, axis=-1)
    return T.softmax(T.masked_fill(logits, dropped, -np.inf), axis=-1), chosen


def moe_layer(H, P: PolicyParams, layer: int, return_gates=False):
    """Transformer block whose feed-forward is a top-k mixture of expert MLPs."""
    c = P.config
    p = f"enc.{layer}"
    h = T.layer_norm(H + _attend(H, H, P, p), P[f"{p}.ln1.g"], P[f"{p}.ln1.b"])
    gates, _ = top_k_gates(T.linear(h, P[f"{p}.gate.w"]), c.top_k)
    mixed = None
    for j in range(c.n_experts):
        w = gates[..., j:j + 1]
        if not np.any(w.data):
            continue
        term = w * feed_forward(h, P, f"{p}.exp.{j}")
        mixed = term if mixed is None else mixed + term
    out = T.layer_norm(h + mixed, P[f"{p}.ln2.g"], P[f"{p}.ln2.b"])
    return (out, gates) if return_gates else out


def encode(feats, P: PolicyParams) -> Tensor:
    H = embed(feats, P)
    for l in range(P.config.enc_layers):
        H = moe_layer(H, P, l)
    return H


# --------------------------------------------------------------- clustering

@dataclass
class ClusterState:
    centers: Tensor                  # (B, Nc, d)
    psi: Tensor                      # (B, N, Nc), rows sum to 1
    raw_centers: Tensor | None = None  # last iteration's psi-weighted sums
    removed: frozenset = frozenset()


def cluster(H, gamma, P: PolicyParams) -> ClusterState:
    """Soft clustering of node embeddings conditioned on the task prompt.

    gamma: (4,) or (B, 4) constraint vector.  Each iteration: project nodes
    and [centers, prompt], assign every node a distribution over clusters,
    rebuild centers as assignment-weighted sums of H, residual + norm.
    """
    c = P.config
    H = T.tensor(H)
    B, N, d = H.shape
    gamma = np.broadcast_to(np.asarray(gamma, dtype=np.float64), (B, 4))
    alpha = T.linear(gamma, P["prompt.w"])                                  # (B, d)
    alpha = T.reshape(alpha, (B, 1, d)) * np.ones((1, c.n_clusters, 1))     # (B, Nc, d)
    h_proj = T.linear(H, P["cluster.h.w"])                                  # (B, N, d)
    C = T.reshape(P["cluster.init"], (1, c.n_clusters, d)) * np.ones((B, 1, 1))
    scale = 1.0 / math.sqrt(d)
    psi = raw = None
    for _ in range(c.cluster_iters):
        c_proj = T.linear(T.concat([C, alpha], axis=-1), P["cluster.c.w"])  # (B, Nc, d)
        scores = T.matmul(h_proj, T.swapaxes(c_proj, -1, -2)) * scale      # (B, N, Nc)
        psi = T.softmax(scores, axis=-1)
        raw = T.matmul(T.swapaxes(psi, -1, -2), H)                          # (B, Nc, d)
        C = T.layer_norm(c_proj + raw, P["cluster.ln.g"], P["cluster.ln.b"])
    return ClusterState(C, psi, raw)


def update_clusters(state: ClusterState, H, node: int) -> ClusterState:
    """Remove a newly visited node's share from every center (single instance)."""
    if node in state.removed:
        raise ContractViolation(f"node {node} already subtracted from the centers")
    H = T.tensor(H)
    psi_i = state.psi[:, node]                      # (B, Nc)
    h_i = H[:, node]                                # (B, d)
    B, Nc = psi_i.shape
    delta = T.reshape(psi_i, (B, Nc, 1)) * T.reshape(h_i, (B, 1, H.shape[-1]))
    return ClusterState(state.centers - delta, state.psi, state.raw_centers,
                        state.removed | {node})


def subtract_visited(C, psi, H, nodes: np.ndarray) -> Tensor:
    """Batched centre update for every agent.

    C: (B, A, Nc, d) per-agent centres (or (B, Nc, d) before the first move),
    nodes: (B, A) node just visited; depot moves leave C unchanged.
    """
    B, A = nodes.shape
    Nc = psi.shape[-1]
    d = H.shape[-1]
    psi_sel = T.gather_rows(psi, nodes)                   # (B, A, Nc)
    h_sel = T.gather_rows(H, nodes)                       # (B, A, d)
    delta = T.reshape(psi_sel, (B, A, Nc, 1)) * T.reshape(h_sel, (B, A, 1, d))
    keep = (nodes != 0).astype(np.float64)[:, :, None, None]
    if C.ndim == 3:
        C = T.reshape(C, (B, 1, Nc, d))
    return C - delta * keep


# ------------------------------------------------------------------ decoder

def mod_decoder_layer(ctx, H, mask, P: PolicyParams, layer: int, beta=None, kv=None,
                      return_selected=False):
    """Mixture-of-Depths layer over agent contexts (B, A, d).

    Only the ceil(beta*A) highest-router-score contexts of each instance go
    through attention + feed-forward; their output is scaled by the raw router
    score and added residually.  Everything else passes through unchanged.
    """
    ctx = T.tensor(ctx)
    B, A, d = ctx.shape
    beta = P.config.beta if beta is None else beta
    p = f"dec.{layer}"
    k = mod_capacity(beta, A)
    # elementwise product + row sum: identical contexts get bit-identical scores,
    # which a BLAS matvec does not guarantee
    router = T.sum_(ctx * T.reshape(P[f"{p}.router.w"], (d,)), axis=-1)
    # stable sort on -score keeps the lower agent index on ties
    sel = np.sort(np.argsort(-router.data, axis=1, kind="stable")[:, :k], axis=1)
    x = T.gather_rows(ctx, sel)                                      # (B, k, d)
    m = np.take_along_axis(np.asarray(mask, dtype=bool), sel[:, :, None], axis=1)
    if kv is None:
        kv = (T.linear(H, P[f"{p}.wk"]), T.linear(H, P[f"{p}.wv"]))
    att = T.multi_head_attention(T.linear(x, P[f"{p}.wq"]), kv[0], kv[1], P.config.heads, m,
                                 wo=P[f"{p}.wo"])
    u = T.layer_norm(x + att, P[f"{p}.ln1.g"], P[f"{p}.ln1.b"])
    f = T.layer_norm(u + feed_forward(u, P, f"{p}.ff"), P[f"{p}.ln2.g"], P[f"{p}.ln2.b"])
    r = T.reshape(T.gather_rows(router, sel), (B, k, 1))
    out = T.scatter_add_rows(ctx, f * r, sel)
    return (out, sel) if return_selected else out


def decoder_cache(H, P: PolicyParams):
    """Per-layer key/value projections and pointer keys; computed once per instance."""
    kv = [(T.linear(H, P[f"dec.{l}.wk"]), T.linear(H, P[f"dec.{l}.wv"]))
          for l in range(P.config.dec_layers)]
    return kv, T.linear(H, P["ptr.k.w"])


def decode_step(h_last, h_first, H, C, dyn, visited_mask, feas_mask, P: PolicyParams,
                cache=None, return_trace=False):
    """Next-node distribution for every agent.

    h_last/h_first: (B, A, d) embeddings of current and first node; C: per-agent
    centres (B, A, Nc, d) or shared (B, Nc, d); dyn: (B, A, 4) array.
    Returns (probs (B, A, N), final contexts (B, A, d)).
    """
    c = P.config
    B, A, d = h_last.shape
    if C.ndim == 3:
        C = T.reshape(C, (B, 1) + C.shape[1:]) * np.ones((1, A, 1, 1))
    flat_c = T.reshape(C, (B, A, c.n_clusters * d))
    ctx = T.linear(T.concat([h_last, flat_c], axis=-1), P["combine.w"], P["combine.b"])
    ctx = ctx + h_first + T.linear(np.asarray(dyn, dtype=np.float64), P["dyn.w"], P["dyn.b"])
    kv, keys = cache if cache is not None else decoder_cache(H, P)
    trace = []
    for l in range(c.dec_layers):
        ctx, sel = mod_decoder_layer(ctx, H, visited_mask, P, l, kv=kv[l], return_selected=True)
        trace.append(sel)
    q = T.linear(ctx, P["ptr.q.w"])
    logits = T.matmul(q, T.swapaxes(keys, -1, -2)) * (1.0 / math.sqrt(d))
    logits = T.tanh(logits) * c.clip
    probs = T.softmax(T.masked_fill(logits, ~np.asarray(feas_mask, dtype=bool), -np.inf), -1)
    if return_trace:
        return probs, ctx, logits, trace
    return probs, ctx

