import math

import numpy as np
import pytest

from shield_vrp import model as M
from shield_vrp import tensor as T
from shield_vrp.errors import ConfigError, ContractViolation, DegenerateDistributionError
from shield_vrp.instance_gen import DistributionSource, GenConfig, generate_instances
from shield_vrp.tasks import TaskSpec

CVRP = TaskSpec()


def params(seed=0, **kw):
    return M.PolicyParams.init(M.ModelConfig(**kw), np.random.default_rng(seed))


def instances(task=CVRP, count=2, n=10, seed=0):
    return generate_instances(DistributionSource.uniform(), task, GenConfig(n=n, capacity=20), count, seed=seed)


def encoded(P, count=2, n=10):
    return M.encode(M.static_features(instances(count=count, n=n)), P)


# ------------------------------------------------------------------ config

def test_config_validation():
    with pytest.raises(ConfigError):
        M.ModelConfig(d=30, heads=4)
    with pytest.raises(ConfigError):
        M.ModelConfig(top_k=5, n_experts=4)
    with pytest.raises(ConfigError):
        M.ModelConfig(beta=0.0)


def test_shipped_defaults():
    c = M.ModelConfig()
    assert (c.n_clusters, c.cluster_iters, c.beta, c.clip, c.top_k) == (5, 5, 0.1, 10.0, 2)


@pytest.mark.parametrize("beta,a,k", [(0.1, 20, 2), (0.1, 8, 1), (0.1, 64, 7), (0.2, 20, 4),
                                      (0.5, 8, 4), (1.0, 64, 64), (0.1, 30, 3)])
def test_mod_capacity(beta, a, k):
    assert M.mod_capacity(beta, a) == k


def test_parameter_groups_and_copy():
    P = params()
    assert set(P.groups()) == {"embed", "enc", "cluster", "combine", "dyn", "dec", "ptr"}
    Q = P.copy()
    Q["ptr.q.w"].data[0, 0] += 1.0
    assert P["ptr.q.w"].data[0, 0] != Q["ptr.q.w"].data[0, 0]


# ------------------------------------------------------------------- embed

def test_zero_features_zero_bias_embed_to_zero():
    P = params()
    for k in ("embed.depot.b", "embed.node.b"):
        P[k].data[:] = 0
    out = M.embed(np.zeros((1, 4, 5)), P).data
    assert not out.any()


def test_limit_bit_does_not_change_embedding():
    P = params()
    a = instances(CVRP, 1)[0]
    b = a.replace(task=TaskSpec.from_name("VRPL"), limit=3.0)
    np.testing.assert_array_equal(M.embed_instance(a, CVRP, P).data,
                                  M.embed_instance(b, b.task, P).data)


def test_embedding_is_row_wise():
    P = params()
    f = M.static_features(instances(count=1))
    g = f.copy()
    g[0, 3] += 0.37
    a, b = M.embed(f, P).data, M.embed(g, P).data
    changed = np.any(a != b, axis=-1)[0]
    assert changed[3] and changed.sum() == 1


# --------------------------------------------------------------------- MoE

def test_single_expert_reduces_to_plain_block():
    P = params(n_experts=1, top_k=1, enc_layers=1)
    H = M.embed(M.static_features(instances()), P)
    out = M.moe_layer(H, P, 0).data
    h = T.layer_norm(H + M._attend(H, H, P, "enc.0"), P["enc.0.ln1.g"], P["enc.0.ln1.b"])
    ref = T.layer_norm(h + M.feed_forward(h, P, "enc.0.exp.0"), P["enc.0.ln2.g"],
                       P["enc.0.ln2.b"])
    np.testing.assert_allclose(out, ref.data, rtol=0, atol=1e-13)


def test_top2_of_4_gates():
    P = params()
    H = M.embed(M.static_features(instances()), P)
    _, gates = M.moe_layer(H, P, 0, return_gates=True)
    g = gates.data
    assert np.all((g > 0).sum(-1) == 2)
    np.testing.assert_allclose(g.sum(-1), 1.0, atol=1e-12)


def test_gate_weights_hand_case():
    w, chosen = M.top_k_gates(T.tensor([[1.0, 3.0, 0.5, 2.0]]), 2)
    e = np.exp([3.0, 2.0])
    np.testing.assert_allclose(w.data, [[0, e[0] / e.sum(), 0, e[1] / e.sum()]], atol=1e-15)
    assert list(chosen[0]) == [1, 3]


# --------------------------------------------------------------- clustering

def test_single_cluster_weights_and_sum():
    P = params(n_clusters=1)
    H = encoded(P)
    cs = M.cluster(H, np.zeros(4), P)
    assert np.all(cs.psi.data == 1.0)
    np.testing.assert_allclose(cs.raw_centers.data[:, 0], H.data.sum(1), atol=1e-12)


def test_psi_rows_and_weighted_sum_reconstruction():
    P = params()
    H = encoded(P)
    cs = M.cluster(H, TaskSpec.from_name("OVRPTW").onehot(), P)
    np.testing.assert_allclose(cs.psi.data.sum(-1), 1.0, atol=1e-12)
    recon = np.einsum("bnk,bnd->bkd", cs.psi.data, H.data)
    np.testing.assert_allclose(cs.raw_centers.data, recon, atol=1e-12)


def test_prompt_reaches_the_centers():
    P = params()
    H = encoded(P)
    a = M.cluster(H, TaskSpec().onehot(), P).centers.data
    b = M.cluster(H, TaskSpec.from_name("OVRPTW").onehot(), P).centers.data
    assert np.abs(a - b).max() > 1e-6


def test_update_clusters_examples():
    P = params(n_clusters=1)
    H = encoded(P, count=1)
    cs = M.cluster(H, np.zeros(4), P)
    start = cs.centers.data.copy()
    state = cs
    for node in range(H.shape[1]):
        state = M.update_clusters(state, H, node)
    np.testing.assert_allclose(state.centers.data, start - H.data.sum(1)[:, None], atol=1e-12)
    with pytest.raises(ContractViolation):
        M.update_clusters(state, H, 0)
    zero = M.ClusterState(cs.centers, T.tensor(np.zeros_like(cs.psi.data)))
    np.testing.assert_array_equal(M.update_clusters(zero, H, 3).centers.data, cs.centers.data)


def test_update_clusters_order_independent():
    P = params()
    H = encoded(P, count=1)
    cs = M.cluster(H, np.ones(4), P)
    a = b = cs
    for node in (3, 1, 7, 2):
        a = M.update_clusters(a, H, node)
    for node in (2, 7, 1, 3):
        b = M.update_clusters(b, H, node)
    np.testing.assert_allclose(a.centers.data, b.centers.data, atol=1e-14)


def test_batched_subtraction_matches_single_updates():
    P = params()
    H = encoded(P, count=2)
    cs = M.cluster(H, np.zeros(4), P)
    nodes = np.array([[3, 0, 5], [1, 2, 0]])
    C = M.subtract_visited(cs.centers, cs.psi, H, nodes).data
    for b in range(2):
        for a in range(3):
            exp = cs.centers.data[b]
            if nodes[b, a]:
                exp = exp - np.outer(cs.psi.data[b, nodes[b, a]], H.data[b, nodes[b, a]])
            np.testing.assert_allclose(C[b, a], exp, atol=1e-14)


# --------------------------------------------------------------------- MoD

def _ctx(B, A, d, seed=1):
    return np.random.default_rng(seed).normal(size=(B, A, d))


@pytest.mark.parametrize("beta", [0.1, 0.2, 0.5, 1.0])
@pytest.mark.parametrize("a", [8, 20])
def test_mod_selects_exact_count_and_passes_others_through(beta, a):
    P = params()
    H = encoded(P)
    ctx = _ctx(2, a, 64)
    mask = np.zeros((2, a, H.shape[1]), bool)
    out, sel = M.mod_decoder_layer(ctx, H, mask, P, 0, beta=beta, return_selected=True)
    k = math.ceil(beta * a - 1e-9)
    assert sel.shape == (2, k)
    for b in range(2):
        rest = np.setdiff1d(np.arange(a), sel[b])
        assert np.array_equal(out.data[b, rest], ctx[b, rest])
        assert np.all(np.any(out.data[b, sel[b]] != ctx[b, sel[b]], axis=-1))


def test_mod_zero_router_is_identity():
    P = params()
    P["dec.0.router.w"].data[:] = 0.0
    H = encoded(P)
    ctx = _ctx(2, 8, 64)
    out = M.mod_decoder_layer(ctx, H, np.zeros((2, 8, 11), bool), P, 0, beta=1.0)
    assert np.array_equal(out.data, ctx)


def test_mod_ties_go_to_lower_index():
    P = params()
    H = encoded(P)
    ctx = np.repeat(_ctx(2, 1, 64), 10, axis=1)
    _, sel = M.mod_decoder_layer(ctx, H, np.zeros((2, 10, 11), bool), P, 0, beta=0.2,
                                 return_selected=True)
    assert sel.tolist() == [[0, 1], [0, 1]]


# ------------------------------------------------------------------ decode

def _decode_inputs(P, B=2, A=4, n=10, seed=0):
    insts = instances(count=B, n=n, seed=seed)
    H = M.encode(M.static_features(insts), P)
    cs = M.cluster(H, np.zeros(4), P)
    first = np.tile(np.arange(1, A + 1), (B, 1))
    C = M.subtract_visited(cs.centers, cs.psi, H, first)
    h = T.gather_rows(H, first)
    visited = np.zeros((B, A, n + 1), bool)
    visited[np.arange(B)[:, None], np.arange(A)[None], first] = True
    feas = ~visited
    dyn = np.zeros((B, A, 4))
    return h, H, C, dyn, visited, feas


def test_probabilities_clip_and_mask():
    P = params()
    h, H, C, dyn, visited, feas = _decode_inputs(P)
    probs, ctx, logits, trace = M.decode_step(h, h, H, C, dyn, visited, feas, P,
                                              return_trace=True)
    p = probs.data
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)
    assert np.all(p[~feas] == 0.0)
    assert np.all(np.abs(logits.data) <= 10.0)
    assert len(trace) == 3 and all(s.shape == (2, 1) for s in trace)


def test_identical_agents_identical_rows():
    P = params()
    h, H, C, dyn, visited, feas = _decode_inputs(P, A=4)
    # all four agents share agent 0's state
    h0 = T.tensor(np.repeat(h.data[:, :1], 4, axis=1))
    C0 = T.tensor(np.repeat(C.data[:, :1], 4, axis=1))
    v0 = np.repeat(visited[:, :1], 4, axis=1)
    probs, _ = M.decode_step(h0, h0, H, C0, dyn, v0, ~v0, P)
    # selected agents differ from pass-through ones, so compare across batch rows
    probs2, _ = M.decode_step(h0, h0, H, C0, dyn, v0, ~v0, P)
    assert np.array_equal(probs.data, probs2.data)
    dup = T.tensor(np.concatenate([H.data[:1], H.data[:1]]))
    hh = T.tensor(np.concatenate([h0.data[:1], h0.data[:1]]))
    cc = T.tensor(np.concatenate([C0.data[:1], C0.data[:1]]))
    vv = np.concatenate([v0[:1], v0[:1]])
    p, _ = M.decode_step(hh, hh, dup, cc, dyn, vv, ~vv, P)
    assert np.array_equal(p.data[0], p.data[1])


def test_all_masked_agent_is_degenerate():
    P = params()
    h, H, C, dyn, visited, feas = _decode_inputs(P)
    feas[0, 0] = False
    with pytest.raises(DegenerateDistributionError):
        M.decode_step(h, h, H, C, dyn, visited, feas, P)


def test_pointer_permutation_equivariance():
    P = params(beta=1.0)
    inst = instances(count=1, n=8, seed=3)[0]
    perm = np.concatenate([[0], 1 + np.random.default_rng(0).permutation(8)])
    inst_p = inst.replace(coords=inst.coords[perm], demand=inst.demand[perm],
                          tw=inst.tw[perm], service=inst.service[perm])
    out = []
    for x, first in ((inst, 1), (inst_p, int(np.flatnonzero(perm == 1)[0]))):
        H = M.encode(M.static_features([x]), P)
        cs = M.cluster(H, np.zeros(4), P)
        f = np.array([[first]])
        C = M.subtract_visited(cs.centers, cs.psi, H, f)
        h = T.gather_rows(H, f)
        vis = np.zeros((1, 1, 9), bool)
        vis[0, 0, first] = True
        probs, _ = M.decode_step(h, h, H, C, np.zeros((1, 1, 4)), vis, ~vis, P)
        out.append(probs.data[0, 0])
    np.testing.assert_allclose(out[1], out[0][perm], atol=1e-10)
