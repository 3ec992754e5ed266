"""Hot loops of the routing environment.

Every function here is compiled with numba unless ``SHIELD_NUMBA=0``.  The
batched mask/step kernels additionally have a vectorized NumPy twin
(``*_numpy``) which is what runs when numba is disabled; the two paths are
required to agree bit-for-bit (see tests/test_kernels.py).

Shared conventions
------------------
* node 0 is the depot; customers are 1..n
* ``demand`` is normalized by capacity, negative for backhauls
* ``z`` is the remaining normalized load budget, kept in [0, 1]; a move to
  customer j is capacity-feasible iff ``0 <= z - demand[j] <= 1``
* ``t`` is the clock after service at the current node, ``l`` the length of
  the current sub-tour; both reset to 0 at the depot (fresh vehicle)
"""
import numpy as np

from ._accel import USE_NUMBA, njit

# Slack on every feasibility comparison; absorbs the few-ULP drift that the
# 8 coordinate isometries introduce into distances.
EPS = 1e-9
# Two costs closer than this are treated as ties by the exact search.
TIE = 1e-9


@njit
def step_ok(dist, demand, tw, service, limit, is_open, use_tw, use_limit, pos, z, t, l, j):
    """Feasibility of moving from ``pos`` to customer ``j`` (j >= 1)."""
    nz = z - demand[j]
    if nz < -EPS or nz > 1.0 + EPS:
        return False
    dij = dist[pos, j]
    if use_limit:
        reach = l + dij
        if not is_open:
            reach = reach + dist[j, 0]
        if reach > limit + EPS:
            return False
    if use_tw:
        arrive = t + dij
        if arrive > tw[j, 1] + EPS:
            return False
        if not is_open:
            begin = max(arrive, tw[j, 0])
            if begin + service[j] + dist[j, 0] > tw[0, 1] + EPS:
                return False
    return True


@njit
def advance(dist, demand, tw, service, use_tw, pos, z, t, l, j, linehauls_left):
    """State (z, t, l) after moving pos -> j.  ``linehauls_left`` counts
    unvisited linehaul customers *after* the move."""
    if j == 0:
        return (1.0 if linehauls_left > 0 else 0.0), 0.0, 0.0
    dij = dist[pos, j]
    nz = z - demand[j]
    if nz < 0.0:
        nz = 0.0
    elif nz > 1.0:
        nz = 1.0
    nt = t
    if use_tw:
        nt = max(t + dij, tw[j, 0]) + service[j]
    return nz, nt, l + dij


@njit
def single_mask(dist, demand, tw, service, limit, is_open, use_tw, use_limit,
                pos, z, t, l, visited, out):
    n1 = dist.shape[0]
    any_ok = False
    out[0] = pos != 0
    for j in range(1, n1):
        ok = (not visited[j]) and step_ok(
            dist, demand, tw, service, limit, is_open, use_tw, use_limit, pos, z, t, l, j
        )
        out[j] = ok
        any_ok = any_ok or ok
    return any_ok or out[0]


@njit
def batch_mask_loop(dist, demand, tw, service, limit, is_open, use_tw, use_limit,
                    pos, z, t, l, visited, done, out):
    B, A = pos.shape
    n1 = dist.shape[1]
    for b in range(B):
        for a in range(A):
            if done[b, a]:
                out[b, a, 0] = True
                for j in range(1, n1):
                    out[b, a, j] = False
                continue
            single_mask(dist[b], demand[b], tw[b], service[b], limit[b], is_open, use_tw,
                        use_limit, pos[b, a], z[b, a], t[b, a], l[b, a], visited[b, a], out[b, a])


def batch_mask_numpy(dist, demand, tw, service, limit, is_open, use_tw, use_limit,
                     pos, z, t, l, visited, done, out):
    B, A = pos.shape
    bidx = np.arange(B)[:, None]
    d_from = dist[bidx, pos]                          # (B, A, N)
    back = dist[:, :, 0][:, None, :]                  # (B, 1, N) d(j, 0)
    nz = z[:, :, None] - demand[:, None, :]
    ok = (nz >= -EPS) & (nz <= 1.0 + EPS) & ~visited
    if use_limit:
        reach = l[:, :, None] + d_from
        if not is_open:
            reach = reach + back
        ok &= reach <= limit[:, None, None] + EPS
    if use_tw:
        arrive = t[:, :, None] + d_from
        ok &= arrive <= tw[:, None, :, 1] + EPS
        if not is_open:
            begin = np.maximum(arrive, tw[:, None, :, 0])
            ok &= begin + service[:, None, :] + back <= tw[:, None, 0:1, 1] + EPS
    ok[:, :, 0] = pos != 0
    ok[done] = False
    ok[done, 0] = True
    out[...] = ok


@njit
def batch_step_loop(dist, demand, tw, service, use_tw, pos, z, t, l, visited,
                    linehauls_left, done, action):
    B, A = pos.shape
    n1 = dist.shape[1]
    for b in range(B):
        for a in range(A):
            if done[b, a]:
                continue
            j = action[b, a]
            if j != 0:
                visited[b, a, j] = True
                if demand[b, j] > 0:
                    linehauls_left[b, a] -= 1
            nz, nt, nl = advance(dist[b], demand[b], tw[b], service[b], use_tw, pos[b, a],
                                 z[b, a], t[b, a], l[b, a], j, linehauls_left[b, a])
            z[b, a] = nz
            t[b, a] = nt
            l[b, a] = nl
            pos[b, a] = j
            finished = True
            for k in range(1, n1):
                if not visited[b, a, k]:
                    finished = False
                    break
            done[b, a] = finished


def batch_step_numpy(dist, demand, tw, service, use_tw, pos, z, t, l, visited,
                     linehauls_left, done, action):
    B, A = pos.shape
    bidx = np.broadcast_to(np.arange(B)[:, None], (B, A))
    live = ~done
    act = np.where(live, action, pos)
    cust = live & (act != 0)
    depot = live & (act == 0)
    visited[bidx[cust], np.nonzero(cust)[1], act[cust]] = True
    linehauls_left -= (cust & (demand[bidx, act] > 0)).astype(linehauls_left.dtype)
    dij = dist[bidx, pos, act]
    nz = np.clip(z - demand[bidx, act], 0.0, 1.0)
    nt = np.maximum(t + dij, tw[bidx, act, 0]) + service[bidx, act] if use_tw else t
    nl = l + dij
    z[cust] = nz[cust]
    t[cust] = nt[cust]
    l[cust] = nl[cust]
    z[depot] = np.where(linehauls_left[depot] > 0, 1.0, 0.0)
    t[depot] = 0.0
    l[depot] = 0.0
    pos[live] = act[live]
    done |= live & visited[:, :, 1:].all(axis=-1)


if USE_NUMBA:
    batch_mask = batch_mask_loop
    batch_step = batch_step_loop
else:
    batch_mask = batch_mask_numpy
    batch_step = batch_step_numpy


@njit
def exact_search(dist, demand, tw, service, limit, is_open, use_tw, use_limit):
    """Depth-first enumeration of every feasible action sequence.

    Actions are tried in increasing index order (depot first), so among
    equal-cost optima the lexicographically smallest flat sequence wins.
    Returns (best_cost, flat_sequence) with depot returns encoded as 0.
    """
    n1 = dist.shape[0]
    n = n1 - 1
    depth = 2 * n + 1
    pos = np.zeros(depth + 1, np.int64)
    zs = np.zeros(depth + 1)
    ts = np.zeros(depth + 1)
    ls = np.zeros(depth + 1)
    cost = np.zeros(depth + 1)
    vis = np.zeros(depth + 1, np.int64)
    lh = np.zeros(depth + 1, np.int64)
    nxt = np.zeros(depth + 1, np.int64)
    seq = np.zeros(depth + 1, np.int64)
    best_seq = np.zeros(depth + 1, np.int64)
    best = np.inf
    best_len = -1
    full = (1 << n) - 1
    total_lh = 0
    for j in range(1, n1):
        if demand[j] > 0:
            total_lh += 1
    lh[0] = total_lh
    zs[0] = 1.0 if total_lh > 0 else 0.0
    d = 0
    while d >= 0:
        if vis[d] == full:
            total = cost[d]
            if not is_open:
                total += dist[pos[d], 0]
            if total < best - TIE:
                best = total
                best_len = d
                for k in range(d):
                    best_seq[k] = seq[k]
            d -= 1
            continue
        a = nxt[d]
        if a > n:
            d -= 1
            continue
        nxt[d] = a + 1
        p = pos[d]
        if a == 0:
            if p == 0:
                continue
            c = cost[d] if is_open else cost[d] + dist[p, 0]
        else:
            if vis[d] & (1 << (a - 1)):
                continue
            if not step_ok(dist, demand, tw, service, limit, is_open, use_tw, use_limit,
                           p, zs[d], ts[d], ls[d], a):
                continue
            c = cost[d] + dist[p, a]
        if c >= best - TIE:
            continue
        seq[d] = a
        if a == 0:
            vis[d + 1] = vis[d]
            lh[d + 1] = lh[d]
        else:
            vis[d + 1] = vis[d] | (1 << (a - 1))
            lh[d + 1] = lh[d] - (1 if demand[a] > 0 else 0)
        nz, nt, nl = advance(dist, demand, tw, service, use_tw, p, zs[d], ts[d], ls[d], a, lh[d + 1])
        zs[d + 1] = nz
        ts[d + 1] = nt
        ls[d + 1] = nl
        pos[d + 1] = a
        cost[d + 1] = c
        nxt[d + 1] = 0
        d += 1
    return best, best_seq[:max(best_len, 0)].copy()


@njit
def route_eval(dist, demand, tw, service, limit, is_open, use_tw, use_limit, route, length):
    """(feasible, cost) of one sub-tour visiting route[:length] as a fresh vehicle.

    The vehicle starts with z=1 if the route holds any linehaul, else z=0;
    solutions order linehaul-bearing routes first so this matches the
    sequential semantics of the validator.
    """
    has_lh = False
    for k in range(length):
        if demand[route[k]] > 0:
            has_lh = True
            break
    z = 1.0 if has_lh else 0.0
    t = 0.0
    l = 0.0
    p = 0
    cost = 0.0
    for k in range(length):
        j = route[k]
        if not step_ok(dist, demand, tw, service, limit, is_open, use_tw, use_limit, p, z, t, l, j):
            return False, np.inf
        cost += dist[p, j]
        # linehauls_left only matters for depot moves, pass a dummy
        z, t, l = advance(dist, demand, tw, service, use_tw, p, z, t, l, j, 1)
        p = j
    if not is_open and length > 0:
        cost += dist[p, 0]
    return True, cost


@njit
def nearest_neighbor(dist, demand, tw, service, limit, is_open, use_tw, use_limit):
    """Greedy construction; returns a flat action sequence (0 = depot return)."""
    n1 = dist.shape[0]
    visited = np.zeros(n1, np.bool_)
    mask = np.zeros(n1, np.bool_)
    out = np.zeros(2 * n1, np.int64)
    k = 0
    lh_left = 0
    for j in range(1, n1):
        if demand[j] > 0:
            lh_left += 1
    z = 1.0 if lh_left > 0 else 0.0
    t = 0.0
    l = 0.0
    p = 0
    left = n1 - 1
    while left > 0:
        single_mask(dist, demand, tw, service, limit, is_open, use_tw, use_limit,
                    p, z, t, l, visited, mask)
        best = -1
        bd = np.inf
        for j in range(1, n1):
            if mask[j] and dist[p, j] < bd:
                bd = dist[p, j]
                best = j
        if best < 0:
            if p == 0:
                return out[:0]  # dead end; caller raises
            best = 0
        else:
            visited[best] = True
            left -= 1
            if demand[best] > 0:
                lh_left -= 1
        z, t, l = advance(dist, demand, tw, service, use_tw, p, z, t, l, best, lh_left)
        p = best
        out[k] = best
        k += 1
    return out[:k].copy()


@njit
def local_search(dist, demand, tw, service, limit, is_open, use_tw, use_limit, routes, lens,
                 max_rounds):
    """Intra-route 2-opt and inter/intra-route single-node relocation.

    ``routes`` is (R, n) holding customer ids, ``lens`` the route lengths;
    both are modified in place.  First-improvement, deterministic scan order.
    Returns the number of accepted moves.
    """
    R = routes.shape[0]
    n = routes.shape[1]
    costs = np.zeros(R)
    for r in range(R):
        ok, c = route_eval(dist, demand, tw, service, limit, is_open, use_tw, use_limit,
                           routes[r], lens[r])
        costs[r] = c if lens[r] > 0 else 0.0
    cand = np.zeros(n, np.int64)
    cand2 = np.zeros(n, np.int64)
    moves = 0
    for _ in range(max_rounds):
        improved = False
        # 2-opt inside each route
        for r in range(R):
            m = lens[r]
            for i in range(m - 1):
                for j in range(i + 1, m):
                    for k in range(m):
                        cand[k] = routes[r, k]
                    for k in range(j - i + 1):
                        cand[i + k] = routes[r, j - k]
                    ok, c = route_eval(dist, demand, tw, service, limit, is_open, use_tw,
                                       use_limit, cand, m)
                    if ok and c < costs[r] - 1e-12:
                        for k in range(m):
                            routes[r, k] = cand[k]
                        costs[r] = c
                        improved = True
                        moves += 1
        # relocate one customer to any position of any route
        for r in range(R):
            i = 0
            while i < lens[r]:
                node = routes[r, i]
                m = lens[r]
                # route r without the node
                q = 0
                for k in range(m):
                    if k != i:
                        cand[q] = routes[r, k]
                        q += 1
                if m - 1 > 0:
                    ok_src, c_src = route_eval(dist, demand, tw, service, limit, is_open, use_tw,
                                               use_limit, cand, m - 1)
                else:
                    ok_src, c_src = True, 0.0
                moved = False
                if ok_src:
                    for r2 in range(R):
                        if lens[r2] == 0 and r2 != r:
                            continue
                        base = cand if r2 == r else routes[r2]
                        m2 = m - 1 if r2 == r else lens[r2]
                        for pos in range(m2 + 1):
                            if r2 == r and pos == i:
                                continue
                            for k in range(pos):
                                cand2[k] = base[k]
                            cand2[pos] = node
                            for k in range(pos, m2):
                                cand2[k + 1] = base[k]
                            ok, c = route_eval(dist, demand, tw, service, limit, is_open,
                                               use_tw, use_limit, cand2, m2 + 1)
                            if not ok:
                                continue
                            if r2 == r:
                                delta = c - costs[r]
                            else:
                                delta = c_src + c - costs[r] - costs[r2]
                            if delta < -1e-12:
                                if r2 == r:
                                    for k in range(m2 + 1):
                                        routes[r, k] = cand2[k]
                                    costs[r] = c
                                else:
                                    for k in range(m - 1):
                                        routes[r, k] = cand[k]
                                    routes[r, m - 1] = 0
                                    lens[r] = m - 1
                                    costs[r] = c_src
                                    for k in range(m2 + 1):
                                        routes[r2, k] = cand2[k]
                                    lens[r2] = m2 + 1
                                    costs[r2] = c
                                moved = True
                                improved = True
                                moves += 1
                                break
                        if moved:
                            break
                if not moved:
                    i += 1
        if not improved:
            break
    return moves
