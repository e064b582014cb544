"""Exact and approximate inference engines.

All message arithmetic happens in log-space with per-message max
normalization. Clamping restricts the state domain of visible nodes; the
restriction is realized with a large finite sentinel (``LOG_ZERO``) so no
infinities or NaNs enter the arithmetic. Ties in MAP decoding break toward
the lowest state index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, GraphStructureError
from .features import CompiledInstance, FeatureTemplate, PotentialSet
from .graphs import Edge, Instance, MarkovNetwork, SpanningTree

#: additive identity of "state excluded": exp(LOG_ZERO - x) underflows to 0.0
#: for any realistic x while sums of a few sentinels stay finite.
LOG_ZERO = -1.0e30


def _lse(x: np.ndarray, axis: int) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(
        np.exp(x - m).sum(axis=axis)
    )


def _norm_probs(logp: np.ndarray, axis) -> np.ndarray:
    m = logp.max(axis=axis, keepdims=True)
    p = np.exp(logp - m)
    return p / p.sum(axis=axis, keepdims=True)


@dataclass
class InferenceResult:
    """Output of one inference call.

    ``node_marginals`` has shape (N, Smax); rows are padded with zeros past a
    node's domain. ``edge_marginals`` maps each inferred edge (i, j), i < j,
    to an (Si, Sj) joint table. ``log_partition`` is A(o), or A(v, o) when
    the visible labels were clamped.
    """

    log_partition: float
    node_marginals: np.ndarray | None = None
    edge_marginals: dict[Edge, np.ndarray] | None = None
    map_assignment: np.ndarray | None = None
    converged: bool | None = None
    rounds: int | None = None
    bethe_log_partition: float | None = None


@dataclass
class _Marginals:
    """Internal bundle with edge marginals aligned to compiled edge groups."""

    logZ: float
    node: np.ndarray | None = None
    edge_groups: list[np.ndarray | None] | None = None
    map_assignment: np.ndarray | None = None
    converged: bool | None = None
    rounds: int | None = None
    bethe: float | None = None


def _to_result(compiled: CompiledInstance, m: _Marginals) -> InferenceResult:
    edge_dict = None
    if m.edge_groups is not None:
        edge_dict = {}
        for g, marg in zip(compiled.edge_groups, m.edge_groups):
            if marg is None:
                continue
            for row, (i, j) in enumerate(g.edges):
                edge_dict[(int(i), int(j))] = marg[row]
    return InferenceResult(
        m.logZ, m.node, edge_dict, m.map_assignment, m.converged, m.rounds, m.bethe
    )


def _masked_node_pots(
    compiled: CompiledInstance, pots: PotentialSet, clamp: str
) -> tuple[np.ndarray, np.ndarray]:
    allow = compiled.allow(clamp)
    return np.where(allow, pots.node, LOG_ZERO), allow


def _oriented(psi: np.ndarray, edge: Edge, src: int) -> np.ndarray:
    """Edge potential viewed with ``src`` on the first axis."""
    return psi if src == edge[0] else psi.T


# ---------------------------------------------------------------------------
# Chain core
# ---------------------------------------------------------------------------


def _chain_sum(pot_m: np.ndarray, trans: np.ndarray, want_marginals: bool):
    """Log-space forward/backward over a chain.

    ``pot_m``: (T, S) sentinel-masked log node potentials.
    ``trans``: (T-1, S, S) or (1, S, S) log transition potentials.
    Returns (logZ, node_marginals, pair_marginals).
    """
    T, S = pot_m.shape
    tied = trans.shape[0] == 1 if trans.size else True
    alphas = np.empty((T, S))
    a = pot_m[0]
    c = a.max()
    a = a - c
    total = c
    alphas[0] = a
    for t in range(1, T):
        tr = trans[0] if tied else trans[t - 1]
        raw = pot_m[t] + _lse(a[:, None] + tr, axis=0)
        c = raw.max()
        a = raw - c
        total += c
        alphas[t] = a
    logZ = float(total + np.log(np.exp(a).sum()))
    if not want_marginals:
        return logZ, None, None

    betas = np.empty((T, S))
    betas[T - 1] = 0.0
    for t in range(T - 2, -1, -1):
        tr = trans[0] if tied else trans[t]
        raw = _lse(tr + (pot_m[t + 1] + betas[t + 1])[None, :], axis=1)
        betas[t] = raw - raw.max()

    node = _norm_probs(alphas + betas, axis=1)
    if T > 1:
        right = pot_m[1:] + betas[1:]
        tr_all = np.broadcast_to(trans[0], (T - 1, S, S)) if tied else trans
        joint = alphas[:-1, :, None] + tr_all + right[:, None, :]
        pair = _norm_probs(joint.reshape(T - 1, -1), axis=1).reshape(T - 1, S, S)
    else:
        pair = np.zeros((0, S, S))
    return logZ, node, pair


def _chain_max(pot_m: np.ndarray, trans: np.ndarray) -> np.ndarray:
    """Max-product over a chain; returns the per-slice MAP states."""
    T, S = pot_m.shape
    tied = trans.shape[0] == 1 if trans.size else True
    a = pot_m[0].copy()
    back = np.empty((T - 1, S), dtype=np.int64)
    for t in range(1, T):
        tr = trans[0] if tied else trans[t - 1]
        scores = a[:, None] + tr
        back[t - 1] = scores.argmax(axis=0)
        a = pot_m[t] + scores.max(axis=0)
        a -= a.max()
    states = np.empty(T, dtype=np.int64)
    states[T - 1] = int(a.argmax())
    for t in range(T - 2, -1, -1):
        states[t] = back[t, states[t + 1]]
    return states


# ---------------------------------------------------------------------------
# Generic tree engine (arbitrary trees, per-edge message schedule)
# ---------------------------------------------------------------------------


def _tree_schedule(num_nodes: int, edges, root: int):
    adj: list[list[int]] = [[] for _ in range(num_nodes)]
    for i, j in edges:
        adj[i].append(j)
        adj[j].append(i)
    order = [root]
    parent = {root: -1}
    for u in order:
        for v in adj[u]:
            if v not in parent:
                parent[v] = u
                order.append(v)
    if len(order) != num_nodes:
        raise GraphStructureError("edge set does not span all nodes")
    return adj, order, parent


def _generic_tree(
    compiled: CompiledInstance,
    tree_edges,
    pots: PotentialSet,
    clamp: str,
    mode: str,
    want_marginals: bool,
    root: int = 0,
) -> _Marginals:
    net = compiled.net
    pot_full, _ = _masked_node_pots(compiled, pots, clamp)
    pot_m = {u: pot_full[u, : net.state_sizes[u]] for u in net.nodes}
    edge_key = {}
    for i, j in tree_edges:
        edge_key[(i, j)] = (i, j)
        edge_key[(j, i)] = (i, j)

    def psi(src, dst):
        e = edge_key[(src, dst)]
        return _oriented(compiled.edge_potential(pots, e), e, src)

    adj, order, parent = _tree_schedule(net.num_nodes, tree_edges, root)
    reducer = _lse if mode == "sum" else (lambda x, axis: x.max(axis=axis))

    msg: dict[tuple[int, int], np.ndarray] = {}
    upward_vec: dict[int, np.ndarray] = {}
    total = 0.0
    for u in reversed(order):
        vec = pot_m[u].copy()
        for v in adj[u]:
            if v != parent[u]:
                vec += msg[(v, u)]
        upward_vec[u] = vec
        p = parent[u]
        if p >= 0:
            m = reducer(vec[:, None] + psi(u, p), axis=0)
            c = m.max()
            total += c
            msg[(u, p)] = m - c

    if mode == "max":
        states = np.full(net.num_nodes, -1, dtype=np.int64)
        states[root] = int(upward_vec[root].argmax())
        for u in order:
            p = parent[u]
            if p >= 0:
                scores = upward_vec[u] + psi(p, u)[states[p], :]
                states[u] = int(scores.argmax())
        logZ = float(total + upward_vec[root].max())
        return _Marginals(logZ, map_assignment=states)

    logZ = float(total + _lse(upward_vec[root], axis=0))
    if not want_marginals:
        return _Marginals(logZ)

    for u in order:
        p = parent[u]
        if p < 0:
            continue
        vec = pot_m[p].copy()
        for k in adj[p]:
            if k != u:
                vec += msg[(k, p)]
        m = _lse(vec[:, None] + psi(p, u), axis=0)
        msg[(p, u)] = m - m.max()

    belief = {}
    node = np.zeros((net.num_nodes, compiled.smax))
    for u in net.nodes:
        b = pot_m[u].copy()
        for v in adj[u]:
            b += msg[(v, u)]
        belief[u] = b
        node[u, : b.size] = _norm_probs(b, axis=0)

    edge_groups: list[np.ndarray | None] = []
    tset = set(tree_edges)
    for g in compiled.edge_groups:
        si, sj = g.shape
        marg = None
        for row, (i, j) in enumerate(g.edges):
            e = (int(i), int(j))
            if e not in tset:
                continue
            if marg is None:
                marg = np.zeros((g.edges.shape[0], si, sj))
            bi = belief[e[0]] - msg[(e[1], e[0])]
            bj = belief[e[1]] - msg[(e[0], e[1])]
            joint = bi[:, None] + compiled.edge_potential(pots, e) + bj[None, :]
            marg[row] = _norm_probs(joint.reshape(-1), axis=0).reshape(si, sj)
        edge_groups.append(marg)
    return _Marginals(logZ, node, edge_groups)


# ---------------------------------------------------------------------------
# Caterpillar fast path (spine chain + absorbed leaves)
# ---------------------------------------------------------------------------


def _caterpillar_layout(num_nodes: int, edges):
    """Spine order and leaf attachments, or None if not a caterpillar."""
    if num_nodes == 1:
        return [0], []
    deg = np.zeros(num_nodes, dtype=np.int64)
    for i, j in edges:
        deg[i] += 1
        deg[j] += 1
    spine = [u for u in range(num_nodes) if deg[u] > 1]
    if not spine:  # two-node tree
        spine = [min(min(e) for e in edges)]
    spine_set = set(spine)
    leaves = [
        (i, j) if j not in spine_set else (j, i)
        for i, j in edges
        if i not in spine_set or j not in spine_set
    ]  # (host-or-leaf?, ...) fixed below
    leaf_edges = []
    spine_adj: dict[int, list[int]] = {u: [] for u in spine}
    for i, j in edges:
        ii, jj = int(i), int(j)
        if ii in spine_set and jj in spine_set:
            spine_adj[ii].append(jj)
            spine_adj[jj].append(ii)
        elif ii in spine_set:
            leaf_edges.append((ii, jj))  # (host, leaf)
        elif jj in spine_set:
            leaf_edges.append((jj, ii))
        else:
            return None  # leaf-leaf edge in a >2 node tree: not a tree anyway
    if any(len(v) > 2 for v in spine_adj.values()):
        return None
    ends = [u for u in spine if len(spine_adj[u]) <= 1]
    if len(spine) == 1:
        order = spine
    else:
        if len(ends) != 2:
            return None
        start = min(ends)
        order = [start]
        prev = -1
        while True:
            nxts = [v for v in spine_adj[order[-1]] if v != prev]
            if not nxts:
                break
            prev = order[-1]
            order.append(nxts[0])
        if len(order) != len(spine):
            return None
    return order, leaf_edges


def _caterpillar_tree(
    compiled: CompiledInstance,
    tree_edges,
    layout,
    pots: PotentialSet,
    clamp: str,
    mode: str,
    want_marginals: bool,
) -> _Marginals:
    net = compiled.net
    spine, leaf_edges = layout
    spine = np.asarray(spine, dtype=np.int64)
    T = spine.size
    S = int(net.state_sizes[spine[0]])
    if np.any(net.state_sizes[spine] != S):
        # mixed spine domains: fall back to the generic engine
        return _generic_tree(compiled, tree_edges, pots, clamp, mode, want_marginals)

    pot_full, _ = _masked_node_pots(compiled, pots, clamp)
    spine_pot = pot_full[spine, :S].copy()
    reducer = _lse if mode == "sum" else (lambda x, axis: x.max(axis=axis))

    # Leaf absorption, grouped by edge group and orientation for batching.
    spine_row = {int(u): r for r, u in enumerate(spine)}
    groups: dict[tuple[int, bool], list[tuple[int, int]]] = {}
    for host, leaf in leaf_edges:
        key = (min(host, leaf), max(host, leaf))
        g, row = compiled.edge_pos[key]
        groups.setdefault((g, host < leaf), []).append((host, leaf))
    leaf_info = []
    for (g, host_first), pairs in groups.items():
        hosts = np.array([spine_row[h] for h, _ in pairs])
        leaves = np.array([v for _, v in pairs])
        grp = compiled.edge_groups[g]
        gp = pots.edge_groups[g]
        if grp.idx.shape[0] == 1:
            psi = np.broadcast_to(gp[0], (len(pairs),) + gp[0].shape)
        else:
            rows = np.array([compiled.edge_pos[(min(h, v), max(h, v))][1] for h, v in pairs])
            psi = gp[rows]
        if not host_first:
            psi = psi.transpose(0, 2, 1)
        sl = int(net.state_sizes[leaves[0]])
        lp = pot_full[leaves, :sl]
        m = reducer(psi + lp[:, None, :], axis=2)  # (L, S)
        np.add.at(spine_pot, hosts, m)
        leaf_info.append((hosts, leaves, psi, lp, m))

    # Spine transitions along the path.
    if T > 1:
        chain_keys = [
            (min(spine[t], spine[t + 1]), max(spine[t], spine[t + 1]))
            for t in range(T - 1)
        ]
        gids = {compiled.edge_pos[k][0] for k in chain_keys}
        if len(gids) == 1 and compiled.edge_groups[next(iter(gids))].idx.shape[0] == 1:
            tr = pots.edge_groups[next(iter(gids))][0]
            if spine[0] > spine[1]:
                tr = tr.T
            trans = tr[None, :, :]
        else:
            trans = np.empty((T - 1, S, S))
            for t, k in enumerate(chain_keys):
                psi = compiled.edge_potential(pots, (int(k[0]), int(k[1])))
                trans[t] = psi if spine[t] < spine[t + 1] else psi.T
    else:
        trans = np.zeros((0, S, S))

    if mode == "max":
        states = np.full(net.num_nodes, -1, dtype=np.int64)
        states[spine] = _chain_max(spine_pot, trans)
        for hosts, leaves, psi, lp, _ in leaf_info:
            sc = psi[np.arange(len(hosts)), states[spine[hosts]], :] + lp
            states[leaves] = sc.argmax(axis=1)
        return _Marginals(0.0, map_assignment=states)

    logZ, spine_marg, spine_pair = _chain_sum(spine_pot, trans, want_marginals)
    if not want_marginals:
        return _Marginals(logZ)

    node = np.zeros((net.num_nodes, compiled.smax))
    node[spine[:, None], np.arange(S)[None, :]] = spine_marg

    # Leaf and leaf-edge marginals from conditionals through each cross edge.
    edge_groups: list[np.ndarray | None] = [None] * len(compiled.edge_groups)
    for hosts, leaves, psi, lp, m in leaf_info:
        cond = np.exp(psi + lp[:, None, :] - m[:, :, None])  # (L, S, Sl)
        joint = spine_marg[hosts][:, :, None] * cond
        node[leaves[:, None], np.arange(lp.shape[1])[None, :]] = joint.sum(axis=1)
        for k, (h, v) in enumerate(zip(spine[hosts], leaves)):
            key = (min(int(h), int(v)), max(int(h), int(v)))
            g, row = compiled.edge_pos[key]
            grp = compiled.edge_groups[g]
            if edge_groups[g] is None:
                edge_groups[g] = np.zeros((grp.edges.shape[0],) + grp.shape)
            jm = joint[k] if int(h) < int(v) else joint[k].T
            rows = np.nonzero((grp.edges[:, 0] == key[0]) & (grp.edges[:, 1] == key[1]))[0]
            edge_groups[g][rows[0]] = jm
    if T > 1:
        for t, k in enumerate(chain_keys):
            key = (int(k[0]), int(k[1]))
            g, row = compiled.edge_pos[key]
            grp = compiled.edge_groups[g]
            if edge_groups[g] is None:
                edge_groups[g] = np.zeros((grp.edges.shape[0],) + grp.shape)
            pm = spine_pair[t] if spine[t] < spine[t + 1] else spine_pair[t].T
            rows = np.nonzero((grp.edges[:, 0] == key[0]) & (grp.edges[:, 1] == key[1]))[0]
            edge_groups[g][rows[0]] = pm
    return _Marginals(logZ, node, edge_groups)


def _infer_tree(
    compiled: CompiledInstance,
    tree_edges,
    pots: PotentialSet,
    clamp: str,
    mode: str = "sum",
    want_marginals: bool = True,
) -> _Marginals:
    layout = _caterpillar_layout(compiled.net.num_nodes, tree_edges)
    if layout is not None:
        return _caterpillar_tree(
            compiled, tree_edges, layout, pots, clamp, mode, want_marginals
        )
    return _generic_tree(compiled, tree_edges, pots, clamp, mode, want_marginals)


# ---------------------------------------------------------------------------
# Exact inference on grids via mega-state chains
# ---------------------------------------------------------------------------

MEGA_STATE_GUARD = 10_000
_MEGA_MEMORY_GUARD = 50_000_000


def _infer_collapsed(
    compiled: CompiledInstance,
    pots: PotentialSet,
    clamp: str,
    mode: str = "sum",
    want_marginals: bool = True,
) -> _Marginals:
    net = compiled.net
    if net.grid is None or net.grid[0] < 2:
        raise GraphStructureError("collapsed-chain inference needs a >=2-level grid")
    levels, T = net.grid
    sizes = [int(net.state_sizes[lv * T]) for lv in range(levels)]
    M = int(np.prod(sizes))
    if M > MEGA_STATE_GUARD:
        raise CapacityError(f"mega-state size {M} exceeds guard {MEGA_STATE_GUARD}")

    pot_full, _ = _masked_node_pots(compiled, pots, clamp)
    # Per-slice mega potential tensor (T, S0, ..., S_{L-1}).
    mega = np.zeros((T, *sizes))
    for lv in range(levels):
        shape = [T] + [1] * levels
        shape[1 + lv] = sizes[lv]
        mega = mega + pot_full[net.level_nodes(lv), : sizes[lv]].reshape(shape)
    # Cross potentials between adjacent levels at the same slice.
    cross_group0 = levels if T > 1 else 0  # chain groups come first when T > 1
    for lv in range(levels - 1):
        g = cross_group0 + lv
        gp = pots.edge_groups[g]
        gp = np.broadcast_to(gp[0], (T,) + gp[0].shape) if gp.shape[0] == 1 else gp
        shape = [T] + [1] * levels
        shape[1 + lv] = sizes[lv]
        shape[2 + lv] = sizes[lv + 1]
        mega = mega + gp.reshape(shape)
    mega = mega.reshape(T, M)
    # Sentinel flooring keeps one addition of sentinels from drifting low.
    mega = np.maximum(mega, LOG_ZERO)

    if T > 1:
        chain_pots = [pots.edge_groups[lv] for lv in range(levels)]
        tied = all(p.shape[0] == 1 for p in chain_pots)
        reps = 1 if tied else T - 1
        if not tied and reps * M * M > _MEGA_MEMORY_GUARD:
            raise CapacityError("untied mega-state transition table too large")
        trans = np.zeros((reps, *sizes, *sizes))
        for lv in range(levels):
            p = chain_pots[lv]
            p = p if p.shape[0] == reps else np.broadcast_to(p[0], (reps,) + p[0].shape)
            shape = [reps] + [1] * (2 * levels)
            shape[1 + lv] = sizes[lv]
            shape[1 + levels + lv] = sizes[lv]
            trans = trans + p.reshape(shape)
        trans = trans.reshape(reps, M, M)
    else:
        trans = np.zeros((0, M, M))

    if mode == "max":
        mega_states = _chain_max(mega, trans)
        states = np.empty(net.num_nodes, dtype=np.int64)
        unr = np.unravel_index(mega_states, sizes)
        for lv in range(levels):
            states[net.level_nodes(lv)] = unr[lv]
        return _Marginals(0.0, map_assignment=states)

    logZ, mega_marg, mega_pair = _chain_sum(mega, trans, want_marginals)
    if not want_marginals:
        return _Marginals(logZ)

    node = np.zeros((net.num_nodes, compiled.smax))
    mm = mega_marg.reshape(T, *sizes)
    for lv in range(levels):
        axes = tuple(1 + k for k in range(levels) if k != lv)
        node[net.level_nodes(lv), : sizes[lv]] = mm.sum(axis=axes).reshape(T, sizes[lv])

    edge_groups: list[np.ndarray | None] = [None] * len(compiled.edge_groups)
    for lv in range(levels - 1):
        g = cross_group0 + lv
        keep = (1 + lv, 2 + lv)
        axes = tuple(a for a in range(1, levels + 1) if a not in keep)
        cm = mm.sum(axis=axes) if axes else mm
        edge_groups[g] = cm.reshape(T, sizes[lv], sizes[lv + 1])
    if T > 1:
        mp = mega_pair.reshape(T - 1, *sizes, *sizes)
        for lv in range(levels):
            keep = (1 + lv, 1 + levels + lv)
            axes = tuple(a for a in range(1, 2 * levels + 1) if a not in keep)
            edge_groups[lv] = mp.sum(axis=axes).reshape(T - 1, sizes[lv], sizes[lv])
    return _Marginals(logZ, node, edge_groups)


# ---------------------------------------------------------------------------
# Brute-force enumeration
# ---------------------------------------------------------------------------

BRUTE_FORCE_GUARD = 1_000_000


def _infer_brute(
    compiled: CompiledInstance,
    pots: PotentialSet,
    clamp: str,
    mode: str = "sum",
    want_marginals: bool = True,
    guard: int = BRUTE_FORCE_GUARD,
) -> _Marginals:
    net = compiled.net
    allow = compiled.allow(clamp)
    allowed = [np.nonzero(allow[n, : net.state_sizes[n]])[0] for n in net.nodes]
    counts = [a.size for a in allowed]
    total = int(np.prod([float(c) for c in counts]))
    if np.prod([float(c) for c in counts]) > guard:
        raise CapacityError(f"{total} assignments exceed guard {guard}")
    grid = np.indices(counts).reshape(net.num_nodes, -1)
    states = np.empty_like(grid)
    for n in net.nodes:
        states[n] = allowed[n][grid[n]]

    pot_full, _ = _masked_node_pots(compiled, pots, clamp)
    score = np.zeros(states.shape[1])
    for n in net.nodes:
        score += pot_full[n, states[n]]
    for (i, j) in net.edges:
        score += compiled.edge_potential(pots, (i, j))[states[i], states[j]]

    if mode == "max":
        return _Marginals(0.0, map_assignment=states[:, int(score.argmax())].copy())

    m = score.max()
    logZ = float(m + np.log(np.exp(score - m).sum()))
    if not want_marginals:
        return _Marginals(logZ)
    p = np.exp(score - logZ)

    node = np.zeros((net.num_nodes, compiled.smax))
    for n in net.nodes:
        node[n, : net.state_sizes[n]] = np.bincount(
            states[n], weights=p, minlength=int(net.state_sizes[n])
        )
    edge_groups = []
    for g in compiled.edge_groups:
        si, sj = g.shape
        marg = np.zeros((g.edges.shape[0], si, sj))
        for row, (i, j) in enumerate(g.edges):
            flat = states[i] * sj + states[j]
            marg[row] = np.bincount(flat, weights=p, minlength=si * sj).reshape(si, sj)
        edge_groups.append(marg)
    return _Marginals(logZ, node, edge_groups)


# ---------------------------------------------------------------------------
# Loopy belief propagation (synchronous, damping 0)
# ---------------------------------------------------------------------------


def _bethe(compiled, pots, pot_m, allow, node, edge_groups) -> float:
    def ent(p):
        q = p[p > 0]
        return float(-(q * np.log(q)).sum())

    net = compiled.net
    deg = np.zeros(net.num_nodes)
    for i, j in net.edges:
        deg[i] += 1
        deg[j] += 1
    energy = 0.0
    entropy = 0.0
    for n in net.nodes:
        s = int(net.state_sizes[n])
        b = node[n, :s]
        energy += float((b * np.where(allow[n, :s], pots.node[n, :s], 0.0)).sum())
        entropy -= (deg[n] - 1.0) * ent(b)
    for g, marg in zip(compiled.edge_groups, edge_groups):
        gp = None
        for row, (i, j) in enumerate(g.edges):
            b = marg[row]
            psi = compiled.edge_potential(pots, (int(i), int(j)))
            energy += float((b * psi).sum())
            entropy += ent(b)
    return energy + entropy


def _infer_bp(
    compiled: CompiledInstance,
    pots: PotentialSet,
    clamp: str,
    mode: str = "sum",
    rate: float = 1e-4,
    max_rounds: int = 100,
    want_marginals: bool = True,
) -> _Marginals:
    if rate <= 0:
        raise ValueError("rate must be positive")
    if max_rounds < 1:
        raise ValueError("max_rounds must be at least 1")
    net = compiled.net
    pot_m, allow = _masked_node_pots(compiled, pots, clamp)
    reducer = _lse if mode == "sum" else (lambda x, axis: x.max(axis=axis))

    # msg_fwd[g]: i -> j messages (m, Sj); msg_bwd[g]: j -> i messages (m, Si).
    msg_fwd, msg_bwd = [], []
    for g in compiled.edge_groups:
        si, sj = g.shape
        m = g.edges.shape[0]
        fj = np.where(allow[g.edges[:, 1], :sj], 0.0, LOG_ZERO)
        fi = np.where(allow[g.edges[:, 0], :si], 0.0, LOG_ZERO)
        msg_fwd.append(fj)
        msg_bwd.append(fi)

    def in_sums():
        acc = np.zeros((net.num_nodes, compiled.smax))
        for g, mf, mb in zip(compiled.edge_groups, msg_fwd, msg_bwd):
            si, sj = g.shape
            np.add.at(acc[:, :sj], g.edges[:, 1], np.maximum(mf, LOG_ZERO))
            np.add.at(acc[:, :si], g.edges[:, 0], np.maximum(mb, LOG_ZERO))
        return acc

    converged = False
    rounds = 0
    for r in range(max_rounds):
        acc = in_sums()
        delta = 0.0
        new_fwd, new_bwd = [], []
        for g, mf, mb, gp in zip(compiled.edge_groups, msg_fwd, msg_bwd, pots.edge_groups):
            si, sj = g.shape
            psi = gp if gp.shape[0] > 1 else np.broadcast_to(gp[0], (g.edges.shape[0], si, sj))
            cav_i = pot_m[g.edges[:, 0], :si] + acc[g.edges[:, 0], :si] - mb
            cav_j = pot_m[g.edges[:, 1], :sj] + acc[g.edges[:, 1], :sj] - mf
            nf = reducer(cav_i[:, :, None] + psi, axis=1)
            nb = reducer(psi + cav_j[:, None, :], axis=2)
            nf = np.where(allow[g.edges[:, 1], :sj], nf - nf.max(axis=1, keepdims=True), LOG_ZERO)
            nb = np.where(allow[g.edges[:, 0], :si], nb - nb.max(axis=1, keepdims=True), LOG_ZERO)
            if nf.size:
                delta = max(delta, float(np.abs(nf - mf).max()), float(np.abs(nb - mb).max()))
            new_fwd.append(nf)
            new_bwd.append(nb)
        msg_fwd, msg_bwd = new_fwd, new_bwd
        rounds = r + 1
        if delta < rate:
            converged = True
            break
    if not net.edges:
        converged = True

    acc = in_sums()
    belief = pot_m + np.where(compiled.allow_free, acc, 0.0)
    if mode == "max":
        masked = np.where(allow, belief, LOG_ZERO)
        states = masked.argmax(axis=1).astype(np.int64)
        return _Marginals(0.0, map_assignment=states, converged=converged, rounds=rounds)

    node = np.zeros((net.num_nodes, compiled.smax))
    for n in net.nodes:
        s = int(net.state_sizes[n])
        node[n, :s] = _norm_probs(belief[n, :s], axis=0)
    edge_groups = []
    for g, mf, mb, gp in zip(compiled.edge_groups, msg_fwd, msg_bwd, pots.edge_groups):
        si, sj = g.shape
        psi = gp if gp.shape[0] > 1 else np.broadcast_to(gp[0], (g.edges.shape[0], si, sj))
        cav_i = belief[g.edges[:, 0], :si] - mb
        cav_j = belief[g.edges[:, 1], :sj] - mf
        joint = cav_i[:, :, None] + psi + cav_j[:, None, :]
        m = g.edges.shape[0]
        marg = _norm_probs(joint.reshape(m, -1), axis=1).reshape(m, si, sj) if m else np.zeros((0, si, sj))
        edge_groups.append(marg)
    bethe = _bethe(compiled, pots, pot_m, allow, node, edge_groups)
    out = _Marginals(bethe, node, edge_groups, converged=converged, rounds=rounds, bethe=bethe)
    if not want_marginals:
        out.node, out.edge_groups = None, None
    return out


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------


def _compiled_for(net, template, inst) -> CompiledInstance:
    return CompiledInstance(net, template, inst)


def _tree_params(tree: SpanningTree, params) -> np.ndarray:
    if params is not None:
        return np.asarray(params, dtype=np.float64)
    if tree.params is None:
        raise ValueError("tree has no parameters; pass params= explicitly")
    return tree.params


def tree_sum_product(
    tree: SpanningTree,
    template: FeatureTemplate,
    inst: Instance,
    clamp: str = "none",
    params: np.ndarray | None = None,
) -> InferenceResult:
    """Exact sum-product on a spanning tree.

    Returns the log-partition A(o) (or A(v, o) under ``clamp="visible"``)
    and exact node/edge marginals, via a two-pass log-space schedule.
    """
    compiled = _compiled_for(tree.network, template, inst)
    pots = compiled.potentials(_tree_params(tree, params))
    m = _infer_tree(compiled, tree.edges, pots, clamp, "sum", True)
    return _to_result(compiled, m)


def tree_max_product(
    tree: SpanningTree,
    template: FeatureTemplate,
    inst: Instance,
    clamp: str = "none",
    params: np.ndarray | None = None,
) -> InferenceResult:
    """Exact MAP assignment on a spanning tree (clamped nodes stay fixed)."""
    compiled = _compiled_for(tree.network, template, inst)
    pots = compiled.potentials(_tree_params(tree, params))
    m = _infer_tree(compiled, tree.edges, pots, clamp, "max", False)
    sum_m = _infer_tree(compiled, tree.edges, pots, clamp, "sum", False)
    m.logZ = sum_m.logZ
    return _to_result(compiled, m)


def loopy_bp(
    net: MarkovNetwork,
    params: np.ndarray,
    template: FeatureTemplate,
    inst: Instance,
    mode: str = "sum",
    rate: float = 1e-4,
    max_rounds: int = 100,
    clamp: str = "none",
) -> InferenceResult:
    """Synchronous loopy belief propagation in log-space (no damping).

    Non-convergence is reported via ``converged``/``rounds``, not raised.
    In sum mode ``log_partition`` carries the Bethe estimate.
    """
    if mode not in ("sum", "max"):
        raise ValueError("mode must be 'sum' or 'max'")
    compiled = _compiled_for(net, template, inst)
    pots = compiled.potentials(np.asarray(params, dtype=np.float64))
    m = _infer_bp(compiled, pots, clamp, mode, rate, max_rounds, True)
    return _to_result(compiled, m)


def exact_collapsed_chain(
    net: MarkovNetwork,
    params: np.ndarray,
    template: FeatureTemplate,
    inst: Instance,
    clamp: str = "none",
) -> InferenceResult:
    """Exact grid inference by collapsing each slice into a mega-state."""
    compiled = _compiled_for(net, template, inst)
    pots = compiled.potentials(np.asarray(params, dtype=np.float64))
    m = _infer_collapsed(compiled, pots, clamp, "sum", True)
    return _to_result(compiled, m)


def brute_force(
    net: MarkovNetwork,
    params: np.ndarray,
    template: FeatureTemplate,
    inst: Instance,
    clamp: str = "none",
    max_assignments: int = BRUTE_FORCE_GUARD,
) -> InferenceResult:
    """Exact quantities by full enumeration; the reference oracle."""
    compiled = _compiled_for(net, template, inst)
    pots = compiled.potentials(np.asarray(params, dtype=np.float64))
    m = _infer_brute(compiled, pots, clamp, "sum", True, max_assignments)
    mx = _infer_brute(compiled, pots, clamp, "max", False, max_assignments)
    m.map_assignment = mx.map_assignment
    return _to_result(compiled, m)
