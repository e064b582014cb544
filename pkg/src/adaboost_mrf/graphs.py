"""Markov networks, spanning trees and labelled instances.

Nodes are integers ``0..N-1``. States are 0-based: node ``n`` takes values in
``0..state_sizes[n]-1``. Grid networks built by :func:`build_network` number
node ``(level, t)`` as ``level * num_slices + t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CycleError, DisconnectedError, GraphStructureError

Edge = tuple[int, int]


def _normalize_edges(num_nodes: int, edges) -> tuple[Edge, ...]:
    seen = set()
    out = []
    for e in edges:
        i, j = int(e[0]), int(e[1])
        if i == j:
            raise GraphStructureError(f"self-loop at node {i}")
        if not (0 <= i < num_nodes and 0 <= j < num_nodes):
            raise GraphStructureError(f"edge ({i},{j}) references undeclared node")
        key = (min(i, j), max(i, j))
        if key in seen:
            raise GraphStructureError(f"duplicate edge {key}")
        seen.add(key)
        out.append(key)
    return tuple(out)


@dataclass(frozen=True)
class MarkovNetwork:
    """Pairwise Markov network: nodes with per-node state counts plus edges.

    Cliques are the node singletons and the edges; higher-order cliques are
    rejected by construction. ``grid`` is set when the network is a
    level-by-slice grid, enabling grid-specific engines.
    """

    state_sizes: np.ndarray
    edges: tuple[Edge, ...]
    grid: tuple[int, int] | None = None

    def __post_init__(self):
        sizes = np.asarray(self.state_sizes, dtype=np.int64)
        if sizes.ndim != 1 or sizes.size == 0:
            raise GraphStructureError("state_sizes must be a non-empty 1-D sequence")
        if np.any(sizes < 1):
            raise GraphStructureError("every node needs at least one state")
        sizes.setflags(write=False)
        object.__setattr__(self, "state_sizes", sizes)
        object.__setattr__(self, "edges", _normalize_edges(sizes.size, self.edges))
        if self.grid is not None:
            levels, slices = self.grid
            if levels * slices != sizes.size:
                raise GraphStructureError("grid shape inconsistent with node count")

    @property
    def num_nodes(self) -> int:
        return int(self.state_sizes.size)

    @property
    def nodes(self) -> range:
        return range(self.num_nodes)

    @property
    def max_state_size(self) -> int:
        return int(self.state_sizes.max())

    @property
    def cliques(self) -> list[tuple[int, ...]]:
        """All singletons followed by all edges."""
        return [(n,) for n in self.nodes] + [e for e in self.edges]

    def edge_set(self) -> frozenset[Edge]:
        return frozenset(self.edges)

    # Grid helpers -----------------------------------------------------

    def node_at(self, level: int, t: int) -> int:
        if self.grid is None:
            raise GraphStructureError("not a grid network")
        levels, slices = self.grid
        if not (0 <= level < levels and 0 <= t < slices):
            raise GraphStructureError(f"grid position ({level},{t}) out of range")
        return level * slices + t

    def level_nodes(self, level: int) -> np.ndarray:
        levels, slices = self.grid
        return np.arange(level * slices, (level + 1) * slices)


def build_network(num_levels: int, num_slices: int, state_sizes) -> MarkovNetwork:
    """Build a grid network: per-level chains plus cross edges per slice.

    ``state_sizes`` is one integer (uniform) or one integer per level. The
    2-level case is the dynamic two-layer model: ``2T`` nodes and
    ``2(T-1) + T`` edges.
    """
    if num_levels < 1 or num_slices < 1:
        raise GraphStructureError("need at least one level and one slice")
    if np.isscalar(state_sizes):
        per_level = [int(state_sizes)] * num_levels
    else:
        per_level = [int(s) for s in state_sizes]
        if len(per_level) != num_levels:
            raise GraphStructureError("one state size per level required")
    sizes = np.repeat(per_level, num_slices)
    edges: list[Edge] = []
    for lv in range(num_levels):
        base = lv * num_slices
        edges.extend((base + t, base + t + 1) for t in range(num_slices - 1))
    for lv in range(num_levels - 1):
        for t in range(num_slices):
            edges.append((lv * num_slices + t, (lv + 1) * num_slices + t))
    return MarkovNetwork(sizes, tuple(edges), grid=(num_levels, num_slices))


@dataclass
class SpanningTree:
    """An acyclic, connected edge subset of a parent network.

    ``params`` lives in the template's shared feature index space; entries for
    cliques outside the tree stay exactly zero. ``grid_spine`` marks grid
    trees ("keep this level's chain plus all cross edges") so the same tree
    identity can be rebuilt on grids of other lengths.
    """

    tree_id: int
    network: MarkovNetwork
    edges: tuple[Edge, ...]
    params: np.ndarray | None = None
    grid_spine: int | None = None

    def edges_on(self, net: MarkovNetwork) -> tuple[Edge, ...]:
        """Edges of this tree instantiated on ``net``.

        Returns the stored edges when ``net`` is the home network; grid trees
        with a spine level are rebuilt for grids of a different length.
        """
        if net is self.network or (
            net.grid == self.network.grid
            and net.edges == self.network.edges
            and np.array_equal(net.state_sizes, self.network.state_sizes)
        ):
            return self.edges
        if self.grid_spine is None or net.grid is None:
            raise GraphStructureError(
                f"tree {self.tree_id} cannot be transferred to a different network"
            )
        return _spine_tree_edges(net, self.grid_spine)

    def edge_set(self) -> frozenset[Edge]:
        return frozenset(self.edges)


def _spine_tree_edges(net: MarkovNetwork, spine: int) -> tuple[Edge, ...]:
    levels, slices = net.grid
    if not (0 <= spine < levels):
        raise GraphStructureError(f"spine level {spine} out of range")
    base = spine * slices
    edges = [(base + t, base + t + 1) for t in range(slices - 1)]
    for lv in range(levels - 1):
        for t in range(slices):
            edges.append((lv * slices + t, (lv + 1) * slices + t))
    return tuple(edges)


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, x: int) -> int:
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        self.parent[ra] = rb
        return True


def validate_tree(
    net: MarkovNetwork,
    edges,
    tree_id: int = 0,
    dim: int | None = None,
    grid_spine: int | None = None,
) -> SpanningTree:
    """Check that ``edges`` form a spanning tree of ``net`` and wrap them.

    Raises :class:`CycleError` or :class:`DisconnectedError` otherwise. The
    returned tree has zero parameters of length ``dim`` when given.
    """
    net_edges = net.edge_set()
    canon = []
    for e in edges:
        key = (min(int(e[0]), int(e[1])), max(int(e[0]), int(e[1])))
        if key not in net_edges:
            raise GraphStructureError(f"edge {key} is not an edge of the network")
        canon.append(key)
    uf = _UnionFind(net.num_nodes)
    for i, j in canon:
        if not uf.union(i, j):
            raise CycleError(f"edge ({i},{j}) closes a cycle")
    roots = {uf.find(n) for n in net.nodes}
    if len(roots) > 1:
        raise DisconnectedError(f"edge set leaves {len(roots)} components")
    params = np.zeros(dim, dtype=np.float64) if dim is not None else None
    return SpanningTree(tree_id, net, tuple(canon), params, grid_spine)


def spanning_trees_for_grid(net: MarkovNetwork, dim: int | None = None) -> list[SpanningTree]:
    """The two natural trees of a 2-level grid.

    Tree 0 keeps the top chain plus every cross edge ("top process"); tree 1
    keeps the bottom chain plus every cross edge ("bottom process"). On a
    single-slice grid both degenerate to the lone cross edge.
    """
    if net.grid is None or net.grid[0] != 2:
        raise GraphStructureError("spanning_trees_for_grid needs a 2-level grid")
    return [
        validate_tree(net, _spine_tree_edges(net, 0), tree_id=0, dim=dim, grid_spine=0),
        validate_tree(net, _spine_tree_edges(net, 1), tree_id=1, dim=dim, grid_spine=1),
    ]


HIDDEN = -1


@dataclass
class Instance:
    """One training/evaluation case: observations plus per-node label slots.

    ``labels[n]`` is the visible state of node ``n`` or ``HIDDEN`` (-1).
    ``weight`` is the instance's data weight (nonnegative).
    """

    observations: np.ndarray | None
    labels: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.observations is not None:
            self.observations = np.asarray(self.observations, dtype=np.float64)
        if self.weight < 0:
            raise ValueError("instance weight must be nonnegative")

    @property
    def visible_mask(self) -> np.ndarray:
        return self.labels >= 0

    def num_visible(self) -> int:
        return int(np.count_nonzero(self.labels >= 0))


def check_instance(net: MarkovNetwork, inst: Instance) -> None:
    """Validate label slots against the network's state domains."""
    if inst.labels.shape != (net.num_nodes,):
        raise ValueError(
            f"labels shape {inst.labels.shape} does not match {net.num_nodes} nodes"
        )
    bad = (inst.labels < HIDDEN) | (inst.labels >= net.state_sizes)
    if np.any(bad):
        n = int(np.nonzero(bad)[0][0])
        raise ValueError(f"label {inst.labels[n]} out of range at node {n}")


def fully_hidden_instance(net: MarkovNetwork, observations=None, weight: float = 1.0) -> Instance:
    return Instance(observations, np.full(net.num_nodes, HIDDEN), weight)
