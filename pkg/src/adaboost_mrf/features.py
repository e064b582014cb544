"""Feature templates and per-instance compilation.

A template maps (clique, state assignment, component) to indices of one
shared dense weight vector; all trees over the same network use the same
index space, which is what makes the combined vector ``sum(alpha_l * w_l)``
meaningful.

Per node the template yields ``idx, val`` arrays of shape ``(S, K)``: feature
``k`` of state ``s`` contributes ``val[s, k]`` at weight index ``idx[s, k]``.
Per edge the shapes are ``(Si, Sj, K)``. Zero ``val`` entries are inert, so
out-of-range observation windows are encoded as value 0 at index 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError
from .graphs import Edge, Instance, MarkovNetwork


@dataclass(frozen=True)
class FeatureBlock:
    """Metadata describing one contiguous index range of a template."""

    kind: str
    scope: str
    offset: int
    size: int


class FeatureTemplate:
    """Base class; concrete templates fill ``dim`` and ``blocks``."""

    dim: int = 0
    blocks: tuple[FeatureBlock, ...] = ()
    #: edge features identical for every edge of the same kind (see
    #: :meth:`edge_group_features` returning leading dimension 1)
    tied_edges: bool = False

    def node_features(self, net: MarkovNetwork, inst: Instance, node: int):
        raise NotImplementedError

    def edge_features(self, net: MarkovNetwork, inst: Instance, edge: Edge):
        raise NotImplementedError

    def node_group_features(self, net, inst, nodes: np.ndarray):
        """Stacked per-node features for nodes sharing one state size."""
        pairs = [self.node_features(net, inst, int(n)) for n in nodes]
        idx = np.stack([p[0] for p in pairs])
        val = np.stack([p[1] for p in pairs])
        return idx, val

    def edge_group_features(self, net, inst, edges: np.ndarray):
        """Stacked per-edge features; may return leading dim 1 when tied."""
        pairs = [self.edge_features(net, inst, (int(e[0]), int(e[1]))) for e in edges]
        idx = np.stack([p[0] for p in pairs])
        val = np.stack([p[1] for p in pairs])
        return idx, val

    def describe(self) -> dict:
        """Serializable description; must round-trip via template factories."""
        raise NotImplementedError


class IndicatorTemplate(FeatureTemplate):
    """Untied indicator features: one weight per (node, state) and per
    (edge, state pair).

    Index layout is deterministic: node blocks in node order, then edge
    blocks in the network's edge order.
    """

    def __init__(self, net: MarkovNetwork):
        self.net = net
        blocks = []
        offset = 0
        self._node_offsets = np.zeros(net.num_nodes, dtype=np.int64)
        for n in net.nodes:
            s = int(net.state_sizes[n])
            self._node_offsets[n] = offset
            blocks.append(FeatureBlock("node-indicator", f"node:{n}", offset, s))
            offset += s
        self._edge_offsets = {}
        for i, j in net.edges:
            size = int(net.state_sizes[i] * net.state_sizes[j])
            self._edge_offsets[(i, j)] = offset
            blocks.append(FeatureBlock("edge-indicator", f"edge:{i}-{j}", offset, size))
            offset += size
        self.dim = offset
        self.blocks = tuple(blocks)

    def node_features(self, net, inst, node):
        s = int(net.state_sizes[node])
        idx = (self._node_offsets[node] + np.arange(s, dtype=np.int64)).reshape(s, 1)
        return idx, np.ones((s, 1))

    def edge_features(self, net, inst, edge):
        i, j = edge
        si, sj = int(net.state_sizes[i]), int(net.state_sizes[j])
        idx = self._edge_offsets[edge] + (
            np.arange(si, dtype=np.int64)[:, None] * sj + np.arange(sj, dtype=np.int64)
        )
        return idx.reshape(si, sj, 1), np.ones((si, sj, 1))

    def describe(self):
        return {"kind": "indicator"}


@dataclass
class NodeGroup:
    nodes: np.ndarray  # (n,)
    idx: np.ndarray  # (n, S, K)
    val: np.ndarray  # (n, S, K)

    @property
    def state_size(self) -> int:
        return self.idx.shape[1]


@dataclass
class EdgeGroup:
    edges: np.ndarray  # (m, 2) node-id pairs, i < j
    idx: np.ndarray  # (m or 1, Si, Sj, K)
    val: np.ndarray  # (m or 1, Si, Sj, K)

    @property
    def tied(self) -> bool:
        return self.idx.shape[0] == 1 and self.edges.shape[0] > 1

    @property
    def shape(self) -> tuple[int, int]:
        return self.idx.shape[1], self.idx.shape[2]


@dataclass
class PotentialSet:
    """Log-potentials of one instance under fixed parameters."""

    node: np.ndarray  # (N, Smax); entries beyond a node's domain are junk
    edge_groups: list[np.ndarray]  # aligned with CompiledInstance.edge_groups


class CompiledInstance:
    """Instance features gathered into group arrays for fast evaluation.

    Groups are deterministic: nodes grouped by level (grids) or state size
    (general nets) in node order; edges grouped by level chains then cross
    levels (grids) or by state-size pair (general nets) in edge order.
    """

    def __init__(self, net: MarkovNetwork, template: FeatureTemplate, inst: Instance):
        from .graphs import check_instance

        check_instance(net, inst)
        self.net = net
        self.template = template
        self.inst = inst
        self.state_sizes = net.state_sizes
        self.smax = net.max_state_size

        self.node_groups: list[NodeGroup] = []
        for nodes in self._node_partition(net):
            idx, val = template.node_group_features(net, inst, nodes)
            self.node_groups.append(NodeGroup(nodes, idx, val))

        self.edge_groups: list[EdgeGroup] = []
        self.edge_pos: dict[Edge, tuple[int, int]] = {}
        for edges in self._edge_partition(net):
            arr = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
            idx, val = template.edge_group_features(net, inst, arr)
            g = len(self.edge_groups)
            self.edge_groups.append(EdgeGroup(arr, idx, val))
            tied = idx.shape[0] == 1
            for row, (i, j) in enumerate(edges):
                self.edge_pos[(i, j)] = (g, 0 if tied else row)

        # Domain masks: state validity, and validity restricted to labels.
        N, smax = net.num_nodes, self.smax
        self.allow_free = np.arange(smax)[None, :] < self.state_sizes[:, None]
        self.allow_clamped = self.allow_free.copy()
        vis = inst.labels >= 0
        if np.any(vis):
            rows = np.nonzero(vis)[0]
            self.allow_clamped[rows] = False
            self.allow_clamped[rows, inst.labels[rows]] = True

    @staticmethod
    def _node_partition(net: MarkovNetwork) -> list[np.ndarray]:
        if net.grid is not None:
            levels, _ = net.grid
            return [net.level_nodes(lv) for lv in range(levels)]
        order = []
        for size in sorted(set(net.state_sizes.tolist())):
            order.append(np.nonzero(net.state_sizes == size)[0])
        return order

    @staticmethod
    def _edge_partition(net: MarkovNetwork) -> list[list[Edge]]:
        if not net.edges:
            return []
        if net.grid is not None:
            levels, slices = net.grid
            groups = []
            for lv in range(levels):
                chain = [
                    (lv * slices + t, lv * slices + t + 1) for t in range(slices - 1)
                ]
                if chain:
                    groups.append(chain)
            for lv in range(levels - 1):
                groups.append(
                    [(lv * slices + t, (lv + 1) * slices + t) for t in range(slices)]
                )
            return groups
        by_shape: dict[tuple[int, int], list[Edge]] = {}
        for i, j in net.edges:
            by_shape.setdefault(
                (int(net.state_sizes[i]), int(net.state_sizes[j])), []
            ).append((i, j))
        return [by_shape[k] for k in sorted(by_shape)]

    # ------------------------------------------------------------------
    def allow(self, clamp: str) -> np.ndarray:
        if clamp == "none":
            return self.allow_free
        if clamp == "visible":
            return self.allow_clamped
        raise ValueError(f"clamp must be 'none' or 'visible', got {clamp!r}")

    def potentials(self, params: np.ndarray) -> PotentialSet:
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.template.dim,):
            raise ValueError(
                f"params must have shape ({self.template.dim},), got {params.shape}"
            )
        node = np.zeros((self.net.num_nodes, self.smax))
        for g in self.node_groups:
            pot = np.einsum("nsk,nsk->ns", params[g.idx], g.val)
            node[g.nodes[:, None], np.arange(g.state_size)[None, :]] = pot
        edge_pots = [
            np.einsum("mijk,mijk->mij", params[g.idx], g.val) for g in self.edge_groups
        ]
        if not np.isfinite(node).all() or any(
            not np.isfinite(p).all() for p in edge_pots
        ):
            raise NumericalError("non-finite potential")
        return PotentialSet(node, edge_pots)

    def edge_potential(self, pots: PotentialSet, edge: Edge) -> np.ndarray:
        g, row = self.edge_pos[edge]
        return pots.edge_groups[g][row]

    # ------------------------------------------------------------------
    def accumulate_expectations(
        self,
        node_marginals: np.ndarray,
        edge_marginals: list[np.ndarray] | None,
        out: np.ndarray,
        scale: float = 1.0,
    ) -> None:
        """Add ``scale *`` expected features under the given marginals to ``out``.

        ``edge_marginals`` is aligned with ``edge_groups``; entries may be
        ``None`` (treated as all-zero, e.g. off-tree edges).
        """
        for g in self.node_groups:
            marg = node_marginals[g.nodes[:, None], np.arange(g.state_size)[None, :]]
            contrib = (scale * marg)[:, :, None] * g.val
            np.add.at(out, g.idx, contrib)
        if edge_marginals is None:
            return
        for g, marg in zip(self.edge_groups, edge_marginals):
            if marg is None:
                continue
            if g.idx.shape[0] == 1:
                total = marg.sum(axis=0)
                np.add.at(out, g.idx[0], (scale * total)[:, :, None] * g.val[0])
            else:
                np.add.at(out, g.idx, (scale * marg)[:, :, :, None] * g.val)

    def assignment_features(self, assignment: np.ndarray) -> "SparseFeatures":
        assignment = np.asarray(assignment, dtype=np.int64)
        if assignment.shape != (self.net.num_nodes,):
            raise ValueError("assignment must give every node a state")
        if np.any(assignment < 0) or np.any(assignment >= self.state_sizes):
            raise ValueError("assignment state out of range")
        idx_parts, val_parts = [], []
        for g in self.node_groups:
            st = assignment[g.nodes]
            idx_parts.append(g.idx[np.arange(len(g.nodes)), st].ravel())
            val_parts.append(g.val[np.arange(len(g.nodes)), st].ravel())
        for g in self.edge_groups:
            si = assignment[g.edges[:, 0]]
            sj = assignment[g.edges[:, 1]]
            m = g.edges.shape[0]
            rows = np.zeros(m, dtype=np.int64) if g.idx.shape[0] == 1 else np.arange(m)
            idx_parts.append(g.idx[rows, si, sj].ravel())
            val_parts.append(g.val[rows, si, sj].ravel())
        if idx_parts:
            return SparseFeatures(np.concatenate(idx_parts), np.concatenate(val_parts))
        return SparseFeatures(np.zeros(0, dtype=np.int64), np.zeros(0))


@dataclass
class SparseFeatures:
    """Sparse feature vector as parallel (index, value) arrays.

    Indices may repeat; semantics are additive.
    """

    indices: np.ndarray
    values: np.ndarray

    def dot(self, w: np.ndarray) -> float:
        return float(np.dot(w[self.indices], self.values))

    def to_dense(self, dim: int) -> np.ndarray:
        out = np.zeros(dim)
        np.add.at(out, self.indices, self.values)
        return out


def compute_features(
    net: MarkovNetwork,
    template: FeatureTemplate,
    inst: Instance,
    assignment,
) -> SparseFeatures:
    """Global feature vector of a full labelling: sum of clique features."""
    return CompiledInstance(net, template, inst).assignment_features(
        np.asarray(assignment)
    )


def tree_support_mask(
    compiled: CompiledInstance, tree_edges: tuple[Edge, ...]
) -> np.ndarray:
    """Boolean mask over the weight vector: features of cliques inside the
    tree (all node cliques plus the tree's edges)."""
    mask = np.zeros(compiled.template.dim, dtype=bool)
    for g in compiled.node_groups:
        mask[g.idx.ravel()] = True
    tset = set(tree_edges)
    for g in compiled.edge_groups:
        if g.idx.shape[0] == 1:
            if any((int(i), int(j)) in tset for i, j in g.edges):
                mask[g.idx.ravel()] = True
        else:
            for row, (i, j) in enumerate(g.edges):
                if (int(i), int(j)) in tset:
                    mask[g.idx[row].ravel()] = True
    return mask
