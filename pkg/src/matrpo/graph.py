"""Communication graph and the random edge-activation schedule."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class CommGraph:
    """Undirected graph with per-endpoint weights ``C[e] = (C_e^i, C_e^j)``.

    ``edges[e] = (i, j)`` with ``i < j``; ``psi[e]`` is the activation
    probability of edge ``e``.
    """

    n_nodes: int
    edges: tuple[tuple[int, int], ...]
    weights: np.ndarray
    psi: np.ndarray
    incident: tuple[tuple[int, ...], ...] = field(init=False)

    def __post_init__(self):
        edges = tuple((int(min(a, b)), int(max(a, b))) for a, b in self.edges)
        w = np.asarray(self.weights, dtype=np.float64).reshape(len(edges), 2)
        psi = np.asarray(self.psi, dtype=np.float64).reshape(len(edges))
        for e, (a, b) in enumerate(edges):
            if a == b or not (0 <= a < self.n_nodes and 0 <= b < self.n_nodes):
                raise GraphError(f"edge {e} = ({a}, {b}) is not a pair of distinct nodes")
        if len(set(edges)) != len(edges):
            raise GraphError("duplicate edges")
        if edges and np.any(np.abs(w.sum(axis=1)) > 1e-12):
            raise GraphError("endpoint weights of every edge must sum to zero")
        if edges and (np.any(psi <= 0) or abs(psi.sum() - 1.0) > 1e-9):
            raise GraphError("activation probabilities must be positive and sum to one")
        if self.n_nodes > 1:
            rows = [a for a, _ in edges]
            cols = [b for _, b in edges]
            adj = coo_matrix((np.ones(len(edges)), (rows, cols)), shape=(self.n_nodes, self.n_nodes))
            n_comp, _ = connected_components(adj, directed=False)
            if n_comp != 1:
                raise GraphError(f"graph is disconnected ({n_comp} components)")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "psi", psi)
        incident = tuple(tuple(e for e, ed in enumerate(edges) if q in ed) for q in range(self.n_nodes))
        object.__setattr__(self, "incident", incident)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def weight(self, e: int, q: int) -> float:
        """``C_e^q`` for endpoint ``q`` of edge ``e``."""
        i, j = self.edges[e]
        if q == i:
            return float(self.weights[e, 0])
        if q == j:
            return float(self.weights[e, 1])
        raise GraphError(f"node {q} is not an endpoint of edge {e}")


def from_edges(n_nodes: int, edges: Sequence[tuple[int, int]], psi: Sequence[float] | None = None) -> CommGraph:
    """Graph with ``C = +1`` on the lower-indexed endpoint; ``psi`` is normalised."""
    edges = [(min(a, b), max(a, b)) for a, b in edges]
    if psi is None:
        psi = np.full(len(edges), 1.0 / max(len(edges), 1))
    else:
        psi = np.asarray(psi, dtype=np.float64)
        if psi.shape != (len(edges),) or np.any(psi <= 0):
            raise GraphError("psi needs one positive entry per edge")
        psi = psi / psi.sum()
    weights = np.tile([1.0, -1.0], (len(edges), 1))
    return CommGraph(n_nodes, tuple(edges), weights, psi)


def build_ring(n: int) -> CommGraph:
    if n < 2:
        raise GraphError(f"a ring needs at least 2 nodes, got {n}")
    if n == 2:
        return from_edges(2, [(0, 1)])
    return from_edges(n, [(i, (i + 1) % n) for i in range(n)])


def isolated(n: int = 1) -> CommGraph:
    """Edgeless graph; only valid for a single node."""
    return CommGraph(n, (), np.zeros((0, 2)), np.zeros(0))


def sample_edge(graph: CommGraph, rng: np.random.Generator) -> int:
    if graph.n_edges == 0:
        raise GraphError("graph has no edges to activate")
    return int(rng.choice(graph.n_edges, p=graph.psi))
