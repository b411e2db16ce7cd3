"""Graph construction, adjacency/transition matrices and walk setups."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class GraphError(ValueError):
    """Invalid graph, walk setup or graph descriptor."""


@dataclass(frozen=True)
class Graph:
    """Simple undirected unweighted graph on vertices ``0..order-1``.

    ``edges`` holds canonical pairs ``(m, k)`` with ``m < k``.
    """

    order: int
    edges: frozenset[tuple[int, int]]
    kind: str = ""

    def __post_init__(self) -> None:
        if self.order < 1:
            raise GraphError(f"graph order must be positive, got {self.order}")
        for m, k in self.edges:
            if m == k:
                raise GraphError(f"self-loop at vertex {m}")
            if not (0 <= m < self.order and 0 <= k < self.order):
                raise GraphError(f"edge ({m}, {k}) out of range for order {self.order}")
            if m > k:
                raise GraphError(f"edge ({m}, {k}) is not canonical (expected m < k)")

    @classmethod
    def from_edges(cls, order: int, edges, kind: str = "") -> Graph:
        canon = set()
        for m, k in edges:
            m, k = int(m), int(k)
            pair = (min(m, k), max(m, k))
            if pair in canon:
                raise GraphError(f"duplicate edge {pair}")
            canon.add(pair)
        return cls(order, frozenset(canon), kind or f"edges:{order}")

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.order, dtype=np.int64)
        for m, k in self.edges:
            deg[m] += 1
            deg[k] += 1
        return deg


@dataclass(frozen=True)
class WalkSetup:
    """A graph with source and target vertices; the sink is the virtual vertex ``n``."""

    graph: Graph
    source: int
    target: int

    def __post_init__(self) -> None:
        n = self.graph.order
        if not (0 <= self.source < n and 0 <= self.target < n):
            raise GraphError(f"source/target must lie in [0, {n})")
        if self.source == self.target:
            raise GraphError("source and target must differ")

    @property
    def n(self) -> int:
        return self.graph.order

    @property
    def sink(self) -> int:
        return self.graph.order

    @property
    def kind(self) -> str:
        return self.graph.kind


def make_cycle(n: int) -> WalkSetup:
    """Even cycle with source 0 and the opposite vertex ``n/2`` as target."""
    if n < 4 or n % 2:
        raise GraphError(f"cycle order must be even and >= 4, got {n}")
    edges = [(k, (k + 1) % n) for k in range(n)]
    graph = Graph.from_edges(n, edges, kind=f"cycle:{n}")
    return WalkSetup(graph, source=0, target=n // 2)


def adjacency_matrix(g: Graph) -> np.ndarray:
    A = np.zeros((g.order, g.order))
    for m, k in g.edges:
        A[m, k] = A[k, m] = 1.0
    return A


def transition_matrix(g: Graph) -> np.ndarray:
    """Column-stochastic ``T[m, k] = A[m, k] / deg(k)``."""
    A = adjacency_matrix(g)
    deg = A.sum(axis=0)
    if np.any(deg == 0):
        isolated = np.flatnonzero(deg == 0).tolist()
        raise GraphError(f"isolated vertices {isolated}: transition matrix undefined")
    return A / deg[None, :]


def pad_matrix(A: np.ndarray, n_max: int) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    if A.shape != (n, n):
        raise GraphError(f"expected a square matrix, got shape {A.shape}")
    if n > n_max:
        raise GraphError(f"matrix of order {n} does not fit in N_max={n_max}")
    out = np.zeros((n_max, n_max))
    out[:n, :n] = A
    return out


def parse_descriptor(desc: str) -> WalkSetup:
    """Parse ``cycle:<n>`` or ``edges:<n>:<m1>-<k1>,...[@<source>-><target>]``.

    Edge-list graphs default to source 0 and target ``n-1`` unless the
    optional ``@s->t`` suffix is given.
    """
    desc = desc.strip()
    family, _, rest = desc.partition(":")
    if family == "cycle":
        try:
            n = int(rest)
        except ValueError:
            raise GraphError(f"bad cycle descriptor {desc!r}") from None
        return make_cycle(n)
    if family == "edges":
        body, _, st = rest.partition("@")
        order_s, _, edge_s = body.partition(":")
        try:
            order = int(order_s)
            edges = [tuple(int(v) for v in e.split("-")) for e in edge_s.split(",") if e]
            if any(len(e) != 2 for e in edges):
                raise ValueError
            if st:
                s, t = (int(v) for v in st.split("->"))
            else:
                s, t = 0, order - 1
        except ValueError:
            raise GraphError(f"bad edge-list descriptor {desc!r}") from None
        graph = Graph.from_edges(order, edges, kind=desc)
        return WalkSetup(graph, source=s, target=t)
    raise GraphError(f"unknown graph family in descriptor {desc!r}")
