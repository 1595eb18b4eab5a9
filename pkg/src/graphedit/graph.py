"""Core graph types: text-attributed graphs, GCN propagation matrices, splits and noise."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

Edge = tuple[int, int]

_TOKEN_RE = re.compile(r"[a-z0-9]+")


class GraphError(ValueError):
    """Raised when graph data violates a structural invariant."""


def tokenize(text: str) -> list[str]:
    """Lowercase and split on runs of non-alphanumeric characters."""
    return _TOKEN_RE.findall(text.lower())


def canonical_edge(i: int, j: int) -> Edge:
    return (i, j) if i < j else (j, i)


@dataclass(frozen=True)
class NodeRecord:
    id: int
    title: str
    abstract: str
    label: int
    features: Optional[tuple[float, ...]] = None
    token_count: int = -1

    def __post_init__(self):
        if self.token_count < 0:
            object.__setattr__(self, "token_count", len(tokenize(self.text)))

    @property
    def text(self) -> str:
        if self.abstract:
            return f"{self.title} {self.abstract}"
        return self.title


@dataclass(frozen=True)
class TextGraph:
    nodes: tuple[NodeRecord, ...]
    edges: frozenset[Edge]
    num_classes: int
    category_names: tuple[str, ...]

    @property
    def n(self) -> int:
        return len(self.nodes)

    @property
    def labels(self) -> np.ndarray:
        return np.fromiter((node.label for node in self.nodes), dtype=np.int64, count=self.n)

    def sorted_edges(self) -> list[Edge]:
        return sorted(self.edges)

    def with_edges(self, edges: Iterable[Edge]) -> "TextGraph":
        """Return a copy carrying a different (already canonical) edge set."""
        return TextGraph(self.nodes, frozenset(edges), self.num_classes, self.category_names)

    def has_features(self) -> bool:
        return self.n > 0 and all(node.features is not None for node in self.nodes)

    def feature_matrix(self) -> np.ndarray:
        if not self.has_features():
            raise GraphError("graph nodes do not carry numeric features")
        return np.asarray([node.features for node in self.nodes], dtype=np.float64)


@dataclass(frozen=True)
class NormalizedAdjacency:
    """Symmetric GCN propagation matrix stored as CSR."""

    matrix: sp.csr_matrix

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def triplets(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        coo = self.matrix.tocoo()
        return coo.row, coo.col, coo.data

    def to_dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def __matmul__(self, other: np.ndarray) -> np.ndarray:
        return self.matrix @ other


@dataclass(frozen=True, eq=False)
class NodeSplit:
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray

    def to_dict(self) -> dict:
        return {name: getattr(self, name).tolist() for name in ("train", "valid", "test")}

    @classmethod
    def from_dict(cls, data: dict) -> "NodeSplit":
        return cls(*(np.asarray(data[name], dtype=np.int64) for name in ("train", "valid", "test")))


def build_graph(
    nodes: Sequence[NodeRecord],
    raw_edges: Iterable[Sequence[int]],
    categories: Sequence[str],
) -> TextGraph:
    """Validate nodes and collapse a raw edge list into a simple undirected graph.

    Self-loops are dropped and (i, j) / (j, i) duplicates merge into one
    canonical ``(min, max)`` pair.
    """
    if not categories:
        raise GraphError("category list must be non-empty")
    n = len(nodes)
    num_classes = len(categories)
    dim = None
    for index, node in enumerate(nodes):
        if node.id != index:
            raise GraphError(f"node at position {index} has id {node.id}; ids must equal positions")
        if not 0 <= node.label < num_classes:
            raise GraphError(f"node {node.id} has label {node.label} outside [0, {num_classes})")
        if node.features is not None:
            if dim is None:
                dim = len(node.features)
            elif len(node.features) != dim:
                raise GraphError(f"node {node.id} feature dimension {len(node.features)} != {dim}")

    edges = set()
    for raw in raw_edges:
        i, j = int(raw[0]), int(raw[1])
        if not (0 <= i < n and 0 <= j < n):
            raise GraphError(f"edge ({i}, {j}) has an endpoint outside [0, {n})")
        if i != j:
            edges.add(canonical_edge(i, j))
    return TextGraph(tuple(nodes), frozenset(edges), num_classes, tuple(categories))


def adjacency_matrix(n: int, edges: Iterable[Edge]) -> sp.csr_matrix:
    """Binary symmetric adjacency matrix without self-loops."""
    pairs = np.asarray(sorted(edges), dtype=np.int64).reshape(-1, 2)
    rows = np.concatenate([pairs[:, 0], pairs[:, 1]])
    cols = np.concatenate([pairs[:, 1], pairs[:, 0]])
    data = np.ones(rows.shape[0], dtype=np.float64)
    return sp.csr_matrix((data, (rows, cols)), shape=(n, n))


def normalize_adjacency(g: TextGraph) -> NormalizedAdjacency:
    """Compute D^-1/2 (A + I) D^-1/2 with D the degree matrix of A + I."""
    a_hat = adjacency_matrix(g.n, g.edges) + sp.identity(g.n, format="csr", dtype=np.float64)
    degree = np.asarray(a_hat.sum(axis=1)).ravel()
    coo = a_hat.tocoo()
    # One sqrt per entry keeps closed forms like 1/deg on the diagonal exact.
    values = coo.data / np.sqrt(degree[coo.row] * degree[coo.col])
    matrix = sp.csr_matrix((values, (coo.row, coo.col)), shape=a_hat.shape)
    matrix.sort_indices()
    return NormalizedAdjacency(matrix)


def inject_noise(g: TextGraph, rate: float, seed: int) -> TextGraph:
    """Add floor(rate * |E|) uniformly random non-edges to the graph.

    Candidates are drawn by rejection; the attempt budget is 50 draws per
    requested edge.
    """
    if rate < 0:
        raise GraphError(f"noise rate must be non-negative, got {rate}")
    count = int(np.floor(rate * len(g.edges)))
    if count == 0:
        return g
    available = g.n * (g.n - 1) // 2 - len(g.edges)
    if count > available:
        raise GraphError(f"cannot add {count} noise edges: only {available} non-edges exist")

    rng = np.random.default_rng(seed)
    existing = set(g.edges)
    added: list[Edge] = []
    attempts = 0
    budget = 50 * count
    while len(added) < count:
        if attempts >= budget:
            raise GraphError(f"noise injection gave up after {budget} attempts ({len(added)}/{count} added)")
        i, j = (int(x) for x in rng.integers(0, g.n, size=2))
        attempts += 1
        if i == j:
            continue
        edge = canonical_edge(i, j)
        if edge in existing:
            continue
        existing.add(edge)
        added.append(edge)
    return g.with_edges(existing)


def split_nodes(g: TextGraph, ratios: Sequence[float] = (0.6, 0.2, 0.2), seed: int = 0) -> NodeSplit:
    """Shuffle node ids and cut them into train/valid/test.

    Train gets floor(r_train * N), valid floor(r_valid * N), test the remainder.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise GraphError(f"ratios must be three positive fractions, got {tuple(ratios)}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise GraphError(f"ratios must sum to 1, got {sum(ratios)}")
    if g.n < 3:
        raise GraphError(f"need at least 3 nodes to split, got {g.n}")
    order = np.random.default_rng(seed).permutation(g.n)
    n_train = int(np.floor(ratios[0] * g.n))
    n_valid = int(np.floor(ratios[1] * g.n))
    return NodeSplit(
        train=np.sort(order[:n_train]),
        valid=np.sort(order[n_train:n_train + n_valid]),
        test=np.sort(order[n_train + n_valid:]),
    )


def graph_stats(g: TextGraph) -> dict:
    """Summary counts; both undirected and directed (symmetrized) edge totals are reported."""
    labels = g.labels
    intra = sum(1 for i, j in g.edges if labels[i] == labels[j])
    degree = np.zeros(g.n, dtype=np.int64)
    for i, j in g.edges:
        degree[i] += 1
        degree[j] += 1
    return {
        "nodes": g.n,
        "edges_undirected": len(g.edges),
        "edges_directed": 2 * len(g.edges),
        "classes": g.num_classes,
        "intra_class_edges": intra,
        "inter_class_edges": len(g.edges) - intra,
        "edge_homophily": intra / len(g.edges) if g.edges else None,
        "isolated_nodes": int((degree == 0).sum()),
        "mean_degree": float(degree.mean()) if g.n else 0.0,
    }


# DOT export --------------------------------------------------------------

_PALETTE = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
)
_EDGE_STYLE = {
    "original": 'color="black"',
    "added": 'color="#2ca02c", style="bold"',
    "deleted": 'color="#d62728", style="dashed"',
}


def ego_sample(g: TextGraph, centers: int, seed: int) -> set[int]:
    """Random center nodes plus their one-hop neighbours."""
    rng = np.random.default_rng(seed)
    chosen = rng.choice(g.n, size=min(centers, g.n), replace=False)
    seeds = {int(c) for c in chosen}
    picked = set(seeds)
    for i, j in g.edges:
        if i in seeds or j in seeds:
            picked.update((i, j))
    return picked


def to_dot(g: TextGraph, node_subset: Iterable[int], refined=None) -> str:
    """Render the subgraph induced by ``node_subset`` as an undirected DOT graph.

    Nodes are filled by class. With a ``RefinedGraph`` the edges carry their
    provenance: kept originals in black, added candidates bold green, deleted
    originals dashed red.
    """
    subset = sorted(set(int(v) for v in node_subset))
    for v in subset:
        if not 0 <= v < g.n:
            raise GraphError(f"node {v} is not in the graph")
    inside = set(subset)

    if refined is None:
        styled = {e: "original" for e in g.edges}
    else:
        styled = {e: refined.provenance[e] for e in refined.edges}
        styled.update({e: "deleted" for e in refined.deleted_originals})

    lines = ["graph G {"]
    if subset:
        lines.append("  node [style=filled, shape=circle];")
    for v in subset:
        label = g.nodes[v].label
        color = _PALETTE[label % len(_PALETTE)]
        lines.append(f'  {v} [label="{v}", fillcolor="{color}", class="{label}"];')
    for (i, j) in sorted(styled):
        if i in inside and j in inside:
            lines.append(f"  {i} -- {j} [{_EDGE_STYLE[styled[(i, j)]]}];")
    lines.append("}")
    return "\n".join(lines) + "\n"
