"""Dataset loading, on-disk graph format, and synthetic planted-partition graphs.

On-disk layout of a saved graph directory::

    nodes.jsonl   {"id": int, "title": str, "abstract": str, "label": str[, "features": [float]]}
    edges.tsv     src<TAB>dst, one undirected edge per line, '#' comments allowed
    meta.json     {"name": str, "categories": [str], "feature_dim": int | null}

A manifest is a JSON object with ``name``, ``node_file``, ``edge_file``,
``categories`` and optional ``feature_dim``. Relative paths resolve against the
manifest's own directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .graph import GraphError, NodeRecord, TextGraph, build_graph


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    node_file: Path
    edge_file: Path
    categories: tuple[str, ...]
    feature_dim: Optional[int] = None

    @classmethod
    def from_file(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DatasetError(f"cannot read manifest {path}: {exc}") from exc
        missing = {"name", "node_file", "edge_file", "categories"} - data.keys()
        if missing:
            raise DatasetError(f"manifest {path} is missing keys: {sorted(missing)}")
        base = path.parent
        return cls(
            name=data["name"],
            node_file=base / data["node_file"],
            edge_file=base / data["edge_file"],
            categories=tuple(data["categories"]),
            feature_dim=data.get("feature_dim"),
        )


@dataclass(frozen=True)
class SyntheticSpec:
    n: int = 300
    num_classes: int = 3
    p_in: float = 0.05
    p_out: float = 0.02
    vocab_per_class: int = 120
    tokens_per_node: int = 14
    shared_vocab: int = 300
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.p_out <= self.p_in <= 1:
            raise DatasetError(f"need 0 <= p_out <= p_in <= 1, got p_in={self.p_in}, p_out={self.p_out}")
        if self.num_classes < 1 or self.n < self.num_classes:
            raise DatasetError(f"need n >= num_classes >= 1, got n={self.n}, num_classes={self.num_classes}")
        if min(self.vocab_per_class, self.tokens_per_node, self.shared_vocab) <= 0:
            raise DatasetError("vocabulary sizes and tokens_per_node must be positive")


def synthetic_category_names(num_classes: int) -> tuple[str, ...]:
    # Equal-width numbering keeps any name from being a substring of another.
    width = len(str(num_classes - 1))
    return tuple(f"Topic {c:0{width}d}" for c in range(num_classes))


def class_token(c: int, k: int) -> str:
    return f"c{c}w{k}"


def shared_token(k: int) -> str:
    return f"s{k}"


def generate_synthetic(spec: SyntheticSpec) -> TextGraph:
    """Planted-partition graph whose node text is drawn from class vocabularies.

    Classes are contiguous blocks of node ids of (near-)equal size. Every
    unordered pair is linked independently with ``p_in`` inside a class and
    ``p_out`` across classes. Each token of a node's text comes from its class
    vocabulary with probability 0.7 and from the shared vocabulary otherwise.
    """
    rng = np.random.default_rng(spec.seed)
    labels = (np.arange(spec.n) * spec.num_classes) // spec.n

    edges = []
    for i in range(spec.n - 1):
        others = np.arange(i + 1, spec.n)
        prob = np.where(labels[others] == labels[i], spec.p_in, spec.p_out)
        hits = others[rng.random(others.shape[0]) < prob]
        edges.extend((i, int(j)) for j in hits)

    nodes = []
    for i in range(spec.n):
        c = int(labels[i])
        from_class = rng.random(spec.tokens_per_node) < 0.7
        class_ids = rng.integers(0, spec.vocab_per_class, spec.tokens_per_node)
        shared_ids = rng.integers(0, spec.shared_vocab, spec.tokens_per_node)
        tokens = [
            class_token(c, int(a)) if own else shared_token(int(b))
            for own, a, b in zip(from_class, class_ids, shared_ids)
        ]
        nodes.append(NodeRecord(i, " ".join(tokens[:8]), " ".join(tokens[8:]), c))
    return build_graph(nodes, edges, synthetic_category_names(spec.num_classes))


# Persistence -----------------------------------------------------------------

def _read_nodes(path: Path, categories: Sequence[str], feature_dim: Optional[int]) -> list[tuple]:
    index = {name: c for c, name in enumerate(categories)}
    raw = []
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DatasetError(f"cannot read node file {path}: {exc}") from exc
    seen = set()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            node_id = int(obj["id"])
            label_text = obj["label"]
            title = str(obj.get("title", ""))
            abstract = str(obj.get("abstract") or "")
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{path}:{lineno}: malformed node line ({exc})") from exc
        if label_text not in index:
            raise DatasetError(f"{path}:{lineno}: unknown label {label_text!r}")
        if node_id in seen:
            raise DatasetError(f"{path}:{lineno}: duplicate node id {node_id}")
        seen.add(node_id)
        features = obj.get("features")
        if features is not None:
            features = tuple(float(x) for x in features)
            if feature_dim is not None and len(features) != feature_dim:
                raise DatasetError(
                    f"{path}:{lineno}: feature length {len(features)} != feature_dim {feature_dim}"
                )
        raw.append((node_id, title, abstract, index[label_text], features))
    return raw


def _read_edges(path: Path) -> list[tuple[int, int]]:
    edges = []
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DatasetError(f"cannot read edge file {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        parts = body.split("\t") if "\t" in body else body.split()
        if len(parts) != 2:
            raise DatasetError(f"{path}:{lineno}: expected 'src<TAB>dst', got {line!r}")
        try:
            edges.append((int(parts[0]), int(parts[1])))
        except ValueError as exc:
            raise DatasetError(f"{path}:{lineno}: non-integer endpoint in {line!r}") from exc
    return edges


def _assemble(raw_nodes, raw_edges, categories, source: Path) -> TextGraph:
    """Map raw ids onto positions 0..N-1 (sorted by id) and build the graph."""
    raw_nodes = sorted(raw_nodes, key=lambda r: r[0])
    position = {r[0]: p for p, r in enumerate(raw_nodes)}
    nodes = [NodeRecord(p, title, abstract, label, features)
             for p, (_, title, abstract, label, features) in enumerate(raw_nodes)]
    edges = []
    for src, dst in raw_edges:
        if src not in position or dst not in position:
            raise DatasetError(f"{source}: edge ({src}, {dst}) references an unknown node id")
        edges.append((position[src], position[dst]))
    try:
        return build_graph(nodes, edges, categories)
    except GraphError as exc:
        raise DatasetError(f"{source}: {exc}") from exc


def load_dataset(manifest: DatasetManifest) -> TextGraph:
    if not manifest.categories:
        raise DatasetError(f"manifest {manifest.name!r} has no categories")
    for path in (manifest.node_file, manifest.edge_file):
        if not Path(path).exists():
            raise DatasetError(f"manifest {manifest.name!r}: file {path} does not exist")
    raw_nodes = _read_nodes(Path(manifest.node_file), manifest.categories, manifest.feature_dim)
    raw_edges = _read_edges(Path(manifest.edge_file))
    return _assemble(raw_nodes, raw_edges, manifest.categories, Path(manifest.node_file))


def write_edges(path: Path, edges, header: str = "") -> None:
    with open(path, "w") as fh:
        if header:
            fh.write(f"# {header}\n")
        for i, j in sorted(edges):
            fh.write(f"{i}\t{j}\n")


def save_graph(g: TextGraph, directory: str | Path, name: str = "graph") -> Path:
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "nodes.jsonl", "w") as fh:
            for node in g.nodes:
                obj = {
                    "id": node.id,
                    "title": node.title,
                    "abstract": node.abstract,
                    "label": g.category_names[node.label],
                }
                if node.features is not None:
                    obj["features"] = list(node.features)
                fh.write(json.dumps(obj) + "\n")
        write_edges(directory / "edges.tsv", g.edges)
        dim = len(g.nodes[0].features) if g.has_features() else None
        meta = {"name": name, "categories": list(g.category_names), "feature_dim": dim}
        (directory / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    except OSError as exc:
        raise DatasetError(f"cannot write graph to {directory}: {exc}") from exc
    return directory


def load_graph(directory: str | Path) -> TextGraph:
    directory = Path(directory)
    try:
        meta = json.loads((directory / "meta.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read graph metadata in {directory}: {exc}") from exc
    manifest = DatasetManifest(
        name=meta.get("name", directory.name),
        node_file=directory / "nodes.jsonl",
        edge_file=directory / "edges.tsv",
        categories=tuple(meta["categories"]),
        feature_dim=meta.get("feature_dim"),
    )
    return load_dataset(manifest)
