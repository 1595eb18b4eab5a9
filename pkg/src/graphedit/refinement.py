"""Augment the graph with candidate edges and screen them with verdicts."""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

from .datasets import write_edges
from .edge_predictor import CandidateSet
from .graph import Edge, TextGraph, canonical_edge
from .llm import EdgeVerdict, parse_verdict, query_verdicts

log = logging.getLogger(__name__)

ORIGINAL = "original"
ADDED = "added"


class RefinementMode(str, enum.Enum):
    FULL = "full"
    NO_ADD = "no-add"
    NO_DEL = "no-del"
    CONSTRUCT_ONLY = "construct-only"


class CandidatePool(NamedTuple):
    screen: list[Edge]
    keep: list[Edge]


@dataclass
class RefinedGraph:
    edges: frozenset[Edge]
    provenance: dict[Edge, str]
    deleted_originals: frozenset[Edge]
    verdict_log: list[EdgeVerdict] = field(default_factory=list)
    mode: RefinementMode = RefinementMode.FULL

    def apply(self, g: TextGraph) -> TextGraph:
        return g.with_edges(self.edges)

    def sidecar(self) -> dict:
        return {
            "mode": self.mode.value,
            "provenance": [[i, j, self.provenance[(i, j)]] for i, j in sorted(self.edges)],
            "deleted_originals": [list(e) for e in sorted(self.deleted_originals)],
            "verdicts": [v.to_dict() for v in self.verdict_log],
            "stats": {
                "edges": len(self.edges),
                "added": sum(1 for p in self.provenance.values() if p == ADDED),
                "deleted": len(self.deleted_originals),
                "parse_failures": sum(v.parse_failed for v in self.verdict_log),
            },
        }

    def save(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_edges(directory / "edges.tsv", self.edges, header=f"refined graph, mode={self.mode.value}")
        (directory / "refinement.json").write_text(json.dumps(self.sidecar(), indent=1) + "\n")
        return directory

    @classmethod
    def load(cls, directory: str | Path) -> "RefinedGraph":
        side = json.loads((Path(directory) / "refinement.json").read_text())
        provenance = {(i, j): p for i, j, p in side["provenance"]}
        return cls(
            edges=frozenset(provenance),
            provenance=provenance,
            deleted_originals=frozenset(tuple(e) for e in side["deleted_originals"]),
            verdict_log=[EdgeVerdict.from_dict(v) for v in side["verdicts"]],
            mode=RefinementMode(side["mode"]),
        )


def assemble_candidate_pool(g: TextGraph, cands: CandidateSet, mode: RefinementMode | str) -> CandidatePool:
    """Split the augmented edge set into edges to screen and edges kept as-is.

    Candidate edges that duplicate an original edge collapse onto the original.
    """
    mode = RefinementMode(mode)
    candidate_edges = set()
    for i, row in enumerate(cands.neighbors):
        for j, _ in row:
            if not (0 <= i < g.n and 0 <= j < g.n) or i == j:
                raise ValueError(f"candidate edge ({i}, {j}) is out of range for a {g.n}-node graph")
            candidate_edges.add(canonical_edge(i, j))
    originals = sorted(g.edges)
    new_candidates = sorted(candidate_edges - g.edges)

    if mode is RefinementMode.FULL:
        return CandidatePool(originals + new_candidates, [])
    if mode is RefinementMode.NO_ADD:
        return CandidatePool(originals, [])
    if mode is RefinementMode.NO_DEL:
        return CandidatePool(new_candidates, originals)
    # Construct-only discards the original structure entirely.
    return CandidatePool(sorted(candidate_edges), [])


class VerdictCache:
    """Append-only JSON-lines store of raw responses keyed by ``"(min,max)"``."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.raw: dict[str, str] = {}
        if self.path.exists():
            for line in self.path.read_text().splitlines():
                if line.strip():
                    entry = json.loads(line)
                    self.raw[entry["key"]] = entry["raw"]

    @staticmethod
    def key(edge: Edge) -> str:
        i, j = canonical_edge(*edge)
        return f"({i},{j})"

    def get(self, edge: Edge) -> Optional[str]:
        return self.raw.get(self.key(edge))

    def extend(self, verdicts: list[EdgeVerdict]) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a") as fh:
            for v in verdicts:
                k = self.key(v.edge)
                if k not in self.raw and not v.parse_failed:
                    self.raw[k] = v.raw_response
                    fh.write(json.dumps({"key": k, "raw": v.raw_response}) + "\n")


def refine(g: TextGraph, pool: CandidatePool, backend, parallelism: int = 1,
           mode: RefinementMode | str = RefinementMode.FULL, retries: int = 2,
           with_category: bool = True, cache: Optional[VerdictCache] = None) -> RefinedGraph:
    """Screen ``pool.screen`` once per edge and keep the edges judged same-category.

    Only the True/False part of a verdict decides; the reported category is
    logged. On a backend abort nothing is returned (the exception propagates).
    """
    mode = RefinementMode(mode)
    screen = [canonical_edge(*e) for e in pool.screen]
    verdicts: dict[Edge, EdgeVerdict] = {}
    todo = []
    for edge in screen:
        raw = cache.get(edge) if cache is not None else None
        if raw is not None:
            verdicts[edge] = parse_verdict(raw, g.category_names, edge)
        else:
            todo.append(edge)
    fresh = query_verdicts(g, todo, backend, parallelism, retries, with_category)
    if cache is not None:
        cache.extend(fresh)
    verdicts.update((v.edge, v) for v in fresh)

    # Construct-only ignores the input structure, so every screened edge is a candidate.
    originals = frozenset() if mode is RefinementMode.CONSTRUCT_ONLY else g.edges
    kept: dict[Edge, str] = {}
    deleted = set()
    for edge in screen:
        origin = ORIGINAL if edge in originals else ADDED
        if verdicts[edge].same_category:
            kept[edge] = origin
        elif origin == ORIGINAL:
            deleted.add(edge)
    for edge in pool.keep:
        kept[canonical_edge(*edge)] = ORIGINAL
    return RefinedGraph(
        edges=frozenset(kept),
        provenance=kept,
        deleted_originals=frozenset(deleted),
        verdict_log=[verdicts[e] for e in screen],
        mode=mode,
    )


def refinement_report(r: RefinedGraph, g: TextGraph) -> dict:
    """Edge accounting plus intra/inter-class composition before and after (labels used for reporting only)."""
    labels = g.labels
    screened = {v.edge for v in r.verdict_log}

    def intra(edges) -> int:
        return sum(1 for i, j in edges if labels[i] == labels[j])

    originals = frozenset() if r.mode is RefinementMode.CONSTRUCT_ONLY else g.edges
    screened_orig = screened & originals
    screened_inter_orig = {e for e in screened_orig if labels[e[0]] != labels[e[1]]}
    kept_orig = {e for e in screened_orig if e in r.edges}
    passthrough = {e for e in originals if e not in screened and e in r.edges}
    added = {e for e, p in r.provenance.items() if p == ADDED}
    before, after = len(g.edges), len(r.edges)
    inter_after = after - intra(r.edges)

    return {
        "mode": r.mode.value,
        "edges_before": before,
        "edges_after": after,
        "originals_screened": len(screened_orig),
        "originals_kept": len(kept_orig),
        "originals_deleted": len(r.deleted_originals),
        "originals_passthrough": len(passthrough),
        "candidates_screened": len(screened - originals),
        "candidates_added": len(added),
        "intra_fraction_before": intra(g.edges) / before if before else None,
        "intra_fraction_after": intra(r.edges) / after if after else None,
        "inter_edges_before": before - intra(g.edges),
        "inter_edges_after": inter_after,
        "inter_deleted_fraction": (
            len(screened_inter_orig & r.deleted_originals) / len(screened_inter_orig)
            if screened_inter_orig else None
        ),
        "parse_failures": sum(v.parse_failed for v in r.verdict_log),
    }
