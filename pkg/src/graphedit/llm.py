"""Pair prompts, verdict parsing, and verdict backends.

A backend is any object with::

    answer_pair(g, i, j, prompt) -> str
    answer_node(g, i, prompt) -> str

:class:`HttpBackend` only looks at the prompt. :class:`OracleBackend` ignores it
and answers from ground-truth labels, which makes it a stand-in for a perfectly
(or imperfectly) tuned model.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol, Sequence

import httpx

from .graph import Edge, TextGraph, canonical_edge

log = logging.getLogger(__name__)

URL_ENV = "GRAPHEDIT_BACKEND_URL"
TOKEN_ENV = "GRAPHEDIT_BACKEND_TOKEN"

PAIR_TEMPLATE = (
    "Based on the title and abstract of the two paper nodes. "
    "Do they belong to the same category among {categories}? "
    'If the answer is "True", answer "True" and the category, otherwise answer "False". '
    "The first paper: {title_i}, {abstract_i}. The second paper: {title_j}, {abstract_j}."
)
PAIR_TEMPLATE_NO_CATEGORY = (
    "Based on the title and abstract of the two paper nodes. "
    'Do they belong to the same category? Answer "True" or "False". '
    "The first paper: {title_i}, {abstract_i}. The second paper: {title_j}, {abstract_j}."
)
NODE_TEMPLATE = (
    "Based on the title and abstract of the paper node. "
    "Which category among {categories} does it belong to? Answer with the category. "
    "The paper: {title}, {abstract}."
)


class ParseFailure(ValueError):
    pass


class BackendError(RuntimeError):
    """A single backend call failed (transport error, bad status, bad payload)."""


class BackendUnavailable(RuntimeError):
    """Retries exhausted; carries how many items completed before the abort."""

    def __init__(self, message: str, completed: int, total: int):
        super().__init__(f"{message} ({completed}/{total} completed)")
        self.completed = completed
        self.total = total


@dataclass(frozen=True)
class PairPrompt:
    edge: Edge
    prompt_text: str
    categories: tuple[str, ...]


@dataclass(frozen=True)
class EdgeVerdict:
    edge: Edge
    same_category: bool
    category: Optional[int] = None
    raw_response: str = ""
    parse_failed: bool = False

    def to_dict(self) -> dict:
        return {
            "edge": list(self.edge),
            "same_category": self.same_category,
            "category": self.category,
            "raw_response": self.raw_response,
            "parse_failed": self.parse_failed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EdgeVerdict":
        return cls(tuple(d["edge"]), d["same_category"], d["category"], d["raw_response"], d["parse_failed"])


@dataclass(frozen=True)
class OracleConfig:
    flip_rate: float = 0.0
    category_error_rate: float = 0.0
    seed: int = 0
    with_category: bool = True

    def __post_init__(self):
        for name in ("flip_rate", "category_error_rate"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")


class VerdictBackend(Protocol):
    def answer_pair(self, g: TextGraph, i: int, j: int, prompt: str) -> str: ...

    def answer_node(self, g: TextGraph, i: int, prompt: str) -> str: ...


# Prompts ------------------------------------------------------------------------

def _category_list(names: Sequence[str]) -> str:
    return ", ".join(names)


def build_pair_prompt(g: TextGraph, i: int, j: int, with_category: bool = True) -> PairPrompt:
    """Fill the pair template with node ``i`` as the first paper and ``j`` as the second."""
    if i == j:
        raise ValueError(f"a pair prompt needs two distinct nodes, got ({i}, {j})")
    a, b = g.nodes[i], g.nodes[j]
    template = PAIR_TEMPLATE if with_category else PAIR_TEMPLATE_NO_CATEGORY
    text = template.format(
        categories=_category_list(g.category_names),
        title_i=a.title, abstract_i=a.abstract,
        title_j=b.title, abstract_j=b.abstract,
    )
    return PairPrompt((i, j), text, g.category_names)


def build_node_prompt(g: TextGraph, i: int) -> str:
    node = g.nodes[i]
    return NODE_TEMPLATE.format(categories=_category_list(g.category_names),
                                title=node.title, abstract=node.abstract)


def format_answer(same: bool, category: Optional[str], with_category: bool = True) -> str:
    if not same:
        return "False"
    if not with_category or category is None:
        return "True"
    return f"True, {category}"


# Parsing --------------------------------------------------------------------------

_BOOL_RE = re.compile(r"\b(true|false)\b", re.IGNORECASE)


def find_category(text: str, categories: Sequence[str]) -> Optional[int]:
    """Index of the earliest category name in ``text``; the longest name wins at a shared start."""
    best: Optional[tuple[int, int, int]] = None  # (position, -length, index)
    for index, name in enumerate(categories):
        found = re.search(rf"(?<!\w){re.escape(name)}(?!\w)", text, re.IGNORECASE)
        if found is None:
            continue
        key = (found.start(), -len(name), index)
        if best is None or key < best:
            best = key
    return None if best is None else best[2]


def parse_verdict(raw: str, categories: Sequence[str], edge: Edge = (-1, -1)) -> EdgeVerdict:
    """Decide same/different from the first true/false word; on true, look for a category after it."""
    match = _BOOL_RE.search(raw)
    if match is None:
        raise ParseFailure(f"no True/False in response {raw[:80]!r}")
    if match.group(1).lower() == "false":
        return EdgeVerdict(edge, False, None, raw)
    category = find_category(raw[match.end():], categories)
    return EdgeVerdict(edge, True, category, raw)


def parse_category(raw: str, categories: Sequence[str]) -> int:
    category = find_category(raw, categories)
    if category is None:
        raise ParseFailure(f"no category name in response {raw[:80]!r}")
    return category


# Backends -------------------------------------------------------------------------

def _unit_hash(*parts) -> float:
    """Deterministic uniform number in [0, 1) from the given key parts."""
    digest = hashlib.blake2b(repr(parts).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") / 2.0 ** 64


def oracle_answer(g: TextGraph, i: int, j: int, cfg: OracleConfig) -> str:
    """Label-based answer; noise is keyed on (min, max, seed) so it is order-independent."""
    lo, hi = canonical_edge(i, j)
    c_lo, c_hi = g.nodes[lo].label, g.nodes[hi].label
    same = c_lo == c_hi
    if _unit_hash("flip", lo, hi, cfg.seed) < cfg.flip_rate:
        same = not same
    if not same:
        return "False"
    if not cfg.with_category:
        return "True"
    # A flipped "True" on a cross-class pair reports the lower node's class.
    category = c_lo
    if g.num_classes > 1 and _unit_hash("category", lo, hi, cfg.seed) < cfg.category_error_rate:
        offset = 1 + int(_unit_hash("wrong", lo, hi, cfg.seed) * (g.num_classes - 1))
        category = (category + offset) % g.num_classes
    return format_answer(True, g.category_names[category])


def oracle_node_answer(g: TextGraph, i: int, cfg: OracleConfig) -> str:
    category = g.nodes[i].label
    if g.num_classes > 1 and _unit_hash("node-category", i, cfg.seed) < cfg.category_error_rate:
        offset = 1 + int(_unit_hash("node-wrong", i, cfg.seed) * (g.num_classes - 1))
        category = (category + offset) % g.num_classes
    return g.category_names[category]


@dataclass
class OracleBackend:
    cfg: OracleConfig = field(default_factory=OracleConfig)

    def answer_pair(self, g: TextGraph, i: int, j: int, prompt: str) -> str:
        return oracle_answer(g, i, j, self.cfg)

    def answer_node(self, g: TextGraph, i: int, prompt: str) -> str:
        return oracle_node_answer(g, i, self.cfg)


@dataclass
class ConstantBackend:
    """Always returns the same text; handy for degenerate-case checks."""

    text: str

    def answer_pair(self, g, i, j, prompt):
        return self.text

    def answer_node(self, g, i, prompt):
        return self.text


@dataclass
class HttpBackend:
    """Completion-style service: POST {"prompt", "max_tokens"} -> {"text"}."""

    url: str
    max_tokens: int = 64
    timeout: float = 60.0
    token: Optional[str] = None
    transport: Optional[httpx.BaseTransport] = field(default=None, repr=False)

    @classmethod
    def from_env(cls, **kwargs) -> "HttpBackend":
        url = os.environ.get(URL_ENV)
        if not url:
            raise BackendError(f"set {URL_ENV} to the completion service URL")
        return cls(url=url, token=os.environ.get(TOKEN_ENV), **kwargs)

    def __post_init__(self):
        headers = {"Authorization": f"Bearer {self.token}"} if self.token else {}
        self._client = httpx.Client(timeout=self.timeout, transport=self.transport, headers=headers)

    def close(self) -> None:
        self._client.close()

    def complete(self, prompt: str) -> str:
        try:
            resp = self._client.post(self.url, json={"prompt": prompt, "max_tokens": self.max_tokens})
            resp.raise_for_status()
            text = resp.json()["text"]
        except (httpx.HTTPError, KeyError, TypeError, json.JSONDecodeError) as exc:
            raise BackendError(f"completion request to {self.url} failed: {exc}") from exc
        if not isinstance(text, str):
            raise BackendError(f"completion response 'text' is not a string: {text!r}")
        return text

    def answer_pair(self, g, i, j, prompt):
        return self.complete(prompt)

    def answer_node(self, g, i, prompt):
        return self.complete(prompt)


# Querying ---------------------------------------------------------------------------

def _ask_pair(g: TextGraph, edge: Edge, backend, retries: int, with_category: bool) -> EdgeVerdict:
    i, j = canonical_edge(*edge)
    prompt = build_pair_prompt(g, i, j, with_category).prompt_text
    backend_failures = 0
    raw = ""
    attempt = 0
    while True:
        try:
            raw = backend.answer_pair(g, i, j, prompt)
        except BackendError as exc:
            backend_failures += 1
            if backend_failures > retries:
                raise
            log.warning("backend error on edge (%d, %d), retrying: %s", i, j, exc)
            continue
        try:
            return parse_verdict(raw, g.category_names, (i, j))
        except ParseFailure:
            attempt += 1
            if attempt > retries:
                # Unparseable answers reject the edge.
                return EdgeVerdict((i, j), False, None, raw, parse_failed=True)


def query_verdicts(g: TextGraph, edges: Sequence[Edge], backend, parallelism: int = 1,
                   retries: int = 2, with_category: bool = True) -> list[EdgeVerdict]:
    """One verdict per edge, in input order, each edge asked in (min, max) orientation.

    Parse failures are retried ``retries`` times and then recorded as rejections
    (``parse_failed=True``). Backend errors are retried likewise; when they
    persist the whole batch aborts with :class:`BackendUnavailable`.
    """
    for i, j in edges:
        if not (0 <= i < g.n and 0 <= j < g.n) or i == j:
            raise ValueError(f"invalid edge ({i}, {j})")

    def one(edge):
        return _ask_pair(g, edge, backend, retries, with_category)

    results: list[EdgeVerdict] = []
    try:
        if parallelism > 1:
            with ThreadPoolExecutor(max_workers=parallelism) as pool:
                for verdict in pool.map(one, edges):
                    results.append(verdict)
        else:
            for edge in edges:
                results.append(one(edge))
    except BackendError as exc:
        raise BackendUnavailable(str(exc), len(results), len(edges)) from exc
    failed = sum(v.parse_failed for v in results)
    if failed:
        log.warning("%d of %d responses could not be parsed and were treated as 'False'", failed, len(results))
    return results


def classify_node_direct(g: TextGraph, i: int, backend, retries: int = 2) -> Optional[int]:
    """Ask the backend for a single node's category; ``None`` when no answer parses."""
    prompt = build_node_prompt(g, i)
    failures = 0
    for _ in range(retries + 1):
        try:
            raw = backend.answer_node(g, i, prompt)
        except BackendError as exc:
            failures += 1
            if failures > retries:
                raise BackendUnavailable(str(exc), 0, 1) from exc
            continue
        try:
            return parse_category(raw, g.category_names)
        except ParseFailure:
            continue
    return None


def direct_accuracy(g: TextGraph, nodes: Sequence[int], backend, retries: int = 2) -> float:
    """Accuracy of backend-only node classification; unparseable answers count as wrong."""
    if len(nodes) == 0:
        raise ValueError("need at least one node")
    correct = 0
    for done, i in enumerate(nodes):
        try:
            pred = classify_node_direct(g, int(i), backend, retries)
        except BackendUnavailable as exc:
            raise BackendUnavailable("direct classification aborted", done, len(nodes)) from exc
        correct += int(pred is not None and pred == g.nodes[int(i)].label)
    return correct / len(nodes)


# Instruction export ----------------------------------------------------------------

def instruction_record(g: TextGraph, i: int, j: int, with_category: bool = True) -> dict:
    prompt = build_pair_prompt(g, i, j, with_category).prompt_text
    c_i, c_j = g.nodes[i].label, g.nodes[j].label
    answer = format_answer(c_i == c_j, g.category_names[c_i], with_category)
    return {"instruction": prompt, "output": answer}


def export_instruction_dataset(g: TextGraph, pairs, path: str | Path, with_category: bool = True) -> int:
    """Write one JSON line per sampled pair; returns the number of lines written."""
    path = Path(path)
    count = 0
    with open(path, "w") as fh:
        for p in pairs:
            if p.y not in (0, 1):
                raise ValueError(f"pair ({p.i}, {p.j}) is unlabeled")
            fh.write(json.dumps(instruction_record(g, p.i, p.j, with_category)) + "\n")
            count += 1
    return count


ANSWER_RE = re.compile(r"^(?:False|True(?:, (?P<category>.+))?)$")


def parse_instruction_output(output: str, categories: Sequence[str], with_category: bool = True) -> tuple[bool, Optional[int]]:
    """Strict check of an exported answer against ``True, <category>`` / ``False``."""
    match = ANSWER_RE.match(output)
    if match is None:
        raise ParseFailure(f"answer {output!r} does not follow 'True, <category>' or 'False'")
    if output == "False":
        return False, None
    name = match.group("category")
    if with_category:
        if name not in categories:
            raise ParseFailure(f"answer {output!r} names an unknown category")
        return True, list(categories).index(name)
    if name is not None:
        raise ParseFailure(f"answer {output!r} should be bare True")
    return True, None
