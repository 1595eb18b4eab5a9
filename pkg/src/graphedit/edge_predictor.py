"""Pair sampling, label-consistency targets, the pair scorer and top-k candidate edges.

The scorer is a one-hidden-layer network on the ordered concatenation of two
node embeddings::

    p(i, j) = sigmoid(w2 . relu([h_i, h_j] W1 + b1) + b2)

Candidate generation uses the symmetrized score (p(i, j) + p(j, i)) / 2.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .embeddings import EmbeddingMatrix
from .graph import Edge, canonical_edge
from .optim import Adam, glorot_uniform

MODEL_FORMAT_VERSION = 1


class EdgePredictorError(ValueError):
    pass


@dataclass(frozen=True)
class PairSample:
    i: int
    j: int
    y: int = -1
    c_i: int = -1
    c_j: int = -1

    @property
    def labeled(self) -> bool:
        return self.y in (0, 1)


@dataclass
class EdgePredictorConfig:
    hidden: int = 128
    lr: float = 1e-3
    epochs: int = 30
    batch: int = 256
    seed: int = 0
    pos_weight: Optional[float] = None
    score_chunk: int = 64


@dataclass(eq=False)
class EdgePredictorModel:
    W1: np.ndarray  # (2d, h)
    b1: np.ndarray  # (h,)
    w2: np.ndarray  # (h,)
    b2: np.ndarray  # (1,)

    @property
    def d(self) -> int:
        return self.W1.shape[0] // 2

    @property
    def hidden(self) -> int:
        return self.W1.shape[1]

    @classmethod
    def zeros(cls, d: int, hidden: int) -> "EdgePredictorModel":
        return cls(np.zeros((2 * d, hidden)), np.zeros(hidden), np.zeros(hidden), np.zeros(1))

    @classmethod
    def init(cls, d: int, hidden: int, seed: int) -> "EdgePredictorModel":
        rng = np.random.default_rng(seed)
        return cls(glorot_uniform(rng, 2 * d, hidden), np.zeros(hidden),
                   glorot_uniform(rng, hidden, 1)[:, 0], np.zeros(1))

    def params(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def to_json(self) -> str:
        body = {"format": "graphedit-edge-predictor", "version": MODEL_FORMAT_VERSION}
        body.update({k: v.tolist() for k, v in self.params().items()})
        return json.dumps(body)

    @classmethod
    def from_json(cls, text: str) -> "EdgePredictorModel":
        body = json.loads(text)
        if body.get("version") != MODEL_FORMAT_VERSION:
            raise EdgePredictorError(f"unsupported model version {body.get('version')!r}")
        return cls(*(np.asarray(body[k], dtype=np.float64) for k in ("W1", "b1", "w2", "b2")))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "EdgePredictorModel":
        return cls.from_json(Path(path).read_text())


@dataclass
class EdgeTrainReport:
    loss_curve: list[float]
    final_loss: float
    train_accuracy: float


@dataclass
class CandidateSet:
    neighbors: list[list[tuple[int, float]]]
    k: int

    def edges(self) -> set[Edge]:
        return {canonical_edge(i, j) for i, row in enumerate(self.neighbors) for j, _ in row}

    def to_tsv(self) -> str:
        lines = [f"# k={self.k}"]
        for i, row in enumerate(self.neighbors):
            lines.extend(f"{i}\t{j}\t{score!r}" for j, score in row)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_tsv(cls, text: str, n: int) -> "CandidateSet":
        k = 0
        neighbors: list[list[tuple[int, float]]] = [[] for _ in range(n)]
        for line in text.splitlines():
            if line.startswith("# k="):
                k = int(line[4:])
                continue
            if not line.strip() or line.startswith("#"):
                continue
            i, j, score = line.split("\t")
            neighbors[int(i)].append((int(j), float(score)))
        return cls(neighbors, k)


# Sampling and labels ----------------------------------------------------------

def sample_pairs(train_nodes: Iterable[int], m: int, seed: int) -> list[PairSample]:
    """Draw ``m`` ordered pairs uniformly from train x train minus the diagonal, with replacement."""
    nodes = np.asarray(sorted(set(int(v) for v in train_nodes)), dtype=np.int64)
    if nodes.size < 2:
        raise EdgePredictorError(f"need at least 2 training nodes, got {nodes.size}")
    if m < 1:
        raise EdgePredictorError(f"pair count must be >= 1, got {m}")
    rng = np.random.default_rng(seed)
    first = rng.integers(0, nodes.size, size=m)
    # Uniform over the other n-1 nodes: shift offsets past the first index.
    second = rng.integers(0, nodes.size - 1, size=m)
    second = second + (second >= first)
    return [PairSample(int(nodes[a]), int(nodes[b])) for a, b in zip(first, second)]


def label_pairs(pairs: Sequence[PairSample], labels) -> list[PairSample]:
    """y = 1 when both endpoints share a class, else 0."""
    labels = np.asarray(labels)
    out = []
    for p in pairs:
        if not (0 <= p.i < labels.size and 0 <= p.j < labels.size):
            raise EdgePredictorError(f"pair ({p.i}, {p.j}) references a node without a label")
        c_i, c_j = int(labels[p.i]), int(labels[p.j])
        if c_i < 0 or c_j < 0:
            raise EdgePredictorError(f"pair ({p.i}, {p.j}) references a node without a label")
        out.append(PairSample(p.i, p.j, int(c_i == c_j), c_i, c_j))
    return out


def pairs_to_tsv(pairs: Sequence[PairSample]) -> str:
    lines = ["# i\tj\ty\tc_i\tc_j"]
    lines.extend(f"{p.i}\t{p.j}\t{p.y}\t{p.c_i}\t{p.c_j}" for p in pairs)
    return "\n".join(lines) + "\n"


def pairs_from_tsv(text: str) -> list[PairSample]:
    out = []
    for line in text.splitlines():
        if line.strip() and not line.startswith("#"):
            out.append(PairSample(*(int(x) for x in line.split("\t"))))
    return out


# Model ------------------------------------------------------------------------

def _sigmoid(s: np.ndarray) -> np.ndarray:
    out = np.empty_like(s)
    pos = s >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-s[pos]))
    e = np.exp(s[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _forward(model: EdgePredictorModel, x: np.ndarray):
    z = x @ model.W1 + model.b1
    a = np.maximum(z, 0.0)
    s = a @ model.w2 + model.b2[0]
    return z, a, s


def predict_edge(model: EdgePredictorModel, h_i, h_j) -> float:
    h_i = np.asarray(h_i, dtype=np.float64)
    h_j = np.asarray(h_j, dtype=np.float64)
    if h_i.shape != (model.d,) or h_j.shape != (model.d,):
        raise EdgePredictorError(
            f"expected vectors of dimension {model.d}, got {h_i.shape} and {h_j.shape}"
        )
    _, _, s = _forward(model, np.concatenate([h_i, h_j])[None, :])
    return float(_sigmoid(s)[0])


def predict_pairs(model: EdgePredictorModel, emb: np.ndarray, pairs: Sequence[PairSample]) -> np.ndarray:
    idx = np.asarray([(p.i, p.j) for p in pairs], dtype=np.int64).reshape(-1, 2)
    x = np.concatenate([emb[idx[:, 0]], emb[idx[:, 1]]], axis=1)
    return _sigmoid(_forward(model, x)[2])


def bce_loss_and_grads(model: EdgePredictorModel, x: np.ndarray, y: np.ndarray,
                       weights: Optional[np.ndarray] = None) -> tuple[float, dict[str, np.ndarray]]:
    """Mean (optionally weighted) binary cross-entropy and its gradients.

    Uses the logit form softplus(s) - y*s, which equals
    -[y log p + (1-y) log(1-p)] without overflow.
    """
    n = x.shape[0]
    w = np.ones(n) if weights is None else weights
    z, a, s = _forward(model, x)
    loss = float(np.sum(w * (np.logaddexp(0.0, s) - y * s)) / n)
    ds = w * (_sigmoid(s) - y) / n
    dz = np.outer(ds, model.w2) * (z > 0)
    grads = {
        "W1": x.T @ dz,
        "b1": dz.sum(axis=0),
        "w2": a.T @ ds,
        "b2": np.array([ds.sum()]),
    }
    return loss, grads


def _design(emb: np.ndarray, samples: Sequence[PairSample]) -> tuple[np.ndarray, np.ndarray]:
    idx = np.asarray([(s.i, s.j) for s in samples], dtype=np.int64)
    y = np.asarray([s.y for s in samples], dtype=np.float64)
    return np.concatenate([emb[idx[:, 0]], emb[idx[:, 1]]], axis=1), y


def train_edge_predictor(emb: EmbeddingMatrix | np.ndarray, samples: Sequence[PairSample],
                         cfg: EdgePredictorConfig = EdgePredictorConfig(),
                         init: Optional[EdgePredictorModel] = None,
                         ) -> tuple[EdgePredictorModel, EdgeTrainReport]:
    """Fit the pair scorer with Adam on mini-batches (``cfg.batch <= 0`` means full batch).

    ``loss_curve`` records the full-data loss after every epoch.
    """
    vectors = emb.vectors if isinstance(emb, EmbeddingMatrix) else np.asarray(emb, dtype=np.float64)
    if any(not s.labeled for s in samples):
        raise EdgePredictorError("all samples must be labeled before training")
    x, y = _design(vectors, samples)
    positives = int(y.sum())
    if positives == 0 or positives == len(y):
        raise EdgePredictorError(
            f"samples contain a single class ({positives} positives of {len(y)}); loss is degenerate"
        )
    weights = None
    if cfg.pos_weight is not None:
        weights = np.where(y == 1, cfg.pos_weight, 1.0)

    model = init if init is not None else EdgePredictorModel.init(vectors.shape[1], cfg.hidden, cfg.seed)
    opt = Adam(model.params(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed + 1)
    n = len(y)
    batch = n if cfg.batch <= 0 else min(cfg.batch, n)
    curve = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n) if batch < n else np.arange(n)
        for start in range(0, n, batch):
            sel = order[start:start + batch]
            _, grads = bce_loss_and_grads(model, x[sel], y[sel], None if weights is None else weights[sel])
            opt.step(grads)
        loss, _ = bce_loss_and_grads(model, x, y, weights)
        if not np.isfinite(loss):
            raise EdgePredictorError("edge predictor training diverged (non-finite loss)")
        curve.append(loss)
    final = curve[-1] if curve else bce_loss_and_grads(model, x, y, weights)[0]
    accuracy = float(np.mean((_sigmoid(_forward(model, x)[2]) >= 0.5) == (y == 1)))
    return model, EdgeTrainReport(curve, final, accuracy)


# Candidates --------------------------------------------------------------------

def select_top_k(scores: np.ndarray, rows: np.ndarray, columns: np.ndarray, k: int) -> list[list[tuple[int, float]]]:
    """Pick the ``k`` best columns of each score row, skipping the row's own node.

    ``scores[r, c]`` scores node ``rows[r]`` against node ``columns[c]``;
    ``columns`` must be ascending so a stable sort breaks ties by lower id.
    """
    out = []
    for r, node in enumerate(rows):
        row = scores[r]
        keep = columns != node
        cols, vals = columns[keep], row[keep]
        order = np.argsort(-vals, kind="stable")[:k]
        out.append([(int(cols[o]), float(vals[o])) for o in order])
    return out


def symmetric_scores(model: EdgePredictorModel, vectors: np.ndarray, rows: np.ndarray,
                     columns: np.ndarray) -> np.ndarray:
    """(p(i, j) + p(j, i)) / 2 for every i in ``rows`` and j in ``columns``."""
    d = model.d
    left = vectors @ model.W1[:d]   # contribution as the first node
    right = vectors @ model.W1[d:]  # contribution as the second node
    li, ri = left[rows], right[rows]
    lc, rc = left[columns], right[columns]
    forward = np.maximum(li[:, None, :] + rc[None, :, :] + model.b1, 0.0) @ model.w2 + model.b2[0]
    backward = np.maximum(lc[None, :, :] + ri[:, None, :] + model.b1, 0.0) @ model.w2 + model.b2[0]
    return 0.5 * (_sigmoid(forward) + _sigmoid(backward))


def top_k_candidates(model: EdgePredictorModel, emb: EmbeddingMatrix | np.ndarray, k: int,
                     restrict_to: Optional[Iterable[int]] = None, chunk: int = 64) -> CandidateSet:
    """Top-k partners of every node under the symmetrized score.

    Existing graph edges are not excluded. ``restrict_to`` limits the partner
    pool; ties go to the lower node id.
    """
    vectors = emb.vectors if isinstance(emb, EmbeddingMatrix) else np.asarray(emb, dtype=np.float64)
    n = vectors.shape[0]
    if vectors.shape[1] != model.d:
        raise EdgePredictorError(f"embedding dimension {vectors.shape[1]} != model dimension {model.d}")
    if not 1 <= k <= n - 1:
        raise EdgePredictorError(f"k must lie in [1, {n - 1}], got {k}")
    columns = np.arange(n) if restrict_to is None else np.asarray(sorted(set(int(v) for v in restrict_to)))
    # Bound the (rows x columns x hidden) work array to a few million floats.
    chunk = max(1, min(chunk, 4_000_000 // max(1, columns.size * model.hidden)))
    neighbors: list[list[tuple[int, float]]] = []
    for start in range(0, n, chunk):
        rows = np.arange(start, min(start + chunk, n))
        scores = symmetric_scores(model, vectors, rows, columns)
        neighbors.extend(select_top_k(scores, rows, columns, k))
    return CandidateSet(neighbors, k)
