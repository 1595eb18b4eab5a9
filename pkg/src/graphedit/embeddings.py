"""Node text representations.

Two providers share one contract, ``embed(texts) -> (len(texts), d) array``:

* :class:`HashedBowProvider` - signed feature hashing of a bag of words, pure and
  deterministic.
* :class:`HttpEmbeddingProvider` - POSTs ``{"texts": [...]}`` to a service that
  answers ``{"vectors": [[...], ...]}``.
"""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import httpx
import numpy as np

from .graph import TextGraph, tokenize

log = logging.getLogger(__name__)


class EmbeddingError(RuntimeError):
    def __init__(self, message: str, node_id: int | None = None):
        super().__init__(message)
        self.node_id = node_id


class EmbeddingProvider(Protocol):
    provider_id: str

    def embed(self, texts: Sequence[str]) -> np.ndarray: ...


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    vectors: np.ndarray
    provider_id: str

    @property
    def d(self) -> int:
        return self.vectors.shape[1]

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    def save(self, path) -> None:
        # Write through a handle so numpy does not append its own suffix.
        with open(path, "wb") as fh:
            np.savez(fh, vectors=self.vectors, provider_id=np.array(self.provider_id))

    @classmethod
    def load(cls, path) -> "EmbeddingMatrix":
        with np.load(path) as data:
            return cls(data["vectors"], str(data["provider_id"]))


def _token_hash(token: str, seed: int) -> int:
    digest = hashlib.blake2b(token.encode(), digest_size=8, key=seed.to_bytes(8, "little", signed=True))
    return int.from_bytes(digest.digest(), "little")


def _normalize_rows(vectors: np.ndarray) -> np.ndarray:
    """L2-normalize rows; all-zero rows become the uniform unit vector."""
    out = np.array(vectors, dtype=np.float64)
    norms = np.linalg.norm(out, axis=1)
    zero = norms == 0
    out[zero] = 1.0
    norms[zero] = np.sqrt(out.shape[1])
    return out / norms[:, None]


def hashed_counts(text: str, d: int, seed: int = 0) -> np.ndarray:
    """Unnormalized signed bucket counts: bucket = h mod d, sign from the top hash bit."""
    vec = np.zeros(d, dtype=np.float64)
    for token in tokenize(text):
        h = _token_hash(token, seed)
        vec[h % d] += 1.0 if (h >> 63) == 0 else -1.0
    return vec


def hashed_bow_embed(text: str, d: int = 256, seed: int = 0) -> np.ndarray:
    if d < 16:
        raise ValueError(f"hashed embedding dimension must be >= 16, got {d}")
    return _normalize_rows(hashed_counts(text, d, seed)[None, :])[0]


@dataclass
class HashedBowProvider:
    d: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.d < 16:
            raise ValueError(f"hashed embedding dimension must be >= 16, got {self.d}")

    @property
    def provider_id(self) -> str:
        return f"hashed-bow-d{self.d}-s{self.seed}"

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.d))
        return np.stack([hashed_counts(t, self.d, self.seed) for t in texts])


@dataclass
class HttpEmbeddingProvider:
    url: str
    batch_size: int = 64
    retries: int = 3
    timeout: float = 30.0
    token: str | None = None
    transport: httpx.BaseTransport | None = field(default=None, repr=False)

    @property
    def provider_id(self) -> str:
        return "http"

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        headers = {"Authorization": f"Bearer {self.token}"} if self.token else {}
        last_error: Exception | None = None
        with httpx.Client(timeout=self.timeout, transport=self.transport, headers=headers) as client:
            for attempt in range(self.retries + 1):
                try:
                    resp = client.post(self.url, json={"texts": list(texts)})
                    resp.raise_for_status()
                    vectors = np.asarray(resp.json()["vectors"], dtype=np.float64)
                    if vectors.ndim != 2 or vectors.shape[0] != len(texts):
                        raise EmbeddingError(
                            f"service returned shape {vectors.shape} for {len(texts)} texts"
                        )
                    return vectors
                except (httpx.HTTPError, KeyError, ValueError) as exc:
                    last_error = exc
                    log.warning("embedding request failed (attempt %d): %s", attempt + 1, exc)
        raise EmbeddingError(f"embedding service failed after {self.retries + 1} attempts: {last_error}")


def embed_nodes(g: TextGraph, provider, parallelism: int = 1, batch_size: int | None = None) -> EmbeddingMatrix:
    """Embed ``title + abstract`` of every node; rows are returned L2-normalized in node order."""
    texts = [node.text for node in g.nodes]
    size = batch_size or getattr(provider, "batch_size", None) or max(len(texts), 1)
    batches = [(start, texts[start:start + size]) for start in range(0, len(texts), size)]

    def run(batch):
        start, chunk = batch
        try:
            return np.asarray(provider.embed(chunk), dtype=np.float64)
        except EmbeddingError as exc:
            raise EmbeddingError(f"embedding failed for node {start}: {exc}", node_id=start) from exc

    if parallelism > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            blocks = list(pool.map(run, batches))
    else:
        blocks = [run(b) for b in batches]

    dims = {b.shape[1] for b in blocks}
    if len(dims) > 1:
        raise EmbeddingError(f"inconsistent embedding dimensions across batches: {sorted(dims)}")
    vectors = np.concatenate(blocks) if blocks else np.zeros((0, 0))
    bad = np.flatnonzero(~np.isfinite(vectors).all(axis=1))
    if bad.size:
        raise EmbeddingError(f"non-finite embedding for node {int(bad[0])}", node_id=int(bad[0]))
    return EmbeddingMatrix(_normalize_rows(vectors), provider.provider_id)
