"""Node text serialization and embedding providers.

Two providers share one interface: a remote OpenAI-compatible embeddings
endpoint, and a deterministic local provider (seeded token-hash vectors)
so CI and tests run offline with reproducible geometry.
"""

from __future__ import annotations

import hashlib
import os
import sqlite3
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .errors import ProviderError
from .graph import ConceptNode
from .rrf import Cui


@dataclass(frozen=True)
class NodeText:
    cui: Cui
    text: str


def node_text(node: ConceptNode) -> NodeText:
    """Canonical embedding text for one node; a pure function of the node."""
    synonyms = "; ".join(sorted(node.synonyms))
    types = "; ".join(sorted(node.semantic_types))
    sources = "; ".join(sorted(node.source_vocabularies))
    definition = node.definition if node.definition else "none"
    text = (
        f"Name: {node.preferred_name}\n"
        f"Synonyms: {synonyms}\n"
        f"Definition: {definition}\n"
        f"Semantic types: {types}\n"
        f"Sources: {sources}"
    )
    return NodeText(cui=node.cui, text=text)


class EmbeddingProvider(Protocol):
    name: str
    dimension: int
    kind: str

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray: ...


class DeterministicLocalProvider:
    """Offline provider: hash each whitespace token to a seeded unit vector,
    average, renormalize.  Identical text always yields identical vectors."""

    kind = "deterministic-local"

    def __init__(self, dimension: int = 256, seed: int = 0):
        if dimension < 1:
            raise ValueError("dimension must be positive")
        self.dimension = dimension
        self.seed = seed
        self.name = f"local-hash-d{dimension}-s{seed}"
        self._token_cache: dict[str, np.ndarray] = {}

    def _token_vector(self, token: str) -> np.ndarray:
        vec = self._token_cache.get(token)
        if vec is None:
            digest = hashlib.blake2b(
                f"{self.seed}:{token}".encode("utf-8"), digest_size=8
            ).digest()
            rng = np.random.default_rng(int.from_bytes(digest, "little"))
            vec = rng.standard_normal(self.dimension)
            vec /= np.linalg.norm(vec)
            self._token_cache[token] = vec
        return vec

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dimension), dtype=np.float32)
        for i, text in enumerate(texts):
            tokens = text.split()
            if not tokens:
                tokens = ["<empty>"]
            acc = np.zeros(self.dimension, dtype=np.float64)
            for token in tokens:
                acc += self._token_vector(token)
            acc /= len(tokens)
            norm = np.linalg.norm(acc)
            if norm > 0:
                acc /= norm
            out[i] = acc.astype(np.float32)
        return out


class RemoteEmbeddingProvider:
    """OpenAI-compatible /embeddings client; bearer token from environment."""

    kind = "remote-api"

    def __init__(
        self,
        model: str,
        dimension: int,
        api_base: str = "https://api.openai.com/v1",
        api_key_env: str = "OPENAI_API_KEY",
        timeout: float = 60.0,
    ):
        self.model = model
        self.dimension = dimension
        self.api_base = api_base.rstrip("/")
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.name = f"remote-{model}"

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray:
        import httpx

        api_key = os.environ.get(self.api_key_env)
        if not api_key:
            raise ProviderError(f"environment variable {self.api_key_env} is not set")
        response = httpx.post(
            f"{self.api_base}/embeddings",
            json={"model": self.model, "input": list(texts)},
            headers={"Authorization": f"Bearer {api_key}"},
            timeout=self.timeout,
        )
        if response.status_code != 200:
            raise ProviderError(
                f"embeddings endpoint returned {response.status_code}: {response.text[:200]}"
            )
        payload = response.json()
        rows = sorted(payload["data"], key=lambda item: item["index"])
        matrix = np.asarray([row["embedding"] for row in rows], dtype=np.float32)
        if matrix.shape != (len(texts), self.dimension):
            raise ProviderError(
                f"provider returned shape {matrix.shape}, expected ({len(texts)}, {self.dimension})"
            )
        return matrix


class EmbeddingCache:
    """Persistent vector cache keyed by (provider name, text hash)."""

    def __init__(self, path: str | Path):
        self._conn = sqlite3.connect(str(path))
        self._conn.execute(
            "CREATE TABLE IF NOT EXISTS embeddings ("
            " provider TEXT NOT NULL, text_hash TEXT NOT NULL,"
            " dim INTEGER NOT NULL, vec BLOB NOT NULL,"
            " PRIMARY KEY (provider, text_hash))"
        )

    @staticmethod
    def text_key(text: str) -> str:
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def get(self, provider: str, text: str) -> np.ndarray | None:
        row = self._conn.execute(
            "SELECT dim, vec FROM embeddings WHERE provider=? AND text_hash=?",
            (provider, self.text_key(text)),
        ).fetchone()
        if row is None:
            return None
        dim, blob = row
        return np.frombuffer(blob, dtype=np.float32).reshape(dim).copy()

    def put_many(self, provider: str, texts: Sequence[str], vectors: np.ndarray) -> None:
        rows = [
            (provider, self.text_key(text), vectors.shape[1], vectors[i].tobytes())
            for i, text in enumerate(texts)
        ]
        self._conn.executemany(
            "INSERT OR REPLACE INTO embeddings (provider, text_hash, dim, vec)"
            " VALUES (?, ?, ?, ?)",
            rows,
        )
        self._conn.commit()

    def close(self) -> None:
        self._conn.close()


def embed_all(
    texts: Sequence[NodeText],
    provider: EmbeddingProvider,
    batch: int = 64,
    cache: EmbeddingCache | None = None,
    max_retries: int = 4,
    backoff: float = 0.5,
    max_in_flight: int = 1,
) -> tuple[np.ndarray, list[Cui]]:
    """Embed every node text, order preserved; returns (matrix, cui_table).

    Batches are retried with bounded exponential backoff; a batch that still
    fails aborts with an error naming its index.  With `max_in_flight` > 1,
    remote batches run concurrently but assembly order stays deterministic.
    """
    if batch < 1:
        raise ValueError("batch must be >= 1")
    cuis = [t.cui for t in texts]
    if not texts:
        return np.zeros((0, provider.dimension), dtype=np.float32), []

    matrix = np.zeros((len(texts), provider.dimension), dtype=np.float32)
    pending: list[int] = []
    for i, item in enumerate(texts):
        cached = cache.get(provider.name, item.text) if cache else None
        if cached is not None:
            matrix[i] = cached
        else:
            pending.append(i)

    batches = [pending[i : i + batch] for i in range(0, len(pending), batch)]

    def run_batch(batch_no: int, indexes: list[int]) -> np.ndarray:
        chunk = [texts[i].text for i in indexes]
        delay = backoff
        for attempt in range(max_retries + 1):
            try:
                vectors = provider.embed_batch(chunk)
                if vectors.shape != (len(chunk), provider.dimension):
                    raise ProviderError(
                        f"batch {batch_no}: provider returned shape {vectors.shape}"
                    )
                return vectors
            except Exception as exc:  # noqa: BLE001 - retried, then surfaced
                if attempt == max_retries:
                    raise ProviderError(f"batch {batch_no} failed after retries: {exc}") from exc
                time.sleep(delay)
                delay = min(delay * 2, 30.0)
        raise AssertionError("unreachable")

    if max_in_flight > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
            futures = [
                pool.submit(run_batch, n, idxs) for n, idxs in enumerate(batches)
            ]
            results = [f.result() for f in futures]
    else:
        results = [run_batch(n, idxs) for n, idxs in enumerate(batches)]

    for indexes, vectors in zip(batches, results):
        for row, i in enumerate(indexes):
            matrix[i] = vectors[row]
        if cache:
            cache.put_many(provider.name, [texts[i].text for i in indexes], vectors)

    return matrix, cuis
