"""Document corpus ingestion, embedding, and exact top-k cosine retrieval.

Corpora are desk-scale, so retrieval is an exact dense cosine scan; no
approximate index is involved. The embedding provider is abstract: a
remote OpenAI-compatible embeddings endpoint for online runs, and a
seeded hash-based pseudo-embedder (fixed dimension 64) whose vectors are
stable across processes, which keeps offline tests and persisted stores
byte-identical run over run.

A persisted store is a directory of three files:

    metadata.json     versioned header + description/source/doc_count
    documents.jsonl   one document record per line, ingestion order
    embeddings.npy    float64 matrix, row i embeds document i

After ingestion a store is immutable; any number of readers may query
concurrently.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np
import requests

from .gateway import TransportError, retry_call

logger = logging.getLogger(__name__)

STORE_FORMAT_VERSION = 1
HASH_EMBEDDER_DIM = 64
DEFAULT_TOP_K = 5


class KnowledgeError(ValueError):
    """Corpus or store content violates its contract."""


class CorpusError(KnowledgeError):
    """A corpus line failed to parse or violates document invariants."""


class DuplicateDocError(CorpusError):
    """Two corpus lines share a doc_id."""

    def __init__(self, doc_id: str):
        super().__init__(f"duplicate doc_id: {doc_id!r}")
        self.doc_id = doc_id


class EmptyStoreError(KnowledgeError):
    """Query issued against a store with no documents."""


class EmbedderError(RuntimeError):
    """Embedding provider failed after retries."""


@dataclass(frozen=True)
class KnowledgeDoc:
    """One embedded document: a section of a disease article."""

    doc_id: str
    text: str
    disease_code: str = ""
    section: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.doc_id:
            raise CorpusError("doc_id must be nonempty")
        if not self.text:
            raise CorpusError(f"document {self.doc_id!r} has empty text")

    def to_dict(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "disease_code": self.disease_code,
            "section": self.section,
            "text": self.text,
            "metadata": self.metadata,
        }


@dataclass(frozen=True)
class StoreMetadata:
    description: str
    source: str
    doc_count: int
    dim: int
    similarity: str = "cosine"

    def __post_init__(self) -> None:
        if not self.description:
            raise KnowledgeError("store description must be nonempty")

    def to_dict(self) -> dict:
        return {
            "version": STORE_FORMAT_VERSION,
            "description": self.description,
            "source": self.source,
            "doc_count": self.doc_count,
            "dim": self.dim,
            "similarity": self.similarity,
        }

    def summary_text(self) -> str:
        """Single-line form used as the {Meta-data} prompt binding."""
        return (
            f"description: {self.description}; source: {self.source}; "
            f"documents: {self.doc_count}; similarity: {self.similarity}"
        )


@dataclass(frozen=True)
class RetrievalResult:
    doc: KnowledgeDoc
    score: float
    rank: int


class EmbeddingProvider(Protocol):
    provider_id: str
    dim: int

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        """Row i embeds texts[i]; shape (len(texts), dim)."""
        ...


class HashEmbedder:
    """Deterministic pseudo-embedder: text bytes seed a PCG64 stream.

    Not semantically meaningful; exists so offline runs and snapshot
    tests have stable, process-independent vectors.
    """

    dim = HASH_EMBEDDER_DIM

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.provider_id = f"hash:{seed}"

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        out = np.empty((len(texts), self.dim), dtype=np.float64)
        for i, text in enumerate(texts):
            digest = hashlib.sha256(f"{self.seed}:{text}".encode("utf-8")).digest()
            rng = np.random.Generator(
                np.random.PCG64(int.from_bytes(digest[:8], "little"))
            )
            out[i] = rng.standard_normal(self.dim)
        return out


class RemoteEmbedder:
    """OpenAI-compatible /embeddings endpoint."""

    def __init__(
        self,
        base_url: str,
        model: str,
        dim: int,
        api_key_env: str = "OPENAI_API_KEY",
        timeout_seconds: float = 120.0,
        session: Optional[requests.Session] = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.dim = dim
        self.api_key_env = api_key_env
        self.timeout_seconds = timeout_seconds
        self.provider_id = f"remote:{model}"
        self._session = session or requests.Session()

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        def _call():
            api_key = os.environ.get(self.api_key_env, "")
            headers = {"Content-Type": "application/json"}
            if api_key:
                headers["Authorization"] = f"Bearer {api_key}"
            try:
                resp = self._session.post(
                    f"{self.base_url}/embeddings",
                    headers=headers,
                    json={"model": self.model, "input": list(texts)},
                    timeout=self.timeout_seconds,
                )
            except requests.RequestException as exc:
                raise TransportError(f"transport failure: {exc}") from exc
            if resp.status_code in (429,) or resp.status_code >= 500:
                raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            if resp.status_code >= 400:
                raise EmbedderError(f"HTTP {resp.status_code}: {resp.text[:500]}")
            return resp.json()

        try:
            data = retry_call(_call)
        except TransportError as exc:
            raise EmbedderError(str(exc)) from exc
        rows = sorted(data["data"], key=lambda item: item["index"])
        matrix = np.asarray([row["embedding"] for row in rows], dtype=np.float64)
        if matrix.shape != (len(texts), self.dim):
            raise EmbedderError(
                f"expected embeddings of shape {(len(texts), self.dim)}, "
                f"got {matrix.shape}"
            )
        return matrix


def load_corpus(path: str | Path) -> list[KnowledgeDoc]:
    """Read a corpus file: one document JSON record per line."""
    docs: list[KnowledgeDoc] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            if not isinstance(record, dict) or "doc_id" not in record:
                raise CorpusError(f"{path}:{lineno}: expected a document record")
            doc = KnowledgeDoc(
                doc_id=str(record["doc_id"]),
                text=str(record.get("text", "")),
                disease_code=str(record.get("disease_code", "") or ""),
                section=str(record.get("section", "") or ""),
                metadata=dict(record.get("metadata", {}) or {}),
            )
            if doc.doc_id in seen:
                raise DuplicateDocError(doc.doc_id)
            seen.add(doc.doc_id)
            docs.append(doc)
    return docs


def _cosine_scores(query: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    qn = float(np.linalg.norm(query))
    dn = np.linalg.norm(matrix, axis=1)
    safe = (dn > 0.0) & (qn > 0.0)
    scores = np.zeros(matrix.shape[0], dtype=np.float64)
    scores[safe] = (matrix[safe] @ query) / (dn[safe] * qn)
    return scores


class VectorStore:
    """Immutable embedded-document store with exact cosine top-k search."""

    METADATA_FILE = "metadata.json"
    DOCUMENTS_FILE = "documents.jsonl"
    EMBEDDINGS_FILE = "embeddings.npy"

    def __init__(
        self,
        docs: Sequence[KnowledgeDoc],
        embeddings: np.ndarray,
        metadata: StoreMetadata,
    ):
        if embeddings.shape[0] != len(docs):
            raise KnowledgeError("embedding rows do not match document count")
        self.docs = tuple(docs)
        self.embeddings = embeddings
        self.embeddings.setflags(write=False)
        self.metadata = metadata

    def __len__(self) -> int:
        return len(self.docs)

    @classmethod
    def ingest(
        cls,
        corpus_path: str | Path,
        embedder: EmbeddingProvider,
        out_dir: str | Path,
        description: str = "disease knowledge corpus",
        source: str = "local corpus file",
    ) -> "VectorStore":
        """Embed every corpus document exactly once and persist the store."""
        docs = load_corpus(corpus_path)
        if docs:
            embeddings = embedder.embed([doc.text for doc in docs])
        else:
            embeddings = np.zeros((0, embedder.dim), dtype=np.float64)
        metadata = StoreMetadata(
            description=description,
            source=source,
            doc_count=len(docs),
            dim=embedder.dim,
        )
        store = cls(docs=docs, embeddings=embeddings, metadata=metadata)
        store.save(out_dir)
        return store

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / self.METADATA_FILE, "w", encoding="utf-8") as fh:
            fh.write(
                json.dumps(self.metadata.to_dict(), sort_keys=True, separators=(",", ":"))
                + "\n"
            )
        with open(out / self.DOCUMENTS_FILE, "w", encoding="utf-8") as fh:
            for doc in self.docs:
                fh.write(
                    json.dumps(doc.to_dict(), sort_keys=True, separators=(",", ":"))
                    + "\n"
                )
        np.save(out / self.EMBEDDINGS_FILE, self.embeddings)

    @classmethod
    def load(cls, store_dir: str | Path) -> "VectorStore":
        store = Path(store_dir)
        with open(store / cls.METADATA_FILE, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        if raw.get("version") != STORE_FORMAT_VERSION:
            raise KnowledgeError(
                f"unsupported store version: {raw.get('version')!r}"
            )
        metadata = StoreMetadata(
            description=raw["description"],
            source=raw["source"],
            doc_count=int(raw["doc_count"]),
            dim=int(raw["dim"]),
            similarity=raw.get("similarity", "cosine"),
        )
        docs = load_corpus(store / cls.DOCUMENTS_FILE)
        embeddings = np.load(store / cls.EMBEDDINGS_FILE)
        if metadata.doc_count != len(docs):
            raise KnowledgeError("metadata doc_count disagrees with documents file")
        return cls(docs=docs, embeddings=embeddings, metadata=metadata)

    def query_topk(
        self,
        query_text: str,
        k: int,
        embedder: EmbeddingProvider,
    ) -> list[RetrievalResult]:
        """The k documents most cosine-similar to the embedded query.

        Orders by score descending, ties by ascending doc_id; returns
        fewer than k results only when the store is smaller than k.
        """
        if k < 1:
            raise ValueError(f"k must be >= 1: {k}")
        if not self.docs:
            raise EmptyStoreError("store holds no documents")
        query = embedder.embed([query_text])[0]
        scores = _cosine_scores(query, self.embeddings)
        order = sorted(
            range(len(self.docs)), key=lambda i: (-scores[i], self.docs[i].doc_id)
        )
        return [
            RetrievalResult(doc=self.docs[i], score=float(scores[i]), rank=rank)
            for rank, i in enumerate(order[:k], start=1)
        ]
