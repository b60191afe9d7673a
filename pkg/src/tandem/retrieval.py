"""Retrieval baseline: BM25 and embedding top-k selection feeding a single remote call."""

from __future__ import annotations

import hashlib
import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Protocol, Sequence

import requests

from .chunking import Chunk, chunk_by_chars
from .core import (
    ChatMessage,
    CostLedger,
    ProtocolResult,
    ROLE_REMOTE,
    TaskInstance,
    TERMINATED_FINAL_ANSWER,
    event,
    query_with_options,
)
from .llm import CompletionRequest, LMClient, ProtocolError

_TOKEN = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    """Lowercase alphanumeric tokens; everything else is a separator."""
    return _TOKEN.findall(text.lower())


@dataclass
class Bm25Index:
    """Okapi BM25 statistics over a chunk corpus; read-only after construction."""

    doc_count: int
    avg_len: float
    doc_freq: dict[str, int]
    term_counts: list[Counter[str]]
    doc_lens: list[int]
    k1: float
    b: float


def build_bm25(chunks: Sequence[str], k1: float = 1.5, b: float = 0.75) -> Bm25Index:
    term_counts = [Counter(tokenize(text)) for text in chunks]
    doc_lens = [sum(counts.values()) for counts in term_counts]
    doc_freq: Counter[str] = Counter()
    for counts in term_counts:
        doc_freq.update(counts.keys())
    total = sum(doc_lens)
    return Bm25Index(
        doc_count=len(chunks),
        avg_len=total / len(chunks) if chunks else 0.0,
        doc_freq=dict(doc_freq),
        term_counts=term_counts,
        doc_lens=doc_lens,
        k1=k1,
        b=b,
    )


def bm25_score(index: Bm25Index, query_terms: Sequence[str], chunk_index: int) -> float:
    """Okapi score with idf = ln((N - df + 0.5)/(df + 0.5) + 1)."""
    counts = index.term_counts[chunk_index]
    length = index.doc_lens[chunk_index]
    score = 0.0
    for term in query_terms:
        tf = counts.get(term, 0)
        if tf == 0:
            continue
        df = index.doc_freq[term]
        idf = math.log((index.doc_count - df + 0.5) / (df + 0.5) + 1.0)
        norm = index.k1 * (1.0 - index.b + index.b * length / index.avg_len)
        score += idf * tf * (index.k1 + 1.0) / (tf + norm)
    return score


def bm25_top_k(index: Bm25Index, query: str, k: int) -> list[tuple[int, float]]:
    """Top-k chunks by BM25 score, ties broken by ascending chunk index.

    Positive-score chunks come first; if fewer than k score positive, the result
    is padded with zero-score chunks (still in ascending index order). A query
    sharing no terms with the corpus returns an empty list.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    terms = tokenize(query)
    scored = [(i, bm25_score(index, terms, i)) for i in range(index.doc_count)]
    positive = [entry for entry in scored if entry[1] > 0.0]
    if not positive:
        return []
    positive.sort(key=lambda entry: (-entry[1], entry[0]))
    result = positive[:k]
    if len(result) < k:
        chosen = {i for i, _ in result}
        padding = [(i, 0.0) for i, score in scored if i not in chosen]
        result.extend(padding[: k - len(result)])
    return result


class EmbeddingProvider(Protocol):
    def embed(self, texts: Sequence[str]) -> list[list[float]]: ...


class HashingEmbedder:
    """Deterministic offline embedder: signed feature hashing of tokens, L2-normalized."""

    def __init__(self, dim: int = 64):
        self.dim = dim

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        return [self._embed_one(text) for text in texts]

    def _embed_one(self, text: str) -> list[float]:
        vec = [0.0] * self.dim
        for token in tokenize(text):
            digest = hashlib.sha256(token.encode("utf-8")).digest()
            bucket = int.from_bytes(digest[:4], "big") % self.dim
            sign = 1.0 if digest[4] & 1 else -1.0
            vec[bucket] += sign
        norm = math.sqrt(sum(v * v for v in vec))
        if norm == 0.0:
            return vec
        return [v / norm for v in vec]


class HttpEmbedder:
    """OpenAI-compatible embeddings endpoint adapter."""

    def __init__(
        self,
        base_url: str,
        model_name: str,
        api_key: str = "",
        timeout: float = 120.0,
        session: requests.Session | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.model_name = model_name
        self.api_key = api_key
        self.timeout = timeout
        self.session = session or requests.Session()

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        response = self.session.post(
            f"{self.base_url}/v1/embeddings",
            json={"model": self.model_name, "input": list(texts)},
            headers=headers,
            timeout=self.timeout,
        )
        if response.status_code != 200:
            raise ProtocolError(f"HTTP {response.status_code}: {response.text[:500]}")
        try:
            payload = response.json()
            return [list(map(float, item["embedding"])) for item in payload["data"]]
        except (ValueError, KeyError, TypeError) as exc:
            raise ProtocolError(f"malformed embeddings payload: {exc}") from exc


def cosine(u: Sequence[float], v: Sequence[float]) -> float:
    """Cosine similarity; zero-norm vectors compare as 0."""
    dot = sum(a * b for a, b in zip(u, v))
    nu = math.sqrt(sum(a * a for a in u))
    nv = math.sqrt(sum(b * b for b in v))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return dot / (nu * nv)


def embed_top_k(
    provider: EmbeddingProvider, chunks: Sequence[str], query: str, k: int
) -> list[tuple[int, float]]:
    """Top-k chunks by cosine similarity, ties broken by ascending chunk index."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not chunks:
        return []
    vectors = provider.embed(list(chunks) + [query])
    query_vec = vectors[-1]
    scored = [(i, cosine(vec, query_vec)) for i, vec in enumerate(vectors[:-1])]
    scored.sort(key=lambda entry: (-entry[1], entry[0]))
    return scored[:k]


@dataclass(frozen=True)
class RagConfig:
    retriever: str = "bm25"  # "bm25" | "embedding"
    top_k: int = 15
    chunk_size_chars: int = 1000
    # Fixed retrieval query for tasks like summarization where the task query
    # is not a good retrieval key.
    query_override: str | None = None

    def __post_init__(self) -> None:
        if self.retriever not in ("bm25", "embedding"):
            raise ValueError(f"unknown retriever {self.retriever!r}")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.chunk_size_chars < 1:
            raise ValueError("chunk_size_chars must be >= 1")


RAG_PROMPT_TEMPLATE = """\
Answer the question below using only the excerpts from a {doc_type}.

### Excerpts
{excerpts}

### Question
{query}

Reply with the answer only.
"""


def run_rag(
    task: TaskInstance,
    config: RagConfig,
    remote_client: LMClient,
    provider: EmbeddingProvider | None = None,
    temperature: float = 0.0,
) -> ProtocolResult:
    """Chunk the context, retrieve top-k chunks, and answer with one remote call.

    Retrieved chunks are re-sorted into original document order before
    prompting so the excerpt block reads coherently.
    """
    chunks: list[Chunk] = []
    for doc_index, doc in enumerate(task.context):
        chunks.extend(chunk_by_chars(doc, config.chunk_size_chars, 0, doc_index))
    texts = [c.text for c in chunks]
    retrieval_query = config.query_override or task.query

    if config.retriever == "bm25":
        ranked = bm25_top_k(build_bm25(texts), retrieval_query, config.top_k) if texts else []
    else:
        ranked = embed_top_k(provider or HashingEmbedder(), texts, retrieval_query, config.top_k)
    selected = sorted(i for i, _ in ranked)

    if selected:
        excerpts = "\n\n".join(texts[i] for i in selected)
    else:
        excerpts = "(no relevant excerpts retrieved)"
    prompt = RAG_PROMPT_TEMPLATE.format(
        doc_type=task.doc_type, excerpts=excerpts, query=query_with_options(task)
    )

    ledger = CostLedger()
    response = remote_client.complete(
        CompletionRequest(
            messages=(ChatMessage("user", prompt),), temperature=temperature
        )
    )
    ledger.record(ROLE_REMOTE, response.usage)
    events = (
        event(
            "retrieval",
            {
                "retriever": config.retriever,
                "k": config.top_k,
                "chunk_ids": [chunks[i].chunk_id for i in selected],
            },
        ),
        event("remote_message", response.text),
    )
    return ProtocolResult(
        final_answer=response.text.strip(),
        rounds_used=1,
        ledger=ledger,
        transcript=events,
        terminated_by=TERMINATED_FINAL_ANSWER,
    )
