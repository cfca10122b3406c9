"""Query routing and the three retrieval tools: hybrid, BM25, and web search.

Retrieval performs no language understanding; time/domain constraints arrive
pre-extracted from the query tools. Per-shard failures degrade to warnings so
a query is answered from whatever shards are reachable.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from datetime import date
from pathlib import Path
from typing import Callable, Protocol

from .corpus import Chunk, ShardKey, archive_of, period_interval
from .index import Embedder, IndexCatalog, bm25_search, hybrid_search

logger = logging.getLogger(__name__)

DEFAULT_HYBRID_K_PER_SHARD = 30
DEFAULT_BM25_CAP = 80
DEFAULT_WEB_N = 10

WarningSink = Callable[[str], None]


@dataclass(frozen=True)
class RouteConstraints:
    time_range: tuple[date, date] | None = None
    domains: frozenset[str] | None = None

    def __post_init__(self) -> None:
        if self.time_range is not None and self.time_range[0] > self.time_range[1]:
            raise ValueError("time_range start must be <= end")

    @property
    def is_empty(self) -> bool:
        return self.time_range is None and self.domains is None

    def to_json(self) -> dict:
        out: dict = {}
        if self.time_range is not None:
            out["time_start"] = self.time_range[0].isoformat()
            out["time_end"] = self.time_range[1].isoformat()
        if self.domains is not None:
            out["domains"] = sorted(self.domains)
        return out


@dataclass(frozen=True)
class WebResult:
    url: str
    title: str
    snippet: str

    def __post_init__(self) -> None:
        if not self.url:
            raise ValueError("web result url must be non-empty")


@dataclass(frozen=True)
class RetrievedChunk:
    """One scored retrieval hit, tagged with the retriever that produced it."""

    source: str  # "hybrid" | "bm25" | "web"
    chunk: Chunk | WebResult
    score: float
    rank: int
    shard_key: ShardKey | None = None

    @property
    def item_id(self) -> str:
        return self.chunk.chunk_id if isinstance(self.chunk, Chunk) else self.chunk.url

    @property
    def source_id(self) -> str:
        """Grouping key for fusion: the paper for corpus chunks, the url for web hits."""
        return self.chunk.paper_id if isinstance(self.chunk, Chunk) else self.chunk.url

    @property
    def text(self) -> str:
        if isinstance(self.chunk, Chunk):
            return self.chunk.text
        return f"{self.chunk.title}\n{self.chunk.snippet}"


class WebSearchClient(Protocol):
    def search(self, query: str, n: int) -> list[WebResult]: ...


class FixtureWebClient:
    """Canned web search results keyed by exact query text."""

    def __init__(self, results_by_query: dict[str, list[WebResult]]):
        self.results_by_query = results_by_query

    @classmethod
    def from_file(cls, path: str | Path) -> "FixtureWebClient":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        table = {
            query: [WebResult(**item) for item in items]
            for query, items in raw.items()
        }
        return cls(table)

    def search(self, query: str, n: int) -> list[WebResult]:
        return self.results_by_query.get(query, [])[:n]


class NullWebClient:
    """Web search disabled: always returns nothing."""

    def search(self, query: str, n: int) -> list[WebResult]:
        return []


class HttpWebSearchClient:
    """Generic search-engine API client: POST {query, n} -> {results: [...]}.

    Endpoint and key come from PAPERDESK_WEB_ENDPOINT / PAPERDESK_WEB_API_KEY
    when not passed explicitly. Results beyond n are dropped.
    """

    ENDPOINT_ENV = "PAPERDESK_WEB_ENDPOINT"
    KEY_ENV = "PAPERDESK_WEB_API_KEY"

    def __init__(
        self,
        endpoint: str | None = None,
        api_key: str | None = None,
        timeout_s: float = 10.0,
        transport=None,
    ):
        import os

        import httpx

        endpoint = endpoint or os.environ.get(self.ENDPOINT_ENV)
        if not endpoint:
            raise ValueError(f"web search endpoint missing (set {self.ENDPOINT_ENV})")
        self.endpoint = endpoint
        headers = {"Content-Type": "application/json"}
        api_key = api_key or os.environ.get(self.KEY_ENV)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._client = httpx.Client(headers=headers, timeout=timeout_s, transport=transport)

    def search(self, query: str, n: int) -> list[WebResult]:
        response = self._client.post(self.endpoint, json={"query": query, "n": n})
        response.raise_for_status()
        items = response.json().get("results", [])
        return [
            WebResult(
                url=item["url"],
                title=item.get("title", ""),
                snippet=item.get("snippet", ""),
            )
            for item in items[:n]
        ]

    def close(self) -> None:
        self._client.close()


# --------------------------------------------------------------------------
# Shard selection
# --------------------------------------------------------------------------


def _domains_match(shard_domain: str, requested: str) -> bool:
    # An archive matches every one of its categories and vice versa:
    # "cs" matches shards for "cs.CL", and "cs.CL" matches "cs" shards.
    if shard_domain == requested:
        return True
    if requested.startswith(shard_domain + "."):
        return True
    if shard_domain.startswith(requested + "."):
        return True
    return archive_of(shard_domain) == requested


def select_shards(catalog: IndexCatalog, constraints: RouteConstraints) -> list[ShardKey]:
    """Shard keys whose period intersects the time range and whose domain
    matches any requested domain by prefix; absent constraints select all.
    Deterministic order: period ascending, then domain ascending."""
    selected: list[ShardKey] = []
    for key in catalog.shard_keys():
        if constraints.time_range is not None:
            start, end = period_interval(key.period)
            want_start, want_end = constraints.time_range
            if end < want_start or start > want_end:
                continue
        if constraints.domains is not None:
            if not any(_domains_match(key.domain, d) for d in constraints.domains):
                continue
        selected.append(key)
    return selected


# --------------------------------------------------------------------------
# Retrievers
# --------------------------------------------------------------------------


def hybrid_retrieve(
    catalog: IndexCatalog,
    embedder: Embedder,
    query_text: str,
    constraints: RouteConstraints,
    k_per_shard: int = DEFAULT_HYBRID_K_PER_SHARD,
    on_warning: WarningSink | None = None,
) -> list[RetrievedChunk]:
    """Top-k_per_shard hybrid hits from every selected shard, ranks per shard."""
    if k_per_shard < 1:
        raise ValueError("k_per_shard must be >= 1")
    dense_q = embedder.embed_dense(query_text)
    sparse_q = embedder.embed_sparse(query_text)
    results: list[RetrievedChunk] = []
    for key in select_shards(catalog, constraints):
        try:
            index = catalog.get_index(key)
            hits = hybrid_search(index, dense_q, sparse_q, k_per_shard)
        except Exception as exc:
            _warn(on_warning, f"hybrid retrieval skipped shard {key}: {exc}")
            continue
        for rank, (chunk_id, score) in enumerate(hits, start=1):
            results.append(
                RetrievedChunk(
                    source="hybrid",
                    chunk=index.chunks[chunk_id],
                    score=score,
                    rank=rank,
                    shard_key=key,
                )
            )
    return results


def bm25_retrieve(
    catalog: IndexCatalog,
    query_text: str,
    constraints: RouteConstraints,
    cap: int = DEFAULT_BM25_CAP,
    on_warning: WarningSink | None = None,
) -> list[RetrievedChunk]:
    """BM25 hits pooled over selected shards, merged by score, capped."""
    if cap < 1:
        raise ValueError("cap must be >= 1")
    pooled: list[tuple[float, str, Chunk, ShardKey]] = []
    for key in select_shards(catalog, constraints):
        try:
            index = catalog.get_index(key)
            hits = bm25_search(index, query_text, cap)
        except Exception as exc:
            _warn(on_warning, f"bm25 retrieval skipped shard {key}: {exc}")
            continue
        for chunk_id, score in hits:
            pooled.append((score, chunk_id, index.chunks[chunk_id], key))
    pooled.sort(key=lambda item: (-item[0], item[1]))
    return [
        RetrievedChunk(source="bm25", chunk=chunk, score=score, rank=rank, shard_key=key)
        for rank, (score, _, chunk, key) in enumerate(pooled[:cap], start=1)
    ]


def web_retrieve(
    client: WebSearchClient,
    query_text: str,
    n: int = DEFAULT_WEB_N,
    on_warning: WarningSink | None = None,
) -> list[RetrievedChunk]:
    """Web hits in provider order; failures degrade to an empty list."""
    if n < 1:
        raise ValueError("n must be >= 1")
    try:
        hits = client.search(query_text, n)
    except Exception as exc:
        _warn(on_warning, f"web retrieval failed: {exc}")
        return []
    return [
        RetrievedChunk(source="web", chunk=hit, score=1.0 / rank, rank=rank)
        for rank, hit in enumerate(hits[:n], start=1)
    ]


def _warn(sink: WarningSink | None, message: str) -> None:
    logger.warning(message)
    if sink is not None:
        sink(message)
