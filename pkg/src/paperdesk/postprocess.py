"""Post-processing of retrieved chunks: rerank to a small pool, fuse chunks
from the same source into passages, and filter redundant or noisy passages.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Protocol

from .corpus import Chunk
from .index import tokenize
from .llm import CallSink, ChatMessage, ChatRequest, LlmClient, LlmError, complete_json, load_prompt, render_prompt
from .retrieval import RetrievedChunk, WarningSink

logger = logging.getLogger(__name__)

DEFAULT_RERANK_K = 10
DEFAULT_JACCARD_THRESHOLD = 0.8
SHINGLE_SIZE = 5
GAP_SEPARATOR = "…"  # visible provenance gap between non-adjacent chunks


class Reranker(Protocol):
    def score(self, query_text: str, passage_text: str) -> float: ...


class TermOverlapReranker:
    """Term-overlap F1 between query and passage token sets.

    The deterministic default; production replaces it with a cross-encoder
    scoring service behind the same protocol.
    """

    def score(self, query_text: str, passage_text: str) -> float:
        query_terms = set(tokenize(query_text))
        passage_terms = set(tokenize(passage_text))
        if not query_terms or not passage_terms:
            return 0.0
        overlap = len(query_terms & passage_terms)
        if overlap == 0:
            return 0.0
        precision = overlap / len(passage_terms)
        recall = overlap / len(query_terms)
        return 2 * precision * recall / (precision + recall)


class HttpReranker:
    """Cross-encoder scoring service client: POST {query, passages[]} -> {scores[]}."""

    def __init__(self, endpoint: str, timeout_s: float = 10.0, transport=None):
        import httpx

        self.endpoint = endpoint
        self._client = httpx.Client(timeout=timeout_s, transport=transport)

    def score(self, query_text: str, passage_text: str) -> float:
        scores = self.score_batch(query_text, [passage_text])
        return scores[0]

    def score_batch(self, query_text: str, passage_texts: list[str]) -> list[float]:
        response = self._client.post(
            self.endpoint, json={"query": query_text, "passages": passage_texts}
        )
        response.raise_for_status()
        scores = response.json()["scores"]
        if len(scores) != len(passage_texts):
            raise ValueError(
                f"scoring service returned {len(scores)} scores for {len(passage_texts)} passages"
            )
        return [float(s) for s in scores]

    def close(self) -> None:
        self._client.close()


@dataclass(frozen=True)
class Passage:
    """Chunks from one source merged into a single context passage."""

    source_id: str
    text: str
    member_chunks: tuple[str, ...]
    best_score: float

    def __post_init__(self) -> None:
        if not self.member_chunks:
            raise ValueError("passage needs at least one member")


def rerank(
    query_text: str,
    results: list[RetrievedChunk],
    reranker: Reranker,
    k: int = DEFAULT_RERANK_K,
    on_warning: WarningSink | None = None,
) -> list[RetrievedChunk]:
    """Condense the pooled retrieval results to the top-k by reranker score.

    Exact duplicates (same id, e.g. one chunk found by both hybrid and BM25)
    collapse to their first occurrence before scoring. Ties break by the
    original retriever rank, then id.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    unique: dict[str, RetrievedChunk] = {}
    for item in results:
        unique.setdefault(item.item_id, item)
    scored: list[tuple[float, int, str, RetrievedChunk]] = []
    for item in unique.values():
        try:
            score = reranker.score(query_text, item.text)
        except Exception as exc:
            _warn(on_warning, f"reranker dropped {item.item_id}: {exc}")
            continue
        scored.append((score, item.rank, item.item_id, item))
    scored.sort(key=lambda entry: (-entry[0], entry[1], entry[2]))
    return [
        RetrievedChunk(
            source=item.source,
            chunk=item.chunk,
            score=score,
            rank=position,
            shard_key=item.shard_key,
        )
        for position, (score, _, _, item) in enumerate(scored[:k], start=1)
    ]


def fuse(results: list[RetrievedChunk]) -> list[Passage]:
    """Merge chunks that share a source into one passage each.

    Corpus chunks are ordered by ordinal and joined with a newline when
    adjacent, or a "…" line when the ordinals have a gap; web results are
    ordered by rank. Passages come out sorted by best member score.
    """
    groups: dict[str, list[RetrievedChunk]] = {}
    for item in results:
        groups.setdefault(item.source_id, []).append(item)
    passages: list[Passage] = []
    for source_id, members in groups.items():
        deduped: dict[str, RetrievedChunk] = {}
        for item in members:
            deduped.setdefault(item.item_id, item)
        items = list(deduped.values())
        if isinstance(items[0].chunk, Chunk):
            items.sort(key=lambda it: it.chunk.ordinal)  # type: ignore[union-attr]
            parts = [items[0].text]
            for prev, cur in zip(items, items[1:]):
                adjacent = cur.chunk.ordinal == prev.chunk.ordinal + 1  # type: ignore[union-attr]
                parts.append(cur.text if adjacent else f"{GAP_SEPARATOR}\n{cur.text}")
            text = "\n".join(parts)
        else:
            items.sort(key=lambda it: it.rank)
            text = "\n".join(it.text for it in items)
        passages.append(
            Passage(
                source_id=source_id,
                text=text,
                member_chunks=tuple(it.item_id for it in items),
                best_score=max(it.score for it in items),
            )
        )
    passages.sort(key=lambda p: (-p.best_score, p.source_id))
    return passages


def shingles(text: str, size: int = SHINGLE_SIZE) -> set[tuple[str, ...]]:
    tokens = tokenize(text)
    if len(tokens) < size:
        return {tuple(tokens)} if tokens else set()
    return {tuple(tokens[i : i + size]) for i in range(len(tokens) - size + 1)}


def jaccard(a: set, b: set) -> float:
    if not a and not b:
        return 1.0
    union = len(a | b)
    return len(a & b) / union if union else 0.0


def filter_passages(
    client: LlmClient | None,
    query_text: str,
    passages: list[Passage],
    jaccard_threshold: float = DEFAULT_JACCARD_THRESHOLD,
    llm_stage: bool = False,
    on_warning: WarningSink | None = None,
    on_call: CallSink | None = None,
) -> list[Passage]:
    """Drop redundant and noisy passages, always keeping at least one.

    Stage 1 (deterministic): a passage whose 5-gram-shingle Jaccard
    similarity with a higher-scored kept passage reaches the threshold is
    redundant. Stage 2 (optional): an LLM judges relevance to the query;
    any LLM failure skips the stage.
    """
    if not 0.0 < jaccard_threshold <= 1.0:
        raise ValueError("jaccard_threshold must be in (0, 1]")
    kept: list[Passage] = []
    kept_shingles: list[set[tuple[str, ...]]] = []
    for passage in passages:
        sh = shingles(passage.text)
        if any(jaccard(sh, prior) >= jaccard_threshold for prior in kept_shingles):
            continue
        kept.append(passage)
        kept_shingles.append(sh)
    if not llm_stage or client is None or not kept:
        return kept
    numbered = "\n".join(f"[{i}] {p.text}" for i, p in enumerate(kept, start=1))
    prompt = render_prompt(load_prompt("filter"), query=query_text, passages=numbered)
    request = ChatRequest(messages=(ChatMessage(role="user", content=prompt),), tag="filter")
    try:
        keep_numbers = complete_json(client, request, "filter", on_call=on_call)
    except LlmError as exc:
        _warn(on_warning, f"relevance filter skipped: {exc}")
        return kept
    chosen = [kept[i - 1] for i in keep_numbers if 1 <= i <= len(kept)]
    return chosen if chosen else kept[:1]


def _warn(sink: WarningSink | None, message: str) -> None:
    logger.warning(message)
    if sink is not None:
        sink(message)
