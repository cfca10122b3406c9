"""Grounded answer generation and sentence-level citation attribution.

Citations are attached by treating the passage set as a miniature BM25
corpus (one document per passage) and scoring each answer sentence as a
query against it; a sentence cites the argmax passage when it scores
positive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .index import Bm25Params, tokenize
from .llm import (
    GENERATION_TEMPERATURE,
    CallSink,
    ChatMessage,
    ChatRequest,
    LlmClient,
    complete,
    load_prompt,
    render_prompt,
)
from .postprocess import Passage
from .query_tools import History, render_history

MIN_CITED_SENTENCE_TOKENS = 5  # connective sentences shorter than this get no citation

ABBREVIATIONS = ("e.g.", "i.e.", "et al.", "fig.", "eq.")


@dataclass(frozen=True)
class AnswerDraft:
    text: str
    used_passage_ids: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError("answer text must be non-empty")


@dataclass(frozen=True)
class Citation:
    sentence_index: int
    source_id: str
    score: float

    def to_json(self) -> dict:
        return {
            "sentence_index": self.sentence_index,
            "source_id": self.source_id,
            "score": self.score,
        }


@dataclass(frozen=True)
class AnswerWithCitations:
    text: str
    sentences: tuple[tuple[int, int], ...]
    citations: tuple[Citation, ...]

    def to_json(self) -> dict:
        return {
            "text": self.text,
            "sentences": [{"start": s, "end": e} for s, e in self.sentences],
            "citations": [c.to_json() for c in self.citations],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "AnswerWithCitations":
        return cls(
            text=doc["text"],
            sentences=tuple((s["start"], s["end"]) for s in doc["sentences"]),
            citations=tuple(Citation(**c) for c in doc["citations"]),
        )


def render_passages(passages: list[Passage]) -> str:
    if not passages:
        return "(none)"
    return "\n\n".join(
        f"[{i}] (source: {p.source_id})\n{p.text}" for i, p in enumerate(passages, start=1)
    )


def generate(
    client: LlmClient,
    query_text: str,
    passages: list[Passage],
    history: History,
    on_call: CallSink | None = None,
) -> AnswerDraft:
    """One generation call. With passages the prompt demands grounding; with
    none it answers from internal knowledge (the direct path). Gateway
    failures propagate: generation is not optional."""
    if passages:
        prompt = render_prompt(
            load_prompt("generate"),
            query=query_text,
            passages=render_passages(passages),
            history=render_history(history),
        )
    else:
        prompt = render_prompt(
            load_prompt("generate_direct"), query=query_text, history=render_history(history)
        )
    request = ChatRequest(
        messages=(ChatMessage(role="user", content=prompt),),
        tag="generate",
        temperature=GENERATION_TEMPERATURE,
    )
    text = complete(client, request, on_call=on_call)
    return AnswerDraft(text=text.strip(), used_passage_ids=tuple(p.source_id for p in passages))


# --------------------------------------------------------------------------
# Sentence splitting
# --------------------------------------------------------------------------


def split_sentences(text: str) -> list[tuple[int, int]]:
    """Character spans of sentences, splitting at .!? before whitespace/end
    and skipping common abbreviations. Spans tile the text exactly."""
    if not text:
        return []
    boundaries: list[int] = []
    for i, ch in enumerate(text):
        if ch not in ".!?":
            continue
        end = i + 1
        if end < len(text) and not text[end].isspace():
            continue
        if ch == "." and text[:end].lower().endswith(ABBREVIATIONS):
            continue
        boundaries.append(end)
    spans: list[tuple[int, int]] = []
    start = 0
    for boundary in boundaries:
        if boundary >= len(text):
            break
        spans.append((start, boundary))
        start = boundary
    if start < len(text):
        spans.append((start, len(text)))
    return spans


# --------------------------------------------------------------------------
# Citation attachment
# --------------------------------------------------------------------------


def _passage_bm25(
    passages: list[Passage], params: Bm25Params
) -> "_MiniBm25":
    return _MiniBm25({p.source_id: p.text for p in passages}, params)


class _MiniBm25:
    """Okapi BM25 over a handful of passage documents."""

    def __init__(self, docs: dict[str, str], params: Bm25Params):
        self.params = params
        self.doc_ids = sorted(docs)
        self.doc_tokens = {doc_id: tokenize(text) for doc_id, text in docs.items()}
        self.doc_counts = {
            doc_id: _count(tokens) for doc_id, tokens in self.doc_tokens.items()
        }
        self.N = len(docs)
        total = sum(len(tokens) for tokens in self.doc_tokens.values())
        self.avgdl = total / self.N if self.N else 0.0
        self.df: dict[str, int] = {}
        for counts in self.doc_counts.values():
            for term in counts:
                self.df[term] = self.df.get(term, 0) + 1

    def score(self, query_tokens: list[str], doc_id: str) -> float:
        k1, b = self.params.k1, self.params.b
        counts = self.doc_counts[doc_id]
        length = len(self.doc_tokens[doc_id])
        score = 0.0
        for term in query_tokens:
            tf = counts.get(term, 0)
            if tf == 0:
                continue
            n_t = self.df[term]
            idf = math.log(1.0 + (self.N - n_t + 0.5) / (n_t + 0.5))
            norm = k1 * (1.0 - b + b * length / self.avgdl)
            score += idf * tf * (k1 + 1.0) / (tf + norm)
        return score

    def best(self, query_tokens: list[str]) -> tuple[str, float] | None:
        best_id: str | None = None
        best_score = 0.0
        for doc_id in self.doc_ids:  # ascending id, so ties keep the lowest
            score = self.score(query_tokens, doc_id)
            if score > best_score:
                best_id, best_score = doc_id, score
        if best_id is None:
            return None
        return best_id, best_score


def _count(tokens: list[str]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for token in tokens:
        counts[token] = counts.get(token, 0) + 1
    return counts


def attach_citations(
    draft: AnswerDraft,
    passages: list[Passage],
    params: Bm25Params = Bm25Params(),
    min_sentence_tokens: int = MIN_CITED_SENTENCE_TOKENS,
) -> AnswerWithCitations:
    """Link each answer sentence to the passage that best matches it.

    A sentence of at least min_sentence_tokens tokens cites the passage with
    the highest BM25 score for it, provided that score is positive; ties go
    to the lowest source_id. At most one citation per sentence.
    """
    spans = split_sentences(draft.text)
    citations: list[Citation] = []
    if passages:
        scorer = _passage_bm25(passages, params)
        for sentence_index, (start, end) in enumerate(spans):
            query_tokens = tokenize(draft.text[start:end])
            if len(query_tokens) < min_sentence_tokens:
                continue
            hit = scorer.best(query_tokens)
            if hit is None:
                continue
            source_id, score = hit
            citations.append(
                Citation(sentence_index=sentence_index, source_id=source_id, score=score)
            )
    return AnswerWithCitations(
        text=draft.text, sentences=tuple(spans), citations=tuple(citations)
    )
