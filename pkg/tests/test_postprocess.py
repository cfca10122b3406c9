"""Post-processing: rerank, fuse, filter."""

from __future__ import annotations

import random

import pytest

from paperdesk.corpus import Chunk, ShardKey
from paperdesk.postprocess import (
    GAP_SEPARATOR,
    Passage,
    TermOverlapReranker,
    filter_passages,
    fuse,
    jaccard,
    rerank,
    shingles,
)
from paperdesk.retrieval import RetrievedChunk, WebResult

from conftest import scripted, words

KEY = ShardKey(period="2023-Q1", domain="cs")


def corpus_hit(paper_id: str, ordinal: int, text: str, score: float, rank: int, source="hybrid"):
    chunk = Chunk(
        chunk_id=f"{paper_id}#{ordinal:04d}",
        paper_id=paper_id,
        ordinal=ordinal,
        text=text,
        token_count=len(text.split()),
        shard_key=KEY,
    )
    return RetrievedChunk(source=source, chunk=chunk, score=score, rank=rank, shard_key=KEY)


def web_hit(url: str, score: float, rank: int, title="a title", snippet="a snippet"):
    return RetrievedChunk(
        source="web", chunk=WebResult(url=url, title=title, snippet=snippet), score=score, rank=rank
    )


class TestRerank:
    def test_large_pool_cut_to_k(self):
        rng = random.Random(1)
        pool = [
            corpus_hit(f"p{i:03d}", 0, words(rng, 12), score=1.0, rank=i + 1) for i in range(110)
        ]
        out = rerank("gradient descent", pool, TermOverlapReranker(), k=10)
        assert len(out) == 10
        assert [item.rank for item in out] == list(range(1, 11))

    def test_fewer_than_k(self):
        pool = [
            corpus_hit("a", 0, "gradient descent convergence", 1.0, 1),
            corpus_hit("b", 0, "policy reward shaping", 0.9, 2),
            corpus_hit("c", 0, "quantum entanglement", 0.8, 3),
        ]
        out = rerank("gradient descent", pool, TermOverlapReranker(), k=10)
        assert len(out) == 3
        assert out[0].item_id == "a#0000"  # best term overlap first

    def test_exact_duplicates_collapse(self):
        hit_h = corpus_hit("a", 0, "gradient descent", 0.9, 1, source="hybrid")
        hit_b = corpus_hit("a", 0, "gradient descent", 3.3, 1, source="bm25")
        out = rerank("gradient", [hit_h, hit_b], TermOverlapReranker(), k=10)
        assert len(out) == 1
        assert out[0].source == "hybrid"  # first occurrence wins

    def test_reranker_failure_drops_item(self):
        class Brittle:
            def score(self, q, t):
                if "bad" in t:
                    raise RuntimeError("scoring service rejected the passage")
                return 0.5

        warnings: list[str] = []
        pool = [corpus_hit("a", 0, "good text", 1.0, 1), corpus_hit("b", 0, "bad text", 1.0, 2)]
        out = rerank("q", pool, Brittle(), k=10, on_warning=warnings.append)
        assert [item.item_id for item in out] == ["a#0000"]
        assert warnings

    def test_tie_break_original_rank_then_id(self):
        class Constant:
            def score(self, q, t):
                return 1.0

        pool = [
            corpus_hit("b", 0, "x", 0.0, 2),
            corpus_hit("a", 0, "x", 0.0, 2),
            corpus_hit("c", 0, "x", 0.0, 1),
        ]
        out = rerank("q", pool, Constant(), k=10)
        assert [item.item_id for item in out] == ["c#0000", "a#0000", "b#0000"]


class TestHttpReranker:
    def test_batch_contract(self):
        import httpx

        from paperdesk.postprocess import HttpReranker

        captured = {}

        def handler(request: httpx.Request) -> httpx.Response:
            import json

            captured["body"] = json.loads(request.content)
            return httpx.Response(200, json={"scores": [0.75]})

        reranker = HttpReranker("https://rerank.example/score", transport=httpx.MockTransport(handler))
        assert reranker.score("the query", "the passage") == 0.75
        assert captured["body"] == {"query": "the query", "passages": ["the passage"]}

    def test_score_count_mismatch_rejected(self):
        import httpx

        from paperdesk.postprocess import HttpReranker

        reranker = HttpReranker(
            "https://rerank.example/score",
            transport=httpx.MockTransport(lambda req: httpx.Response(200, json={"scores": []})),
        )
        with pytest.raises(ValueError, match="scores"):
            reranker.score("q", "p")

    def test_service_failure_drops_item_in_rerank(self):
        import httpx

        from paperdesk.postprocess import HttpReranker

        reranker = HttpReranker(
            "https://rerank.example/score",
            transport=httpx.MockTransport(lambda req: httpx.Response(500)),
        )
        warnings: list[str] = []
        out = rerank("q", [corpus_hit("a", 0, "text", 1.0, 1)], reranker, k=5, on_warning=warnings.append)
        assert out == [] and warnings


class TestFuse:
    def test_same_paper_ordered_by_ordinal(self):
        hits = [
            corpus_hit("paperX", 2, "later part", 0.7, 1),
            corpus_hit("paperX", 0, "early part", 0.5, 2),
        ]
        passages = fuse(hits)
        assert len(passages) == 1
        assert passages[0].member_chunks == ("paperX#0000", "paperX#0002")
        assert passages[0].best_score == 0.7

    def test_three_distinct_papers(self):
        hits = [corpus_hit(f"p{i}", 0, f"text {i}", 1.0 - i / 10, i + 1) for i in range(3)]
        passages = fuse(hits)
        assert len(passages) == 3
        assert [p.source_id for p in passages] == ["p0", "p1", "p2"]

    def test_web_single_member(self):
        passages = fuse([web_hit("https://a.example/x", 1.0, 1)])
        assert len(passages) == 1
        assert passages[0].source_id == "https://a.example/x"
        assert passages[0].member_chunks == ("https://a.example/x",)

    def test_adjacent_newline_gap_ellipsis(self):
        hits = [
            corpus_hit("p", 0, "part zero", 1.0, 1),
            corpus_hit("p", 1, "part one", 0.9, 2),
            corpus_hit("p", 3, "part three", 0.8, 3),
        ]
        (passage,) = fuse(hits)
        assert passage.text == f"part zero\npart one\n{GAP_SEPARATOR}\npart three"

    def test_never_splits_a_source(self):
        rng = random.Random(2)
        hits = []
        rank = 1
        for paper in ("pa", "pb", "pc"):
            for ordinal in rng.sample(range(6), k=3):
                hits.append(corpus_hit(paper, ordinal, words(rng, 8), rng.random(), rank))
                rank += 1
        passages = fuse(hits)
        assert len(passages) == 3
        assert sorted(p.source_id for p in passages) == ["pa", "pb", "pc"]
        for passage in passages:
            ordinals = [int(cid.split("#")[1]) for cid in passage.member_chunks]
            assert ordinals == sorted(ordinals)

    def test_passages_sorted_by_best_score(self):
        hits = [
            corpus_hit("low", 0, "x", 0.1, 1),
            corpus_hit("high", 0, "y", 0.9, 2),
        ]
        assert [p.source_id for p in fuse(hits)] == ["high", "low"]


class TestFilter:
    def passage(self, source_id: str, text: str, score: float) -> Passage:
        return Passage(source_id=source_id, text=text, member_chunks=(source_id,), best_score=score)

    def test_identical_text_drops_lower_scored(self):
        passages = [
            self.passage("a", "the very same words repeated here", 0.9),
            self.passage("b", "the very same words repeated here", 0.5),
        ]
        kept = filter_passages(None, "q", passages)
        assert [p.source_id for p in kept] == ["a"]

    def test_disjoint_passages_both_kept(self):
        passages = [
            self.passage("a", "alpha beta gamma delta epsilon zeta", 0.9),
            self.passage("b", "one two three four five six", 0.5),
        ]
        kept = filter_passages(None, "q", passages)
        assert len(kept) == 2

    def test_shingle_oracle_one_third_jaccard(self):
        # shingle sets {abcde, bcdef} vs {abcde, bcdeg}: intersection 1, union 3
        a, b = "a b c d e f", "a b c d e g"
        sh_a, sh_b = shingles(a), shingles(b)
        assert sh_a == {("a", "b", "c", "d", "e"), ("b", "c", "d", "e", "f")}
        assert jaccard(sh_a, sh_b) == pytest.approx(1 / 3)
        passages = [self.passage("a", a, 0.9), self.passage("b", b, 0.5)]
        kept = filter_passages(None, "q", passages, jaccard_threshold=0.8)
        assert len(kept) == 2

    def test_idempotent(self):
        rng = random.Random(3)
        passages = [
            self.passage(f"p{i}", words(rng, rng.randrange(3, 30)), 1.0 - i / 20) for i in range(12)
        ]
        once = filter_passages(None, "q", passages)
        twice = filter_passages(None, "q", once)
        assert once == twice

    def test_at_least_one_survives(self):
        passages = [self.passage(str(i), "identical words all around", 1.0 - i / 10) for i in range(4)]
        kept = filter_passages(None, "q", passages)
        assert len(kept) == 1

    def test_llm_stage_drops_judged_irrelevant(self):
        client = scripted([{"tag": "filter", "response": '{"keep": [2]}'}])
        passages = [
            self.passage("a", "alpha beta gamma", 0.9),
            self.passage("b", "relevant words here", 0.5),
        ]
        kept = filter_passages(client, "q", passages, llm_stage=True)
        assert [p.source_id for p in kept] == ["b"]

    def test_llm_failure_returns_stage1(self):
        client = scripted([])  # no entries: every call fails
        passages = [
            self.passage("a", "alpha beta gamma", 0.9),
            self.passage("b", "different words entirely", 0.5),
        ]
        warnings: list[str] = []
        kept = filter_passages(client, "q", passages, llm_stage=True, on_warning=warnings.append)
        assert len(kept) == 2
        assert warnings

    def test_llm_keeping_none_keeps_top(self):
        client = scripted([{"tag": "filter", "response": '{"keep": []}'}])
        passages = [
            self.passage("a", "alpha beta gamma", 0.9),
            self.passage("b", "different words entirely", 0.5),
        ]
        kept = filter_passages(client, "q", passages, llm_stage=True)
        assert [p.source_id for p in kept] == ["a"]

    def test_conservation(self):
        rng = random.Random(4)
        passages = [self.passage(f"p{i}", words(rng, 15), rng.random()) for i in range(10)]
        kept = filter_passages(None, "q", passages)
        assert {p.source_id for p in kept} <= {p.source_id for p in passages}
