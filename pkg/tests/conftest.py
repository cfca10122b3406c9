"""Shared fixtures: synthetic corpora, fixture catalogs, scripted LLM helpers."""

from __future__ import annotations

import random
from datetime import date, timedelta

import pytest

from paperdesk.corpus import ChunkConfig, Granularity, PaperRecord, ingest
from paperdesk.index import Bm25Params, HashingEmbedder, IndexCatalog
from paperdesk.llm import ScriptedLlmClient

VOCAB = (
    "gradient descent policy reward transformer attention retrieval corpus "
    "embedding sparse dense ranking query document protein folding quantum "
    "entanglement lattice graph neural network convergence bound sampling "
    "estimator variance causal inference alignment preference optimization "
    "diffusion token language model agent planning memory benchmark dataset "
    "annotation evaluation robust adversarial perturbation sketch kernel"
).split()

CATEGORIES = ("cs.CL", "cs.LG", "math.OC", "stat.ML")


def words(rng: random.Random, n: int) -> str:
    return " ".join(rng.choice(VOCAB) for _ in range(n))


def make_record(
    paper_id: str,
    published: date,
    primary: str = "cs.CL",
    title: str | None = None,
    abstract: str | None = None,
    body: str | None = None,
    rng: random.Random | None = None,
) -> PaperRecord:
    rng = rng or random.Random(hash(paper_id) & 0xFFFF)
    return PaperRecord(
        paper_id=paper_id,
        title=title if title is not None else words(rng, 6),
        abstract=abstract if abstract is not None else words(rng, 30),
        body=body,
        categories=(primary,),
        primary_category=primary,
        published=published,
    )


def synth_records(rng: random.Random, n_papers: int) -> list[PaperRecord]:
    start = date(2023, 1, 1)
    span_days = (date(2024, 6, 30) - start).days
    records = []
    for i in range(n_papers):
        published = start + timedelta(days=rng.randrange(span_days + 1))
        body = words(rng, rng.randrange(0, 400)) or None
        records.append(
            make_record(
                paper_id=f"{published.year % 100:02d}{published.month:02d}.{i:05d}",
                published=published,
                primary=rng.choice(CATEGORIES),
                title=words(rng, 5),
                abstract=words(rng, rng.randrange(15, 60)),
                body=body,
                rng=rng,
            )
        )
    return records


def build_catalog(tmp_dir, records, cfg: ChunkConfig | None = None) -> IndexCatalog:
    catalog = IndexCatalog(tmp_dir, embedder=HashingEmbedder(), params=Bm25Params())
    ingest(records, cfg or ChunkConfig(), catalog)
    return catalog


@pytest.fixture(scope="session")
def fixture_catalog(tmp_path_factory) -> IndexCatalog:
    """4 shards (2023-Q1/2023-Q2 x cs/math), 45 single-chunk papers each."""
    rng = random.Random(7)
    records = []
    n = 0
    for period_start in (date(2023, 2, 1), date(2023, 5, 1)):
        for primary in ("cs.CL", "math.OC"):
            for _ in range(45):
                n += 1
                records.append(
                    make_record(
                        paper_id=f"23{period_start.month:02d}.{n:05d}",
                        published=period_start + timedelta(days=rng.randrange(28)),
                        primary=primary,
                        title=words(rng, 5),
                        abstract=words(rng, 40),
                        rng=rng,
                    )
                )
    data_dir = tmp_path_factory.mktemp("fixture-catalog")
    return build_catalog(data_dir, records)


def scripted(entries: list[dict]) -> ScriptedLlmClient:
    return ScriptedLlmClient.from_entries(entries)


def retrieval_turn_script(
    query_match: str,
    rewritten: str,
    subqueries: list[str],
    final_text: str,
    constraints_json: str = "",
    use_web: bool = False,
    reflect_verdict: str = '{"verdict": "pass"}',
) -> list[dict]:
    """Script entries for one full retrieval-route turn."""
    web_flag = "true" if use_web else "false"
    entries = [
        {"tag": "clarify", "match": query_match, "response": '{"decision": "proceed"}'},
        {
            "tag": "plan",
            "match": query_match,
            "response": f'{{"route": "retrieval", "use_web": {web_flag}}}',
        },
        {
            "tag": "rewrite",
            "match": query_match,
            "response": f'{{"text": "{rewritten}"{constraints_json}}}',
        },
        {
            "tag": "decompose",
            "match": rewritten,
            "response": '{"subqueries": ' + _json_list(subqueries) + "}",
        },
    ]
    for i, sub in enumerate(subqueries, start=1):
        entries.append({"tag": "generate", "match": sub, "response": f"Sub-answer {i} about {sub}."})
    entries.append({"tag": "compose", "match": rewritten, "response": final_text})
    entries.append({"tag": "reflect", "match": final_text, "response": reflect_verdict})
    return entries


def _json_list(items: list[str]) -> str:
    quoted = ", ".join(f'"{item}"' for item in items)
    return f"[{quoted}]"
