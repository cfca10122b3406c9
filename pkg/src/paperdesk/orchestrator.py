"""Session management and the adaptive answer pipeline.

Each turn plans a route first: simple questions are answered directly from
the model, everything else runs the full tool chain (rewrite, decompose,
route + retrieve, rerank/fuse/filter, generate per sub-query, compose,
cite, reflect, polish). Every step emits one TraceEvent, so the whole run
is streamable and replayable.
"""

from __future__ import annotations

import logging
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import date
from typing import Callable

from .corpus import Granularity
from .generation import (
    AnswerDraft,
    AnswerWithCitations,
    attach_citations,
    generate,
)
from .index import Bm25Params, Embedder, IndexCatalog
from .llm import (
    ChatMessage,
    ChatRequest,
    LlmCallRecord,
    LlmClient,
    LlmError,
    complete,
    complete_json,
    load_prompt,
    render_prompt,
)
from .postprocess import (
    Reranker,
    TermOverlapReranker,
    filter_passages,
    fuse,
    rerank,
)
from .query_tools import (
    History,
    clarify,
    decompose,
    render_history,
    rewrite,
)
from .refinement import polish, reflect
from .retrieval import (
    RetrievedChunk,
    RouteConstraints,
    WebSearchClient,
    bm25_retrieve,
    hybrid_retrieve,
    select_shards,
    web_retrieve,
)

logger = logging.getLogger(__name__)

TRACE_KINDS = (
    "clarification_asked",
    "plan_chosen",
    "query_rewritten",
    "subqueries_planned",
    "shards_selected",
    "chunks_retrieved",
    "reranked",
    "passages_fused",
    "passages_filtered",
    "sub_answer",
    "final_draft",
    "citations_attached",
    "reflection",
    "polished",
    "warning",
    "error",
    "final_answer",
)

RETRIEVAL_KINDS = frozenset(
    {
        "shards_selected",
        "chunks_retrieved",
        "reranked",
        "passages_fused",
        "passages_filtered",
        "sub_answer",
    }
)


class TurnStateError(RuntimeError):
    """The session is not in a state that allows the requested operation."""


@dataclass(frozen=True)
class TraceEvent:
    kind: str
    seq: int
    payload: dict
    ts: float

    def to_json(self) -> dict:
        return {"kind": self.kind, "seq": self.seq, "payload": self.payload, "ts": self.ts}


class TraceRecorder:
    """Gap-free, monotonically numbered event log for one turn."""

    def __init__(self, on_event: Callable[[TraceEvent], None] | None = None):
        self.events: list[TraceEvent] = []
        self._on_event = on_event

    def emit(self, kind: str, payload: dict) -> TraceEvent:
        if kind not in TRACE_KINDS:
            raise ValueError(f"unknown trace kind {kind!r}")
        event = TraceEvent(kind=kind, seq=len(self.events), payload=payload, ts=time.time())
        self.events.append(event)
        if self._on_event is not None:
            self._on_event(event)
        return event

    def warning(self, message: str, **extra: object) -> None:
        self.emit("warning", {"message": message, **extra})


def normalize_trace(events: list[TraceEvent]) -> list[dict]:
    """Trace as JSON objects with timing fields stripped (ts, llm latency),
    the representation compared in reproducibility checks."""

    def scrub(value: object) -> object:
        if isinstance(value, dict):
            return {k: scrub(v) for k, v in value.items() if k != "latency_ms"}
        if isinstance(value, list):
            return [scrub(v) for v in value]
        return value

    out = []
    for event in events:
        doc = event.to_json()
        doc.pop("ts")
        out.append({k: scrub(v) for k, v in doc.items()})
    return out


# --------------------------------------------------------------------------
# Sessions
# --------------------------------------------------------------------------


@dataclass
class Turn:
    user_text: str
    answer: AnswerWithCitations


@dataclass
class PendingClarification:
    query: str
    questions: list[str]


@dataclass
class Session:
    session_id: str = field(default_factory=lambda: str(uuid.uuid4()))
    turns: list[Turn] = field(default_factory=list)
    pending_clarification: PendingClarification | None = None
    _turn_lock: threading.Lock = field(
        default_factory=threading.Lock, repr=False, compare=False
    )

    def history_window(self, n: int) -> History:
        return [(t.user_text, t.answer.text) for t in self.turns[-n:]]

    def to_json(self) -> dict:
        doc: dict = {
            "session_id": self.session_id,
            "turns": [
                {"user_text": t.user_text, "answer": t.answer.to_json()} for t in self.turns
            ],
        }
        if self.pending_clarification is not None:
            doc["pending_clarification"] = {
                "query": self.pending_clarification.query,
                "questions": list(self.pending_clarification.questions),
            }
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "Session":
        pending = None
        if "pending_clarification" in doc:
            pending = PendingClarification(
                query=doc["pending_clarification"]["query"],
                questions=list(doc["pending_clarification"]["questions"]),
            )
        return cls(
            session_id=doc["session_id"],
            turns=[
                Turn(
                    user_text=t["user_text"],
                    answer=AnswerWithCitations.from_json(t["answer"]),
                )
                for t in doc["turns"]
            ],
            pending_clarification=pending,
        )


# --------------------------------------------------------------------------
# Configuration and dependencies
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PipelinePlan:
    route: str  # "direct" | "retrieval"
    use_web: bool = False
    constraints: RouteConstraints = field(default_factory=RouteConstraints)


@dataclass(frozen=True)
class EngineConfig:
    granularity: Granularity = Granularity.QUARTER_ARCHIVE
    hybrid_k_per_shard: int = 30
    bm25_cap: int = 80
    web_n: int = 10
    rerank_k: int = 10
    max_sub: int = 4
    jaccard_threshold: float = 0.8
    llm_filter: bool = False
    max_rounds: int = 1
    clarify_enabled: bool = True
    clarify_first_turn_only: bool = True
    history_window: int = 6
    horizon_date: date = date(2024, 6, 30)
    subquery_fanout: int = 4
    bm25_params: Bm25Params = Bm25Params()


@dataclass
class Deps:
    llm: LlmClient
    catalog: IndexCatalog
    embedder: Embedder
    reranker: Reranker = field(default_factory=TermOverlapReranker)
    web: WebSearchClient | None = None


@dataclass
class TurnResult:
    answer: AnswerWithCitations | None
    trace: list[TraceEvent]
    suspended: bool = False
    failed: bool = False
    error: str | None = None


# --------------------------------------------------------------------------
# Planning
# --------------------------------------------------------------------------


def plan(
    client: LlmClient,
    query_text: str,
    history: History,
    on_warning: Callable[[str], None] | None = None,
    on_call: Callable[[LlmCallRecord], None] | None = None,
) -> PipelinePlan:
    """Classify the query into the direct or retrieval route. On gateway
    failure the safe default is retrieval: over-retrieve rather than risk an
    ungrounded answer."""
    prompt = render_prompt(load_prompt("plan"), query=query_text, history=render_history(history))
    request = ChatRequest(messages=(ChatMessage(role="user", content=prompt),), tag="plan")
    try:
        doc = complete_json(client, request, "plan", on_call=on_call)
    except LlmError as exc:
        if on_warning is not None:
            on_warning(f"planner failed, defaulting to retrieval: {exc}")
        return PipelinePlan(route="retrieval", use_web=False)
    return PipelinePlan(route=doc["route"], use_web=doc["use_web"])


# --------------------------------------------------------------------------
# Turn execution
# --------------------------------------------------------------------------


def _collector() -> tuple[list[dict], Callable[[LlmCallRecord], None]]:
    records: list[dict] = []
    return records, lambda record: records.append(record.to_json())


@dataclass
class _SubOutcome:
    index: int
    events: list[tuple[str, dict]]
    kept_chunks: list[RetrievedChunk]
    sub_answer: str | None
    error: str | None = None


def run_turn(
    session: Session,
    user_text: str,
    deps: Deps,
    config: EngineConfig = EngineConfig(),
    on_event: Callable[[TraceEvent], None] | None = None,
) -> TurnResult:
    """Run one conversational turn; may suspend with clarification questions."""
    if session.pending_clarification is not None:
        raise TurnStateError("session has a pending clarification; call resume_with_clarification")
    if not user_text.strip():
        raise ValueError("user_text must be non-empty")
    if not session._turn_lock.acquire(blocking=False):
        raise TurnStateError("a turn is already in flight for this session")
    try:
        trace = TraceRecorder(on_event)
        history = session.history_window(config.history_window)
        clarify_calls: list[dict] | None = None
        if config.clarify_enabled and (not session.turns or not config.clarify_first_turn_only):
            records, sink = _collector()
            outcome = clarify(deps.llm, user_text, history, on_warning=trace.warning, on_call=sink)
            if outcome.decision == "ask":
                trace.emit(
                    "clarification_asked",
                    {"questions": list(outcome.questions), "llm": records},
                )
                session.pending_clarification = PendingClarification(
                    query=user_text, questions=list(outcome.questions)
                )
                return TurnResult(answer=None, trace=trace.events, suspended=True)
            clarify_calls = records
        return _run_from_plan(session, user_text, user_text, history, deps, config, trace, clarify_calls)
    finally:
        session._turn_lock.release()


def resume_with_clarification(
    session: Session,
    user_reply: str,
    deps: Deps,
    config: EngineConfig = EngineConfig(),
    on_event: Callable[[TraceEvent], None] | None = None,
) -> TurnResult:
    """Fold the clarification reply into the suspended turn and continue."""
    if session.pending_clarification is None:
        raise TurnStateError("no pending clarification to resume")
    if not session._turn_lock.acquire(blocking=False):
        raise TurnStateError("a turn is already in flight for this session")
    try:
        pending = session.pending_clarification
        session.pending_clarification = None
        trace = TraceRecorder(on_event)
        history = session.history_window(config.history_window)
        if user_reply.strip():
            questions = "\n".join(f"Q: {q}" for q in pending.questions)
            query_context = f"{pending.query}\n\nClarifications:\n{questions}\nA: {user_reply.strip()}"
        else:
            trace.warning("empty clarification reply; proceeding with the original query")
            query_context = pending.query
        return _run_from_plan(session, query_context, pending.query, history, deps, config, trace, None)
    finally:
        session._turn_lock.release()


def _run_from_plan(
    session: Session,
    query_text: str,
    display_text: str,
    history: History,
    deps: Deps,
    config: EngineConfig,
    trace: TraceRecorder,
    clarify_calls: list[dict] | None,
) -> TurnResult:
    records, sink = _collector()
    chosen = plan(deps.llm, query_text, history, on_warning=trace.warning, on_call=sink)
    payload: dict = {"route": chosen.route, "use_web": chosen.use_web, "llm": records}
    if clarify_calls is not None:
        payload["clarify_llm"] = clarify_calls
    trace.emit("plan_chosen", payload)

    if chosen.route == "direct":
        return _direct_turn(session, query_text, display_text, history, deps, config, trace)
    return _retrieval_turn(session, query_text, display_text, history, deps, config, trace, chosen)


def _direct_turn(
    session: Session,
    query_text: str,
    display_text: str,
    history: History,
    deps: Deps,
    config: EngineConfig,
    trace: TraceRecorder,
) -> TurnResult:
    records, sink = _collector()
    try:
        draft = generate(deps.llm, query_text, [], history, on_call=sink)
    except LlmError as exc:
        trace.emit("error", {"message": f"generation failed: {exc}", "llm": records})
        return TurnResult(answer=None, trace=trace.events, failed=True, error=str(exc))
    answer = attach_citations(draft, [], config.bm25_params)
    trace.emit("final_answer", {**answer.to_json(), "llm": records})
    session.turns.append(Turn(user_text=display_text, answer=answer))
    return TurnResult(answer=answer, trace=trace.events)


def _retrieval_turn(
    session: Session,
    query_text: str,
    display_text: str,
    history: History,
    deps: Deps,
    config: EngineConfig,
    trace: TraceRecorder,
    chosen: PipelinePlan,
) -> TurnResult:
    records, sink = _collector()
    rewritten = rewrite(
        deps.llm, query_text, history, config.horizon_date, on_warning=trace.warning, on_call=sink
    )
    trace.emit(
        "query_rewritten",
        {"text": rewritten.text, "constraints": rewritten.constraints.to_json(), "llm": records},
    )

    records, sink = _collector()
    subplan = decompose(deps.llm, rewritten, config.max_sub, on_warning=trace.warning, on_call=sink)
    trace.emit(
        "subqueries_planned", {"subqueries": list(subplan.sub_queries), "llm": records}
    )

    outcomes = _fan_out(subplan.sub_queries, rewritten.constraints, chosen.use_web, deps, config)
    failed: _SubOutcome | None = None
    for outcome in outcomes:
        for kind, payload in outcome.events:
            trace.emit(kind, payload)
        if outcome.error is not None and failed is None:
            failed = outcome
    if failed is not None:
        trace.emit(
            "error",
            {"message": f"sub-query {failed.index} generation failed: {failed.error}"},
        )
        return TurnResult(answer=None, trace=trace.events, failed=True, error=failed.error)

    sub_answer_block = "\n\n".join(
        f"Sub-question {o.index + 1}: {q}\nSub-answer: {o.sub_answer}"
        for o, q in zip(outcomes, subplan.sub_queries)
    )
    prompt = render_prompt(
        load_prompt("compose"), query=rewritten.text, sub_answers=sub_answer_block
    )
    records, sink = _collector()
    try:
        composed = complete(
            deps.llm,
            ChatRequest(messages=(ChatMessage(role="user", content=prompt),), tag="compose"),
            on_call=sink,
        ).strip()
    except LlmError as exc:
        trace.emit("error", {"message": f"composition failed: {exc}", "llm": records})
        return TurnResult(answer=None, trace=trace.events, failed=True, error=str(exc))
    trace.emit("final_draft", {"text": composed, "llm": records})

    all_kept: list[RetrievedChunk] = []
    seen_ids: set[str] = set()
    for outcome in outcomes:
        for item in outcome.kept_chunks:
            if item.item_id not in seen_ids:
                seen_ids.add(item.item_id)
                all_kept.append(item)
    final_passages = fuse(all_kept)
    draft = AnswerDraft(
        text=composed, used_passage_ids=tuple(p.source_id for p in final_passages)
    )
    answer = attach_citations(draft, final_passages, config.bm25_params)
    trace.emit(
        "citations_attached",
        {
            "citations": [c.to_json() for c in answer.citations],
            "passages": [p.source_id for p in final_passages],
        },
    )

    for _ in range(config.max_rounds):
        records, sink = _collector()
        report = reflect(
            deps.llm,
            rewritten.text,
            answer.text,
            final_passages,
            on_warning=trace.warning,
            on_call=sink,
        )
        trace.emit(
            "reflection",
            {
                "verdict": report.verdict,
                "issues": [issue.to_json() for issue in report.issues],
                "llm": records,
            },
        )
        if report.verdict == "pass":
            break
        records, sink = _collector()
        answer = polish(
            deps.llm,
            answer,
            report,
            final_passages,
            query_text=rewritten.text,
            params=config.bm25_params,
            on_warning=trace.warning,
            on_call=sink,
        )
        trace.emit("polished", {"text": answer.text, "llm": records})

    trace.emit("final_answer", answer.to_json())
    session.turns.append(Turn(user_text=display_text, answer=answer))
    return TurnResult(answer=answer, trace=trace.events)


# --------------------------------------------------------------------------
# Sub-query fan-out
# --------------------------------------------------------------------------


def _fan_out(
    sub_queries: tuple[str, ...],
    constraints: RouteConstraints,
    use_web: bool,
    deps: Deps,
    config: EngineConfig,
) -> list[_SubOutcome]:
    """Process sub-queries concurrently; outcomes return in sub-query order
    so trace events merge deterministically."""
    if len(sub_queries) == 1:
        return [_run_subquery(0, sub_queries[0], constraints, use_web, deps, config)]
    with ThreadPoolExecutor(max_workers=max(1, config.subquery_fanout)) as pool:
        futures = [
            pool.submit(_run_subquery, i, q, constraints, use_web, deps, config)
            for i, q in enumerate(sub_queries)
        ]
        return [f.result() for f in futures]


def _run_subquery(
    index: int,
    sub_query: str,
    constraints: RouteConstraints,
    use_web: bool,
    deps: Deps,
    config: EngineConfig,
) -> _SubOutcome:
    events: list[tuple[str, dict]] = []

    def warn(message: str) -> None:
        events.append(("warning", {"message": message, "sub_query_index": index}))

    shard_keys = select_shards(deps.catalog, constraints)
    events.append(
        ("shards_selected", {"sub_query_index": index, "shards": [str(k) for k in shard_keys]})
    )

    hybrid_hits = hybrid_retrieve(
        deps.catalog,
        deps.embedder,
        sub_query,
        constraints,
        config.hybrid_k_per_shard,
        on_warning=warn,
    )
    per_shard: dict[str, int] = {}
    for item in hybrid_hits:
        key = str(item.shard_key)
        per_shard[key] = per_shard.get(key, 0) + 1
    events.append(
        (
            "chunks_retrieved",
            {
                "sub_query_index": index,
                "retriever": "hybrid",
                "count": len(hybrid_hits),
                "per_shard": per_shard,
                "ids": [item.item_id for item in hybrid_hits],
            },
        )
    )

    bm25_hits = bm25_retrieve(deps.catalog, sub_query, constraints, config.bm25_cap, on_warning=warn)
    events.append(
        (
            "chunks_retrieved",
            {
                "sub_query_index": index,
                "retriever": "bm25",
                "count": len(bm25_hits),
                "ids": [item.item_id for item in bm25_hits],
            },
        )
    )

    pool: list[RetrievedChunk] = list(hybrid_hits) + list(bm25_hits)
    if use_web and deps.web is not None:
        web_hits = web_retrieve(deps.web, sub_query, config.web_n, on_warning=warn)
        events.append(
            (
                "chunks_retrieved",
                {
                    "sub_query_index": index,
                    "retriever": "web",
                    "count": len(web_hits),
                    "ids": [item.item_id for item in web_hits],
                },
            )
        )
        pool.extend(web_hits)

    kept = rerank(sub_query, pool, deps.reranker, config.rerank_k, on_warning=warn)
    events.append(
        (
            "reranked",
            {
                "sub_query_index": index,
                "ids": [item.item_id for item in kept],
                "scores": [item.score for item in kept],
            },
        )
    )

    passages = fuse(kept)
    events.append(
        (
            "passages_fused",
            {
                "sub_query_index": index,
                "passages": [
                    {"source_id": p.source_id, "members": list(p.member_chunks)} for p in passages
                ],
            },
        )
    )

    records, sink = _collector()
    filtered = filter_passages(
        deps.llm if config.llm_filter else None,
        sub_query,
        passages,
        config.jaccard_threshold,
        llm_stage=config.llm_filter,
        on_warning=warn,
        on_call=sink,
    )
    filter_payload: dict = {
        "sub_query_index": index,
        "kept": [p.source_id for p in filtered],
        "dropped": [p.source_id for p in passages if p not in filtered],
    }
    if records:
        filter_payload["llm"] = records
    events.append(("passages_filtered", filter_payload))

    records, sink = _collector()
    try:
        draft = generate(deps.llm, sub_query, filtered, [], on_call=sink)
    except LlmError as exc:
        events.append(("warning", {"message": f"sub-answer generation failed: {exc}", "sub_query_index": index, "llm": records}))
        return _SubOutcome(index=index, events=events, kept_chunks=[], sub_answer=None, error=str(exc))
    events.append(
        ("sub_answer", {"sub_query_index": index, "text": draft.text, "llm": records})
    )

    member_ids = {cid for p in filtered for cid in p.member_chunks}
    kept_chunks = [item for item in kept if item.item_id in member_ids]
    return _SubOutcome(index=index, events=events, kept_chunks=kept_chunks, sub_answer=draft.text)
