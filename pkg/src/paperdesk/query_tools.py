"""Query tools: active clarification, conversational rewriting with
routing-constraint extraction, and decomposition into sub-queries.

Every operation degrades instead of aborting: a gateway failure falls back
to a usable value (proceed / the original query / a single-element plan) so
a turn is never lost to a flaky model call.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from datetime import date

from .llm import (
    CallSink,
    ChatMessage,
    ChatRequest,
    LlmClient,
    LlmError,
    complete_json,
    load_prompt,
    render_prompt,
)
from .retrieval import RouteConstraints, WarningSink

logger = logging.getLogger(__name__)

MAX_CLARIFY_QUESTIONS = 3
DEFAULT_MAX_SUB = 4
DEFAULT_HORIZON = date(2024, 6, 30)  # corpus horizon, not wall clock, so runs are stable

History = list[tuple[str, str]]  # (user text, answer text) per prior turn


@dataclass(frozen=True)
class ClarificationOutcome:
    decision: str  # "proceed" | "ask"
    questions: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.decision == "proceed" and self.questions:
            raise ValueError("proceed outcome cannot carry questions")


@dataclass(frozen=True)
class RewrittenQuery:
    text: str
    constraints: RouteConstraints = field(default_factory=RouteConstraints)


@dataclass(frozen=True)
class SubQueryPlan:
    sub_queries: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.sub_queries or any(not q for q in self.sub_queries):
            raise ValueError("sub-queries must be non-empty")


def render_history(history: History) -> str:
    if not history:
        return "(no prior turns)"
    lines = []
    for user_text, answer_text in history:
        lines.append(f"User: {user_text}")
        lines.append(f"Assistant: {answer_text}")
    return "\n".join(lines)


def _tool_request(tag: str, prompt: str) -> ChatRequest:
    return ChatRequest(messages=(ChatMessage(role="user", content=prompt),), tag=tag)


def clarify(
    client: LlmClient,
    query: str,
    history: History,
    on_warning: WarningSink | None = None,
    on_call: CallSink | None = None,
) -> ClarificationOutcome:
    """Ask up to 3 questions when the query lacks a discipline or scope;
    clarification is optional and never blocks the turn."""
    if not query.strip():
        raise ValueError("query must be non-empty")
    prompt = render_prompt(load_prompt("clarify"), query=query, history=render_history(history))
    try:
        doc = complete_json(client, _tool_request("clarify", prompt), "clarify", on_call=on_call)
    except LlmError as exc:
        _warn(on_warning, f"clarification skipped: {exc}")
        return ClarificationOutcome(decision="proceed")
    if doc["decision"] == "ask":
        return ClarificationOutcome(
            decision="ask", questions=tuple(doc["questions"][:MAX_CLARIFY_QUESTIONS])
        )
    return ClarificationOutcome(decision="proceed")


def rewrite(
    client: LlmClient,
    query: str,
    history: History,
    horizon_date: date = DEFAULT_HORIZON,
    on_warning: WarningSink | None = None,
    on_call: CallSink | None = None,
) -> RewrittenQuery:
    """Standalone rewrite of a conversational query plus extracted
    time/domain constraints; falls back to the original query on failure."""
    prompt = render_prompt(
        load_prompt("rewrite"),
        query=query,
        history=render_history(history),
        horizon_date=horizon_date.isoformat(),
    )
    try:
        doc = complete_json(client, _tool_request("rewrite", prompt), "rewrite", on_call=on_call)
    except LlmError as exc:
        _warn(on_warning, f"rewrite fell back to the original query: {exc}")
        return RewrittenQuery(text=query)
    constraints = _constraints_from(doc, on_warning)
    return RewrittenQuery(text=doc["text"], constraints=constraints)


def _constraints_from(doc: dict, on_warning: WarningSink | None) -> RouteConstraints:
    time_range: tuple[date, date] | None = None
    start_raw, end_raw = doc.get("time_start"), doc.get("time_end")
    if start_raw and end_raw:
        try:
            start, end = date.fromisoformat(start_raw), date.fromisoformat(end_raw)
            if start > end:
                start, end = end, start
            time_range = (start, end)
        except ValueError:
            _warn(on_warning, f"ignored unparseable time range {start_raw!r}..{end_raw!r}")
    domains_raw = doc.get("domains")
    domains = frozenset(domains_raw) if domains_raw else None
    return RouteConstraints(time_range=time_range, domains=domains)


def decompose(
    client: LlmClient,
    rewritten: RewrittenQuery,
    max_sub: int = DEFAULT_MAX_SUB,
    on_warning: WarningSink | None = None,
    on_call: CallSink | None = None,
) -> SubQueryPlan:
    """1..max_sub sub-queries; an atomic query passes through unchanged and
    any failure yields the single-element plan."""
    if max_sub < 1:
        raise ValueError("max_sub must be >= 1")
    prompt = render_prompt(load_prompt("decompose"), query=rewritten.text, max_sub=max_sub)
    try:
        subqueries = complete_json(
            client, _tool_request("decompose", prompt), "decompose", on_call=on_call
        )
    except LlmError as exc:
        _warn(on_warning, f"decomposition fell back to a single sub-query: {exc}")
        return SubQueryPlan(sub_queries=(rewritten.text,))
    return SubQueryPlan(sub_queries=tuple(subqueries[:max_sub]))


def _warn(sink: WarningSink | None, message: str) -> None:
    logger.warning(message)
    if sink is not None:
        sink(message)
