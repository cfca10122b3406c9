"""Answer refinement: reflect on a draft's accuracy and completeness, then
polish it according to the feedback. Both steps degrade gracefully; a failed
reflection passes the draft through and a failed polish keeps the original.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

from .generation import AnswerDraft, AnswerWithCitations, attach_citations, render_passages
from .index import Bm25Params
from .llm import (
    CallSink,
    ChatMessage,
    ChatRequest,
    LlmClient,
    LlmError,
    complete,
    complete_json,
    load_prompt,
    render_prompt,
)
from .postprocess import Passage
from .retrieval import WarningSink

logger = logging.getLogger(__name__)

DEFAULT_MAX_ROUNDS = 1


@dataclass(frozen=True)
class ReflectionIssue:
    kind: str  # "accuracy" | "completeness" | "grammar" | "semantics"
    note: str

    def to_json(self) -> dict:
        return {"kind": self.kind, "note": self.note}


@dataclass(frozen=True)
class ReflectionReport:
    verdict: str  # "pass" | "needs_fix"
    issues: tuple[ReflectionIssue, ...] = ()

    def __post_init__(self) -> None:
        if self.verdict == "pass" and self.issues:
            raise ValueError("a passing report cannot carry issues")


def reflect(
    client: LlmClient,
    query_text: str,
    answer_text: str,
    passages: list[Passage],
    on_warning: WarningSink | None = None,
    on_call: CallSink | None = None,
) -> ReflectionReport:
    """Structured review of a draft against the question and its evidence.
    Refinement is optional: any gateway failure yields a pass verdict."""
    if not answer_text:
        raise ValueError("answer_text must be non-empty")
    prompt = render_prompt(
        load_prompt("reflect"),
        query=query_text,
        answer=answer_text,
        passages=render_passages(passages),
    )
    request = ChatRequest(messages=(ChatMessage(role="user", content=prompt),), tag="reflect")
    try:
        doc = complete_json(client, request, "reflect", on_call=on_call)
    except LlmError as exc:
        _warn(on_warning, f"reflection skipped, accepting draft: {exc}")
        return ReflectionReport(verdict="pass")
    return ReflectionReport(
        verdict=doc["verdict"],
        issues=tuple(ReflectionIssue(**issue) for issue in doc["issues"]),
    )


def polish(
    client: LlmClient,
    answer: AnswerWithCitations,
    report: ReflectionReport,
    passages: list[Passage],
    query_text: str = "",
    params: Bm25Params = Bm25Params(),
    on_warning: WarningSink | None = None,
    on_call: CallSink | None = None,
) -> AnswerWithCitations:
    """Revise the answer to address each reported issue.

    Citations are recomputed on the new text, never patched, so stale spans
    cannot survive. A gateway failure returns the original answer unchanged.
    """
    if report.verdict != "needs_fix":
        raise ValueError("polish requires a needs_fix report")
    issues_text = "\n".join(f"- {issue.kind}: {issue.note}" for issue in report.issues) or "- (unspecified)"
    prompt = render_prompt(
        load_prompt("polish"),
        query=query_text,
        answer=answer.text,
        passages=render_passages(passages),
        issues=issues_text,
    )
    request = ChatRequest(messages=(ChatMessage(role="user", content=prompt),), tag="polish")
    try:
        revised = complete(client, request, on_call=on_call).strip()
    except LlmError as exc:
        _warn(on_warning, f"polish failed, keeping draft: {exc}")
        return answer
    draft = AnswerDraft(text=revised, used_passage_ids=tuple(p.source_id for p in passages))
    return attach_citations(draft, passages, params)


def _warn(sink: WarningSink | None, message: str) -> None:
    logger.warning(message)
    if sink is not None:
        sink(message)
