"""Pairwise preference evaluation of two answer sets with an LLM judge.

Each item is judged twice with the A/B presentation order swapped; when the
two orderings disagree in direction the verdict is a tie, which cancels
judge position bias. Correctness is deliberately not judged by the LLM and
is left to humans.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

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

logger = logging.getLogger(__name__)

CRITERIA = ("richness", "relevance")

CRITERION_DEFINITIONS = {
    "richness": (
        "How much depth, scope, and useful context the answer offers: does it "
        "explain and situate the topic rather than only stating the bare fact?"
    ),
    "relevance": (
        "How directly the answer addresses the question asked: content that "
        "does not bear on the question counts against it, however detailed."
    ),
}


@dataclass(frozen=True)
class EvalItem:
    question: str
    answer_a: str
    answer_b: str
    system_a: str
    system_b: str

    def __post_init__(self) -> None:
        for name in ("question", "answer_a", "answer_b", "system_a", "system_b"):
            if not getattr(self, name):
                raise ValueError(f"eval item field {name} must be non-empty")

    def swapped(self) -> "EvalItem":
        return EvalItem(
            question=self.question,
            answer_a=self.answer_b,
            answer_b=self.answer_a,
            system_a=self.system_b,
            system_b=self.system_a,
        )


@dataclass(frozen=True)
class Judgment:
    criterion: str
    verdict: str  # "win" | "tie" | "lose", relative to system_a

    def __post_init__(self) -> None:
        if self.criterion not in CRITERIA:
            raise ValueError(f"unknown criterion {self.criterion!r}")
        if self.verdict not in ("win", "tie", "lose"):
            raise ValueError(f"bad verdict {self.verdict!r}")


def load_items(path: str | Path) -> list[EvalItem]:
    items = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            items.append(EvalItem(**json.loads(line)))
    return items


def _ask_judge(
    client: LlmClient, item: EvalItem, criterion: str, on_call: CallSink | None
) -> str:
    prompt = render_prompt(
        load_prompt("judge"),
        criterion=criterion,
        criterion_definition=CRITERION_DEFINITIONS[criterion],
        question=item.question,
        answer_a=item.answer_a,
        answer_b=item.answer_b,
    )
    request = ChatRequest(messages=(ChatMessage(role="user", content=prompt),), tag="judge")
    return complete_json(client, request, "judge", on_call=on_call)


def judge_pair(
    client: LlmClient,
    item: EvalItem,
    criterion: str,
    on_call: CallSink | None = None,
) -> Judgment:
    """Two order-swapped judge passes; only agreement in direction yields a
    win or lose. Gateway failures propagate so the runner can skip the item."""
    if item.answer_a == item.answer_b:
        return Judgment(criterion=criterion, verdict="tie")
    first = _ask_judge(client, item, criterion, on_call)
    second = _ask_judge(client, item.swapped(), criterion, on_call)
    direction_1 = {"A": "a", "B": "b", "tie": "tie"}[first]
    direction_2 = {"A": "b", "B": "a", "tie": "tie"}[second]  # presented swapped
    if direction_1 == direction_2 == "a":
        verdict = "win"
    elif direction_1 == direction_2 == "b":
        verdict = "lose"
    else:
        verdict = "tie"
    return Judgment(criterion=criterion, verdict=verdict)


@dataclass
class EvalRun:
    judgments: list[tuple[EvalItem, Judgment]]
    skipped: list[tuple[EvalItem, str, str]]  # item, criterion, reason

    def to_json(self) -> dict:
        return {
            "judged": [
                {
                    "question": item.question,
                    "criterion": judgment.criterion,
                    "verdict": judgment.verdict,
                }
                for item, judgment in self.judgments
            ],
            "skipped": [
                {"question": item.question, "criterion": criterion, "reason": reason}
                for item, criterion, reason in self.skipped
            ],
            "table": aggregate(j for _, j in self.judgments),
        }


def run_eval(
    client: LlmClient,
    items: list[EvalItem],
    criteria: tuple[str, ...] = CRITERIA,
    max_workers: int = 8,
) -> EvalRun:
    tasks = [(item, criterion) for item in items for criterion in criteria]

    def one(task: tuple[EvalItem, str]):
        item, criterion = task
        try:
            return item, criterion, judge_pair(client, item, criterion), None
        except LlmError as exc:
            return item, criterion, None, str(exc)

    run = EvalRun(judgments=[], skipped=[])
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        for item, criterion, judgment, error in pool.map(one, tasks):
            if judgment is None:
                logger.warning("skipped %r on %s: %s", item.question[:40], criterion, error)
                run.skipped.append((item, criterion, error or "unknown"))
            else:
                run.judgments.append((item, judgment))
    return run


def aggregate(judgments: Iterable[Judgment]) -> dict[str, dict[str, int]]:
    """Win/tie/lose counts per criterion."""
    table = {criterion: {"win": 0, "tie": 0, "lose": 0} for criterion in CRITERIA}
    for judgment in judgments:
        table[judgment.criterion][judgment.verdict] += 1
    return table


def format_table(table: dict[str, dict[str, int]]) -> str:
    header = f"{'Criterion':<12} {'Win':>5} {'Tie':>5} {'Lose':>5}"
    lines = [header, "-" * len(header)]
    for criterion in CRITERIA:
        counts = table.get(criterion, {"win": 0, "tie": 0, "lose": 0})
        lines.append(
            f"{criterion:<12} {counts['win']:>5} {counts['tie']:>5} {counts['lose']:>5}"
        )
    return "\n".join(lines)
