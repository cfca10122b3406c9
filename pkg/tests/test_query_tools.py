"""Query tools: clarify, rewrite (with constraint extraction), decompose."""

from __future__ import annotations

from datetime import date

import pytest

from paperdesk.llm import ScriptedLlmClient
from paperdesk.query_tools import (
    ClarificationOutcome,
    RewrittenQuery,
    SubQueryPlan,
    clarify,
    decompose,
    rewrite,
)

from conftest import scripted


class FailingClient:
    def complete(self, request):
        from paperdesk.llm import LlmTimeoutError

        raise LlmTimeoutError("gateway timed out")


class TestClarify:
    def test_self_contained_proceeds(self):
        client = scripted(
            [{"tag": "clarify", "match": "What is PPO?", "response": '{"decision": "proceed"}'}]
        )
        outcome = clarify(client, "What is PPO?", [])
        assert outcome.decision == "proceed" and outcome.questions == ()

    def test_vague_query_asks(self):
        client = scripted(
            [
                {
                    "tag": "clarify",
                    "match": "latest methods",
                    "response": '{"decision": "ask", "questions": ["Which research area (e.g., NLP, RL)?"]}',
                }
            ]
        )
        outcome = clarify(client, "What are the latest methods?", [])
        assert outcome.decision == "ask"
        assert outcome.questions == ("Which research area (e.g., NLP, RL)?",)

    def test_gateway_failure_proceeds_with_warning(self):
        warnings: list[str] = []
        outcome = clarify(FailingClient(), "anything", [], on_warning=warnings.append)
        assert outcome.decision == "proceed"
        assert warnings

    def test_question_cap_at_three(self):
        questions = [f"q{i}?" for i in range(5)]
        client = scripted(
            [
                {
                    "tag": "clarify",
                    "response": '{"decision": "ask", "questions": '
                    + str(questions).replace("'", '"')
                    + "}",
                }
            ]
        )
        outcome = clarify(client, "vague", [])
        assert len(outcome.questions) == 3

    def test_invariant_proceed_has_no_questions(self):
        with pytest.raises(ValueError):
            ClarificationOutcome(decision="proceed", questions=("q?",))


class TestRewrite:
    def test_conversational_follow_up(self):
        client = scripted(
            [
                {
                    "tag": "rewrite",
                    "match": "What about its variants?",
                    "response": '{"text": "What are the variants of PPO (Proximal Policy Optimization)?"}',
                }
            ]
        )
        history = [("What is PPO?", "PPO is a policy-gradient algorithm.")]
        out = rewrite(client, "What about its variants?", history)
        assert out.text == "What are the variants of PPO (Proximal Policy Optimization)?"
        assert out.constraints.is_empty

    def test_standalone_identity(self):
        query = "What is the KL penalty in PPO?"
        client = scripted([{"tag": "rewrite", "response": f'{{"text": "{query}"}}'}])
        out = rewrite(client, query, [])
        assert out.text == query
        assert out.constraints.is_empty

    def test_constraint_extraction(self):
        client = scripted(
            [
                {
                    "tag": "rewrite",
                    "match": "2024 cs.CL work on RAG",
                    "response": '{"text": "Survey of 2024 cs.CL research on retrieval-augmented generation", '
                    '"time_start": "2024-01-01", "time_end": "2024-12-31", "domains": ["cs.CL"]}',
                }
            ]
        )
        out = rewrite(client, "summarize 2024 cs.CL work on RAG", [])
        assert out.constraints.time_range == (date(2024, 1, 1), date(2024, 12, 31))
        assert out.constraints.domains == frozenset({"cs.CL"})

    def test_gateway_failure_falls_back(self):
        warnings: list[str] = []
        out = rewrite(FailingClient(), "original query", [], on_warning=warnings.append)
        assert out == RewrittenQuery(text="original query")
        assert warnings

    def test_horizon_date_rendered_into_prompt(self):
        seen: dict = {}

        class SpyClient:
            def complete(self, request):
                seen["prompt"] = request.full_text
                return '{"text": "q"}'

        rewrite(SpyClient(), "q", [], horizon_date=date(2024, 6, 30))
        assert "2024-06-30" in seen["prompt"]


class TestDecompose:
    def test_two_subqueries(self):
        rewritten = RewrittenQuery(text="Summarize the recent latest developments and variants of PPO")
        client = scripted(
            [
                {
                    "tag": "decompose",
                    "response": '{"subqueries": ["What recent algorithmic developments extend PPO?", '
                    '"What named variants of PPO exist and how do they differ?"]}',
                }
            ]
        )
        plan = decompose(client, rewritten)
        assert plan.sub_queries == (
            "What recent algorithmic developments extend PPO?",
            "What named variants of PPO exist and how do they differ?",
        )

    def test_atomic_passthrough(self):
        rewritten = RewrittenQuery(text="What is the KL penalty in PPO?")
        client = scripted(
            [{"tag": "decompose", "response": '{"subqueries": ["What is the KL penalty in PPO?"]}'}]
        )
        plan = decompose(client, rewritten)
        assert plan.sub_queries == ("What is the KL penalty in PPO?",)

    def test_schema_failure_single_element_fallback(self):
        rewritten = RewrittenQuery(text="some question")
        client = scripted([{"tag": "decompose", "response": "never valid json"}])
        warnings: list[str] = []
        plan = decompose(client, rewritten, on_warning=warnings.append)
        assert plan == SubQueryPlan(sub_queries=("some question",))
        assert warnings

    def test_max_sub_clamp(self):
        rewritten = RewrittenQuery(text="broad question")
        client = scripted(
            [{"tag": "decompose", "response": '{"subqueries": ["a", "b", "c", "d", "e", "f"]}'}]
        )
        assert len(decompose(client, rewritten, max_sub=4).sub_queries) == 4

    def test_gateway_failure_fallback(self):
        plan = decompose(FailingClient(), RewrittenQuery(text="q"))
        assert plan.sub_queries == ("q",)
