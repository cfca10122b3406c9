"""Refinement: reflection reports and feedback-guided polishing."""

from __future__ import annotations

import pytest

from paperdesk.generation import AnswerDraft, attach_citations
from paperdesk.postprocess import Passage
from paperdesk.refinement import ReflectionIssue, ReflectionReport, polish, reflect

from conftest import scripted


def passage(source_id: str, text: str) -> Passage:
    return Passage(source_id=source_id, text=text, member_chunks=(source_id,), best_score=1.0)


PASSAGES = [passage("pA", "alpha beta gamma delta epsilon zeta")]


class TestReflect:
    def test_flags_missing_subtopic(self):
        client = scripted(
            [
                {
                    "tag": "reflect",
                    "response": '{"verdict": "needs_fix", "issues": '
                    '[{"kind": "completeness", "note": "variants are not covered"}]}',
                }
            ]
        )
        report = reflect(client, "q", "draft answer", PASSAGES)
        assert report.verdict == "needs_fix"
        assert len(report.issues) == 1
        assert report.issues[0].kind == "completeness"

    def test_approval(self):
        client = scripted([{"tag": "reflect", "response": '{"verdict": "pass"}'}])
        report = reflect(client, "q", "draft answer", PASSAGES)
        assert report == ReflectionReport(verdict="pass")

    def test_schema_failure_passes_with_warning(self):
        client = scripted([{"tag": "reflect", "response": "not json ever"}])
        warnings: list[str] = []
        report = reflect(client, "q", "draft answer", PASSAGES, on_warning=warnings.append)
        assert report.verdict == "pass"
        assert warnings

    def test_pass_with_issues_invariant(self):
        with pytest.raises(ValueError):
            ReflectionReport(verdict="pass", issues=(("x",),))  # type: ignore[arg-type]


class TestPolish:
    def _answer(self):
        draft = AnswerDraft(
            text="Alpha beta gamma delta epsilon zeta indeed.", used_passage_ids=("pA",)
        )
        return attach_citations(draft, PASSAGES)

    def _report(self):
        return ReflectionReport(
            verdict="needs_fix",
            issues=(ReflectionIssue(kind="completeness", note="cover the rest"),),
        )

    def test_revision_recomputes_citations(self):
        client = scripted(
            [{"tag": "polish", "response": "Alpha beta gamma delta epsilon zeta, now complete."}]
        )
        answer = self._answer()
        revised = polish(client, answer, self._report(), PASSAGES, query_text="q")
        assert revised.text != answer.text
        assert revised.citations  # recomputed on the new text
        assert revised.sentences and revised.sentences[-1][1] == len(revised.text)

    def test_gateway_failure_keeps_original(self):
        answer = self._answer()
        warnings: list[str] = []
        revised = polish(scripted([]), answer, self._report(), PASSAGES, on_warning=warnings.append)
        assert revised == answer
        assert warnings

    def test_requires_needs_fix(self):
        with pytest.raises(ValueError, match="needs_fix"):
            polish(scripted([]), self._answer(), ReflectionReport(verdict="pass"), PASSAGES)
