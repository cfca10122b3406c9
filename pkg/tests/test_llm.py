"""LLM gateway: scripted client, retries, JSON parsing/repair, HTTP mapping."""

from __future__ import annotations

import json

import httpx
import pytest

from paperdesk.llm import (
    ChatMessage,
    ChatRequest,
    HttpLlmClient,
    LlmEmptyCompletionError,
    LlmNoScriptError,
    LlmProviderError,
    LlmSchemaError,
    LlmTimeoutError,
    LlmTransportError,
    ScriptedLlmClient,
    complete,
    complete_json,
    extract_json_object,
    load_prompt,
    render_prompt,
)


def request(tag: str, content: str = "hello") -> ChatRequest:
    return ChatRequest(messages=(ChatMessage(role="user", content=content),), tag=tag)


class FlakyClient:
    """Raises a transient failure for the first `fail_times` calls."""

    def __init__(self, inner, fail_times: int):
        self.inner = inner
        self.remaining = fail_times
        self.calls = 0

    def complete(self, req: ChatRequest) -> str:
        self.calls += 1
        if self.remaining > 0:
            self.remaining -= 1
            raise LlmTransportError("connection reset")
        return self.inner.complete(req)


class TestScriptedClient:
    def test_keyed_on_tag(self):
        client = ScriptedLlmClient.from_entries(
            [{"tag": "rewrite", "response": "the canned rewrite"}]
        )
        assert complete(client, request("rewrite")) == "the canned rewrite"

    def test_no_matching_script_fails(self):
        client = ScriptedLlmClient.from_entries([{"tag": "rewrite", "response": "x"}])
        with pytest.raises(LlmNoScriptError):
            complete(client, request("decompose"))

    def test_match_substring(self):
        client = ScriptedLlmClient.from_entries(
            [
                {"tag": "generate", "match": "PPO", "response": "about ppo"},
                {"tag": "generate", "response": "fallthrough"},
            ]
        )
        assert complete(client, request("generate", "what is PPO?")) == "about ppo"
        assert complete(client, request("generate", "other")) == "fallthrough"

    def test_determinism(self):
        client = ScriptedLlmClient.from_entries([{"response": "same"}])
        req = request("any", "identical request")
        assert client.complete(req) == client.complete(req)

    def test_from_file(self, tmp_path):
        path = tmp_path / "script.json"
        path.write_text(json.dumps([{"tag": "t", "response": "from file"}]))
        client = ScriptedLlmClient.from_file(path)
        assert complete(client, request("t")) == "from file"


class TestComplete:
    def test_transient_then_success(self):
        inner = ScriptedLlmClient.from_entries([{"response": "ok"}])
        flaky = FlakyClient(inner, fail_times=1)
        records = []
        text = complete(flaky, request("t"), retries=2, backoff_s=0.0, on_call=records.append)
        assert text == "ok"
        assert flaky.calls == 2
        assert len(records) == 1 and records[0].retries == 1 and records[0].outcome == "ok"

    def test_retries_exhausted(self):
        flaky = FlakyClient(ScriptedLlmClient.from_entries([{"response": "ok"}]), fail_times=5)
        records = []
        with pytest.raises(LlmTransportError):
            complete(flaky, request("t"), retries=2, backoff_s=0.0, on_call=records.append)
        assert flaky.calls == 3
        assert records[0].outcome == "LlmTransportError"

    def test_empty_completion(self):
        client = ScriptedLlmClient.from_entries([{"response": "   "}])
        with pytest.raises(LlmEmptyCompletionError):
            complete(client, request("t"), backoff_s=0.0)

    def test_request_validation(self):
        with pytest.raises(ValueError):
            ChatRequest(messages=(), tag="t")
        with pytest.raises(ValueError):
            ChatRequest(messages=(ChatMessage(role="assistant", content="x"),), tag="t")
        with pytest.raises(ValueError):
            ChatMessage(role="user", content="")


class TestExtractJson:
    def test_plain_object(self):
        assert extract_json_object('{"a": 1}') == '{"a": 1}'

    def test_prose_then_json(self):
        text = 'Sure! Here is the JSON you asked for: {"subqueries": ["a", "b"]} hope that helps'
        assert json.loads(extract_json_object(text)) == {"subqueries": ["a", "b"]}

    def test_braces_inside_strings(self):
        text = 'noise {"a": "curly } inside", "b": {"c": 2}} trailing'
        assert json.loads(extract_json_object(text)) == {"a": "curly } inside", "b": {"c": 2}}

    def test_unbalanced_fails(self):
        with pytest.raises(ValueError):
            extract_json_object('{"a": 1')

    def test_no_object_fails(self):
        with pytest.raises(ValueError):
            extract_json_object("no json here")


class TestCompleteJson:
    def test_direct_parse(self):
        client = ScriptedLlmClient.from_entries(
            [{"tag": "decompose", "response": '{"subqueries": ["a", "b"]}'}]
        )
        assert complete_json(client, request("decompose"), "decompose") == ["a", "b"]

    def test_wrapped_json_extracted(self):
        client = ScriptedLlmClient.from_entries(
            [{"tag": "decompose", "response": 'Sure: {"subqueries": ["a"]} done.'}]
        )
        assert complete_json(client, request("decompose"), "decompose") == ["a"]

    def test_repair_round(self):
        client = ScriptedLlmClient.from_entries(
            [
                # repair request carries the instruction text; match on it first
                {"tag": "plan", "match": "Return only valid JSON", "response": '{"route": "direct"}'},
                {"tag": "plan", "response": "not json at all"},
            ]
        )
        assert complete_json(client, request("plan"), "plan") == {
            "route": "direct",
            "use_web": False,
        }

    def test_irreparable_fails(self):
        client = ScriptedLlmClient.from_entries([{"tag": "plan", "response": "never json"}])
        with pytest.raises(LlmSchemaError):
            complete_json(client, request("plan"), "plan")

    def test_schema_validation(self):
        client = ScriptedLlmClient.from_entries(
            [{"tag": "reflect", "response": '{"verdict": "maybe"}'}]
        )
        with pytest.raises(LlmSchemaError):
            complete_json(client, request("reflect"), "reflect")

    def test_unknown_schema(self):
        client = ScriptedLlmClient.from_entries([{"response": "{}"}])
        with pytest.raises(KeyError):
            complete_json(client, request("t"), "nonexistent")


class TestPrompts:
    def test_render_keeps_json_braces(self):
        rendered = render_prompt('{query} stays, {"json": "examples"} survive, {unknown} too', query="Q")
        assert rendered == 'Q stays, {"json": "examples"} survive, {unknown} too'

    def test_all_templates_load(self):
        for name in ("clarify", "rewrite", "decompose", "plan", "generate",
                     "generate_direct", "compose", "filter", "reflect", "polish", "judge"):
            assert load_prompt(name).strip()


class TestHttpClient:
    def _client(self, handler) -> HttpLlmClient:
        return HttpLlmClient(
            endpoint="https://llm.example/v1/chat/completions",
            model="test-model",
            api_key="key",
            transport=httpx.MockTransport(handler),
        )

    def test_success_round_trip(self):
        captured = {}

        def handler(req: httpx.Request) -> httpx.Response:
            captured["body"] = json.loads(req.content)
            captured["auth"] = req.headers.get("authorization")
            return httpx.Response(
                200, json={"choices": [{"message": {"content": "hi there"}}]}
            )

        client = self._client(handler)
        assert client.complete(request("t", "ping")) == "hi there"
        assert captured["auth"] == "Bearer key"
        assert captured["body"]["messages"] == [{"role": "user", "content": "ping"}]
        assert captured["body"]["model"] == "test-model"

    def test_4xx_is_provider_error(self):
        client = self._client(lambda req: httpx.Response(400, text="bad request"))
        with pytest.raises(LlmProviderError):
            client.complete(request("t"))

    def test_5xx_is_transient(self):
        client = self._client(lambda req: httpx.Response(503, text="overloaded"))
        with pytest.raises(LlmTransportError):
            client.complete(request("t"))

    def test_timeout_mapped(self):
        def handler(req):
            raise httpx.ConnectTimeout("slow")

        client = self._client(handler)
        with pytest.raises(LlmTimeoutError):
            client.complete(request("t"))

    def test_malformed_body_is_provider_error(self):
        client = self._client(lambda req: httpx.Response(200, json={"nope": True}))
        with pytest.raises(LlmProviderError):
            client.complete(request("t"))

    def test_per_tool_model_override(self):
        seen = []

        def handler(req: httpx.Request) -> httpx.Response:
            seen.append(json.loads(req.content)["model"])
            return httpx.Response(200, json={"choices": [{"message": {"content": "ok"}}]})

        client = HttpLlmClient(
            endpoint="https://llm.example/v1/chat/completions",
            model="default-model",
            tag_models={"rewrite": "small-model"},
            transport=httpx.MockTransport(handler),
        )
        client.complete(request("rewrite"))
        client.complete(request("generate"))
        assert seen == ["small-model", "default-model"]
