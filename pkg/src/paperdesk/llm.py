"""Chat-completion gateway: one uniform interface over LLM endpoints.

Tool behaviors are prompt-defined, so prompts live as template files under
paperdesk/prompts/ and every consumer goes through complete()/complete_json()
here. A scripted client keyed on (tag, match substring) makes the whole
pipeline deterministic in tests and offline runs.
"""

from __future__ import annotations

import json
import logging
import re
import threading
import time
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Protocol

logger = logging.getLogger(__name__)

DEFAULT_RETRIES = 2
DEFAULT_BACKOFF_S = 0.25
DEFAULT_MAX_TOKENS = 1024
TOOL_TEMPERATURE = 0.0  # rewrite/decompose/reflect/plan favor determinism
GENERATION_TEMPERATURE = 0.3

REPAIR_INSTRUCTION = "Return only valid JSON matching the requested shape, with no other text."


class LlmError(Exception):
    """Base for all gateway failures."""


class LlmTransportError(LlmError):
    """Transient transport failure; eligible for retry."""


class LlmTimeoutError(LlmTransportError):
    pass


class LlmProviderError(LlmError):
    """The provider rejected the request; not retryable."""


class LlmEmptyCompletionError(LlmError):
    pass


class LlmNoScriptError(LlmError):
    """Scripted client had no entry matching the request."""


class LlmSchemaError(LlmError):
    """Completion failed JSON parsing/validation even after one repair pass."""


@dataclass(frozen=True)
class ChatMessage:
    role: str  # "system" | "user" | "assistant"
    content: str

    def __post_init__(self) -> None:
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"bad message role {self.role!r}")
        if not self.content:
            raise ValueError("message content must be non-empty")


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[ChatMessage, ...]
    tag: str
    temperature: float = TOOL_TEMPERATURE
    max_tokens: int = DEFAULT_MAX_TOKENS

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("request needs at least one message")
        if self.messages[0].role not in ("system", "user"):
            raise ValueError("first message must be system or user")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")

    @property
    def full_text(self) -> str:
        return "\n".join(m.content for m in self.messages)


@dataclass
class LlmCallRecord:
    """One gateway call as it appears in the pipeline trace."""

    tag: str
    latency_ms: float
    retries: int
    outcome: str = "ok"

    def to_json(self) -> dict:
        return {
            "tag": self.tag,
            "latency_ms": round(self.latency_ms, 3),
            "retries": self.retries,
            "outcome": self.outcome,
        }


CallSink = Callable[[LlmCallRecord], None]


class LlmClient(Protocol):
    def complete(self, request: ChatRequest) -> str: ...


# --------------------------------------------------------------------------
# Gateway operations
# --------------------------------------------------------------------------


def complete(
    client: LlmClient,
    request: ChatRequest,
    *,
    retries: int = DEFAULT_RETRIES,
    backoff_s: float = DEFAULT_BACKOFF_S,
    on_call: CallSink | None = None,
) -> str:
    """Run one completion with exponential backoff on transient transport errors.

    Raises the last typed failure once retries are exhausted; non-transient
    failures surface immediately. Every attempt sequence is reported to
    on_call exactly once.
    """
    started = time.perf_counter()
    attempts_used = 0
    try:
        for attempt in range(retries + 1):
            attempts_used = attempt
            try:
                text = client.complete(request)
            except LlmTransportError as exc:
                if attempt == retries:
                    raise
                delay = backoff_s * (2**attempt)
                logger.debug("transient llm failure on %s, retrying in %.2fs: %s", request.tag, delay, exc)
                if delay > 0:
                    time.sleep(delay)
                continue
            if not text or not text.strip():
                raise LlmEmptyCompletionError(f"empty completion for tag {request.tag!r}")
            _record(on_call, request.tag, started, attempts_used, "ok")
            return text
        raise AssertionError("unreachable")
    except LlmError as exc:
        _record(on_call, request.tag, started, attempts_used, type(exc).__name__)
        raise


def complete_json(
    client: LlmClient,
    request: ChatRequest,
    schema_name: str,
    *,
    retries: int = DEFAULT_RETRIES,
    backoff_s: float = DEFAULT_BACKOFF_S,
    on_call: CallSink | None = None,
) -> Any:
    """Completion parsed and validated against a named schema.

    On a malformed completion, one repair re-prompt is appended; a second
    failure raises LlmSchemaError.
    """
    validator = SCHEMAS.get(schema_name)
    if validator is None:
        raise KeyError(f"unknown schema {schema_name!r}")
    text = complete(client, request, retries=retries, backoff_s=backoff_s, on_call=on_call)
    try:
        return validator(parse_json_completion(text))
    except ValueError as first_error:
        repair = ChatRequest(
            messages=request.messages
            + (
                ChatMessage(role="assistant", content=text),
                ChatMessage(role="user", content=REPAIR_INSTRUCTION),
            ),
            tag=request.tag,
            temperature=request.temperature,
            max_tokens=request.max_tokens,
        )
        text = complete(client, repair, retries=retries, backoff_s=backoff_s, on_call=on_call)
        try:
            return validator(parse_json_completion(text))
        except ValueError as exc:
            raise LlmSchemaError(
                f"schema {schema_name!r} violated after repair: {exc} (first error: {first_error})"
            )


def _record(sink: CallSink | None, tag: str, started: float, retries: int, outcome: str) -> None:
    if sink is not None:
        latency_ms = (time.perf_counter() - started) * 1000.0
        sink(LlmCallRecord(tag=tag, latency_ms=latency_ms, retries=retries, outcome=outcome))


# --------------------------------------------------------------------------
# JSON extraction
# --------------------------------------------------------------------------


def extract_json_object(text: str) -> str:
    """First balanced {...} block in text; real models wrap JSON in prose."""
    start = text.find("{")
    if start < 0:
        raise ValueError("no JSON object found in completion")
    depth = 0
    in_string = False
    escaped = False
    for i in range(start, len(text)):
        ch = text[i]
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"':
            in_string = True
        elif ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return text[start : i + 1]
    raise ValueError("unbalanced JSON object in completion")


def parse_json_completion(text: str) -> Any:
    stripped = text.strip()
    try:
        return json.loads(stripped)
    except json.JSONDecodeError:
        pass
    try:
        return json.loads(extract_json_object(stripped))
    except json.JSONDecodeError as exc:
        raise ValueError(f"completion is not valid JSON: {exc.msg}")


# --------------------------------------------------------------------------
# Schemas
# --------------------------------------------------------------------------


def _require_str(value: Any, name: str) -> str:
    if not isinstance(value, str) or not value.strip():
        raise ValueError(f"{name} must be a non-empty string")
    return value.strip()


def _schema_clarify(doc: Any) -> dict:
    if not isinstance(doc, dict):
        raise ValueError("clarify output must be an object")
    decision = doc.get("decision")
    if decision not in ("proceed", "ask"):
        raise ValueError("decision must be 'proceed' or 'ask'")
    questions_raw = doc.get("questions") or []
    if not isinstance(questions_raw, list):
        raise ValueError("questions must be a list")
    questions = [_require_str(q, "question") for q in questions_raw]
    if decision == "ask" and not questions:
        raise ValueError("ask decision needs at least one question")
    return {"decision": decision, "questions": questions}


_DATE_RE = re.compile(r"^\d{4}-\d{2}-\d{2}$")


def _schema_rewrite(doc: Any) -> dict:
    if not isinstance(doc, dict):
        raise ValueError("rewrite output must be an object")
    out: dict = {"text": _require_str(doc.get("text"), "text")}
    for key in ("time_start", "time_end"):
        value = doc.get(key)
        if value is None:
            continue
        if not isinstance(value, str) or not _DATE_RE.match(value):
            raise ValueError(f"{key} must be an ISO date")
        out[key] = value
    domains = doc.get("domains")
    if domains is not None:
        if not isinstance(domains, list):
            raise ValueError("domains must be a list")
        out["domains"] = [_require_str(d, "domain") for d in domains]
    return out


def _schema_decompose(doc: Any) -> list[str]:
    if not isinstance(doc, dict) or not isinstance(doc.get("subqueries"), list):
        raise ValueError("decompose output must be {\"subqueries\": [...]}")
    subqueries = [_require_str(q, "subquery") for q in doc["subqueries"]]
    if not subqueries:
        raise ValueError("subqueries must be non-empty")
    return subqueries


def _schema_plan(doc: Any) -> dict:
    if not isinstance(doc, dict):
        raise ValueError("plan output must be an object")
    route = doc.get("route")
    if route not in ("direct", "retrieval"):
        raise ValueError("route must be 'direct' or 'retrieval'")
    use_web = doc.get("use_web", False)
    if not isinstance(use_web, bool):
        raise ValueError("use_web must be a boolean")
    return {"route": route, "use_web": use_web}


_ISSUE_KINDS = ("accuracy", "completeness", "grammar", "semantics")


def _schema_reflect(doc: Any) -> dict:
    if not isinstance(doc, dict):
        raise ValueError("reflect output must be an object")
    verdict = doc.get("verdict")
    if verdict not in ("pass", "needs_fix"):
        raise ValueError("verdict must be 'pass' or 'needs_fix'")
    issues_raw = doc.get("issues") or []
    if not isinstance(issues_raw, list):
        raise ValueError("issues must be a list")
    issues = []
    for item in issues_raw:
        if not isinstance(item, dict) or item.get("kind") not in _ISSUE_KINDS:
            raise ValueError(f"issue kind must be one of {_ISSUE_KINDS}")
        issues.append({"kind": item["kind"], "note": _require_str(item.get("note"), "issue note")})
    if verdict == "pass":
        issues = []
    return {"verdict": verdict, "issues": issues}


def _schema_filter(doc: Any) -> list[int]:
    if not isinstance(doc, dict) or not isinstance(doc.get("keep"), list):
        raise ValueError("filter output must be {\"keep\": [...]}")
    keep = []
    for value in doc["keep"]:
        if not isinstance(value, int) or isinstance(value, bool):
            raise ValueError("keep entries must be integers")
        keep.append(value)
    return keep


def _schema_judge(doc: Any) -> str:
    if not isinstance(doc, dict) or doc.get("winner") not in ("A", "B", "tie"):
        raise ValueError("judge output must be {\"winner\": \"A\"|\"B\"|\"tie\"}")
    return doc["winner"]


SCHEMAS: dict[str, Callable[[Any], Any]] = {
    "clarify": _schema_clarify,
    "rewrite": _schema_rewrite,
    "decompose": _schema_decompose,
    "plan": _schema_plan,
    "reflect": _schema_reflect,
    "filter": _schema_filter,
    "judge": _schema_judge,
}


# --------------------------------------------------------------------------
# Prompt templates
# --------------------------------------------------------------------------

_PLACEHOLDER_RE = re.compile(r"\{(\w+)\}")


@lru_cache(maxsize=None)
def load_prompt(name: str) -> str:
    return resources.files("paperdesk").joinpath("prompts", f"{name}.txt").read_text(encoding="utf-8")


def render_prompt(template: str, **values: object) -> str:
    """Substitute {name} placeholders for provided keys; other braces survive
    (templates contain literal JSON examples)."""

    def substitute(match: re.Match[str]) -> str:
        name = match.group(1)
        return str(values[name]) if name in values else match.group(0)

    return _PLACEHOLDER_RE.sub(substitute, template)


# --------------------------------------------------------------------------
# Clients
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ScriptEntry:
    response: str
    tag: str | None = None
    match: str | None = None

    def matches(self, request: ChatRequest) -> bool:
        if self.tag is not None and self.tag != request.tag:
            return False
        if self.match is not None and self.match not in request.full_text:
            return False
        return True


class ScriptedLlmClient:
    """Deterministic client: first script entry whose (tag, match substring)
    fits the request wins. A pure function of the request."""

    def __init__(self, entries: list[ScriptEntry]):
        self.entries = list(entries)

    @classmethod
    def from_entries(cls, raw: list[dict]) -> "ScriptedLlmClient":
        return cls(
            [
                ScriptEntry(
                    response=item["response"],
                    tag=item.get("tag"),
                    match=item.get("match"),
                )
                for item in raw
            ]
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedLlmClient":
        return cls.from_entries(json.loads(Path(path).read_text(encoding="utf-8")))

    def complete(self, request: ChatRequest) -> str:
        for entry in self.entries:
            if entry.matches(request):
                return entry.response
        excerpt = request.full_text[-120:].replace("\n", " ")
        raise LlmNoScriptError(f"no script entry for tag {request.tag!r} (...{excerpt!r})")


class HttpLlmClient:
    """Chat-completion JSON over HTTPS (messages array in, choices text out).

    `tag_models` overrides the model per calling tool (request tag), so e.g.
    rewriting can run on a cheaper model than generation.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key: str | None = None,
        timeout_s: float = 60.0,
        max_in_flight: int = 8,
        tag_models: dict[str, str] | None = None,
        transport: Any = None,
    ):
        import httpx

        self.endpoint = endpoint
        self.model = model
        self.tag_models = dict(tag_models or {})
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._client = httpx.Client(headers=headers, timeout=timeout_s, transport=transport)
        self._slots = threading.BoundedSemaphore(max_in_flight)

    def complete(self, request: ChatRequest) -> str:
        import httpx

        body = {
            "model": self.tag_models.get(request.tag, self.model),
            "messages": [{"role": m.role, "content": m.content} for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        with self._slots:
            try:
                response = self._client.post(self.endpoint, json=body)
            except httpx.TimeoutException as exc:
                raise LlmTimeoutError(f"llm request timed out: {exc}")
            except httpx.TransportError as exc:
                raise LlmTransportError(f"llm transport failure: {exc}")
        if response.status_code >= 500:
            raise LlmTransportError(f"provider returned {response.status_code}")
        if response.status_code >= 400:
            raise LlmProviderError(f"provider returned {response.status_code}: {response.text[:200]}")
        try:
            return response.json()["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise LlmProviderError(f"malformed provider response: {exc}")

    def close(self) -> None:
        self._client.close()
