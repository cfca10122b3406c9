"""HTTP facade: session lifecycle, message submission with a server-sent
event stream of pipeline trace events, and operational endpoints.

The flow after a message is strictly server-to-client, so SSE keeps clients
trivial: one `event: <kind>` + `data: <TraceEvent JSON>` block per pipeline
step, ending after final_answer, clarification_asked, or error.
"""

from __future__ import annotations

import configparser
import json
import logging
import os
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, StreamingResponse

from .index import HashingEmbedder, IndexCatalog
from .llm import HttpLlmClient, ScriptedLlmClient
from .orchestrator import (
    Deps,
    EngineConfig,
    Session,
    TraceEvent,
    resume_with_clarification,
    run_turn,
)
from .retrieval import FixtureWebClient

logger = logging.getLogger(__name__)

TOKEN_ENV = "PAPERDESK_API_TOKEN"
LLM_KEY_ENV = "PAPERDESK_LLM_API_KEY"

TERMINAL_KINDS = frozenset({"final_answer", "clarification_asked", "error"})


@dataclass(frozen=True)
class ApiConfig:
    host: str = "127.0.0.1"
    port: int = 8080
    auth_token: str | None = None
    cors_allowlist: tuple[str, ...] = ()
    keepalive_s: float = 15.0
    max_concurrent_turns: int = 32
    ui_dir: str | None = None

    def __post_init__(self) -> None:
        if self.keepalive_s <= 0:
            raise ValueError("keepalive_s must be positive")


class SessionStore:
    """Embedded session store: one JSON file per session under data_dir.

    Live Session objects are cached so turn locks and pending clarifications
    survive across requests; files are the durable copy that survives a
    service restart.
    """

    def __init__(self, data_dir: str | Path):
        self.dir = Path(data_dir) / "sessions"
        self.dir.mkdir(parents=True, exist_ok=True)
        self._cache: dict[str, Session] = {}
        self._lock = threading.Lock()

    def _path(self, session_id: str) -> Path:
        return self.dir / f"{session_id}.json"

    def create(self) -> Session:
        session = Session()
        with self._lock:
            self._cache[session.session_id] = session
        self.save(session)
        return session

    def load(self, session_id: str) -> Session | None:
        with self._lock:
            cached = self._cache.get(session_id)
        if cached is not None:
            return cached
        path = self._path(session_id)
        if not path.exists():
            return None
        session = Session.from_json(json.loads(path.read_text(encoding="utf-8")))
        with self._lock:
            return self._cache.setdefault(session_id, session)

    def save(self, session: Session) -> None:
        path = self._path(session.session_id)
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(session.to_json(), indent=2) + "\n", encoding="utf-8")
        tmp.replace(path)


def create_app(
    deps: Deps,
    store: SessionStore,
    engine_config: EngineConfig = EngineConfig(),
    api_config: ApiConfig = ApiConfig(),
    llm_mode: str = "configured",
    ready: bool = True,
) -> FastAPI:
    app = FastAPI(title="paperdesk", docs_url=None, redoc_url=None)
    state = _ServiceState(
        deps=deps,
        store=store,
        engine_config=engine_config,
        api_config=api_config,
        llm_mode=llm_mode,
        ready=ready,
    )
    app.state.service = state

    if api_config.cors_allowlist:
        from fastapi.middleware.cors import CORSMiddleware

        app.add_middleware(
            CORSMiddleware,
            allow_origins=list(api_config.cors_allowlist),
            allow_methods=["*"],
            allow_headers=["*"],
        )

    def unauthorized() -> JSONResponse:
        return JSONResponse({"detail": "unauthorized"}, status_code=401)

    def authorized(request: Request) -> bool:
        token = api_config.auth_token
        if not token:
            return True
        header = request.headers.get("authorization", "")
        return header == f"Bearer {token}"

    @app.get("/v1/health")
    def health() -> JSONResponse:
        if not state.ready:
            return JSONResponse({"status": "loading"}, status_code=503)
        return JSONResponse(
            {
                "status": "ok",
                "shards": len(state.deps.catalog.shard_keys()),
                "llm": state.llm_mode,
            }
        )

    @app.post("/v1/sessions")
    def create_session(request: Request) -> JSONResponse:
        if not authorized(request):
            return unauthorized()
        try:
            session = state.store.create()
        except OSError as exc:
            logger.error("session store failure: %s", exc)
            return JSONResponse({"detail": "session store failure"}, status_code=500)
        return JSONResponse({"session_id": session.session_id}, status_code=201)

    @app.get("/v1/sessions/{session_id}")
    def get_session(session_id: str, request: Request) -> JSONResponse:
        if not authorized(request):
            return unauthorized()
        session = state.store.load(session_id)
        if session is None:
            return JSONResponse({"detail": "unknown session"}, status_code=404)
        return JSONResponse(session.to_json())

    @app.get("/v1/shards")
    def get_shards(request: Request) -> JSONResponse:
        if not authorized(request):
            return unauthorized()
        catalog = state.deps.catalog
        return JSONResponse(
            [
                {
                    "period": key.period,
                    "domain": key.domain,
                    "chunk_count": catalog.chunk_count(key),
                }
                for key in catalog.shard_keys()
            ]
        )

    @app.post("/v1/sessions/{session_id}/messages")
    async def post_message(session_id: str, request: Request):
        if not authorized(request):
            return unauthorized()
        try:
            body = await request.json()
        except Exception:
            return JSONResponse({"detail": "body must be JSON"}, status_code=400)
        text = body.get("text") if isinstance(body, dict) else None
        if not isinstance(text, str) or not text.strip():
            return JSONResponse({"detail": "body needs a non-empty 'text'"}, status_code=400)
        session = state.store.load(session_id)
        if session is None:
            return JSONResponse({"detail": "unknown session"}, status_code=404)
        if not state.begin_turn(session_id):
            if state.over_capacity(session_id):
                return JSONResponse({"detail": "too many concurrent turns"}, status_code=429)
            return JSONResponse({"detail": "a turn is already in flight"}, status_code=409)

        events: queue.Queue[TraceEvent | None] = queue.Queue()
        worker = threading.Thread(
            target=_run_turn_worker,
            args=(state, session, text, events),
            daemon=True,
        )
        worker.start()
        stream = _sse_stream(events, session_id, state.api_config.keepalive_s)
        return StreamingResponse(stream, media_type="text/event-stream")

    ui_dir = api_config.ui_dir
    if ui_dir and Path(ui_dir).is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/ui", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app


@dataclass
class _ServiceState:
    deps: Deps
    store: SessionStore
    engine_config: EngineConfig
    api_config: ApiConfig
    llm_mode: str
    ready: bool
    _in_flight: set[str] = field(default_factory=set)
    _mutex: threading.Lock = field(default_factory=threading.Lock)

    def begin_turn(self, session_id: str) -> bool:
        with self._mutex:
            if session_id in self._in_flight:
                return False
            if len(self._in_flight) >= self.api_config.max_concurrent_turns:
                return False
            self._in_flight.add(session_id)
            return True

    def end_turn(self, session_id: str) -> None:
        with self._mutex:
            self._in_flight.discard(session_id)

    def over_capacity(self, session_id: str) -> bool:
        with self._mutex:
            return (
                session_id not in self._in_flight
                and len(self._in_flight) >= self.api_config.max_concurrent_turns
            )


def _run_turn_worker(
    state: _ServiceState,
    session: Session,
    text: str,
    events: "queue.Queue[TraceEvent | None]",
) -> None:
    last_seq = -1

    def forward(event: TraceEvent) -> None:
        nonlocal last_seq
        last_seq = event.seq
        events.put(event)

    try:
        if session.pending_clarification is not None:
            resume_with_clarification(
                session, text, state.deps, state.engine_config, on_event=forward
            )
        else:
            run_turn(session, text, state.deps, state.engine_config, on_event=forward)
    except Exception as exc:  # noqa: BLE001 - stream must always close
        import time as _time

        logger.exception("turn failed for session %s", session.session_id)
        events.put(
            TraceEvent(
                kind="error",
                seq=last_seq + 1,
                payload={"message": str(exc)},
                ts=_time.time(),
            )
        )
    finally:
        try:
            state.store.save(session)
        except OSError as exc:
            logger.error("failed to persist session %s: %s", session.session_id, exc)
        state.end_turn(session.session_id)
        events.put(None)


def _sse_stream(
    events: "queue.Queue[TraceEvent | None]", session_id: str, keepalive_s: float
):
    def generate():
        while True:
            try:
                item = events.get(timeout=keepalive_s)
            except queue.Empty:
                yield ": keepalive\n\n"
                continue
            if item is None:
                break
            doc = item.to_json()
            doc["session_id"] = session_id
            yield f"event: {item.kind}\ndata: {json.dumps(doc)}\n\n"

    return generate()


# --------------------------------------------------------------------------
# Configuration file
# --------------------------------------------------------------------------


@dataclass
class ServiceSettings:
    data_dir: str
    api: ApiConfig
    engine: EngineConfig
    llm_mode: str  # "scripted" | "http"
    scripted_file: str | None = None
    llm_endpoint: str | None = None
    llm_model: str | None = None
    llm_tag_models: dict[str, str] = field(default_factory=dict)
    web_fixture: str | None = None


def load_settings(path: str | Path) -> ServiceSettings:
    """Parse the key=value sections config file, with secrets taken from the
    environment (PAPERDESK_API_TOKEN, PAPERDESK_LLM_API_KEY)."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise FileNotFoundError(f"config file not found: {path}")
    server = parser["server"] if parser.has_section("server") else {}
    engine = parser["engine"] if parser.has_section("engine") else {}
    llm = parser["llm"] if parser.has_section("llm") else {}
    web = parser["web"] if parser.has_section("web") else {}

    cors_raw = str(server.get("cors_allow", "")).strip()
    api = ApiConfig(
        host=str(server.get("host", "127.0.0.1")),
        port=int(server.get("port", 8080)),
        auth_token=os.environ.get(TOKEN_ENV) or None,
        cors_allowlist=tuple(s.strip() for s in cors_raw.split(",") if s.strip()),
        keepalive_s=float(server.get("keepalive_s", 15.0)),
        max_concurrent_turns=int(server.get("max_concurrent_turns", 32)),
        ui_dir=str(server["ui_dir"]) if "ui_dir" in server else None,
    )
    engine_config = EngineConfig(
        llm_filter=str(engine.get("llm_filter", "false")).lower() == "true",
        clarify_enabled=str(engine.get("clarify", "true")).lower() == "true",
    )
    data_dir = str(engine.get("data_dir", "./data"))
    mode = str(llm.get("mode", "scripted"))
    if mode not in ("scripted", "http"):
        raise ValueError(f"llm mode must be 'scripted' or 'http', got {mode!r}")
    tag_models: dict[str, str] = {}
    for pair in str(llm.get("model_overrides", "")).split(","):
        if ":" in pair:
            tag, _, model = pair.strip().partition(":")
            tag_models[tag.strip()] = model.strip()
    return ServiceSettings(
        data_dir=data_dir,
        api=api,
        engine=engine_config,
        llm_mode=mode,
        scripted_file=str(llm["scripted_file"]) if "scripted_file" in llm else None,
        llm_endpoint=str(llm["endpoint"]) if "endpoint" in llm else None,
        llm_model=str(llm["model"]) if "model" in llm else None,
        llm_tag_models=tag_models,
        web_fixture=str(web["fixture_file"]) if "fixture_file" in web else None,
    )


def build_deps(settings: ServiceSettings) -> tuple[Deps, str]:
    """Assemble pipeline dependencies from parsed settings."""
    catalog = IndexCatalog(settings.data_dir)
    embedder = HashingEmbedder()
    if settings.llm_mode == "scripted":
        if not settings.scripted_file:
            raise ValueError("scripted llm mode needs llm.scripted_file")
        client = ScriptedLlmClient.from_file(settings.scripted_file)
        mode = "scripted"
    else:
        if not settings.llm_endpoint or not settings.llm_model:
            raise ValueError("http llm mode needs llm.endpoint and llm.model")
        client = HttpLlmClient(
            endpoint=settings.llm_endpoint,
            model=settings.llm_model,
            api_key=os.environ.get(LLM_KEY_ENV),
            tag_models=settings.llm_tag_models,
        )
        mode = "configured"
    web = FixtureWebClient.from_file(settings.web_fixture) if settings.web_fixture else None
    return Deps(llm=client, catalog=catalog, embedder=embedder, web=web), mode
