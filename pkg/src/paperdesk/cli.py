"""Operator entry points: ingest corpora, inspect shards, serve the API,
ask one-shot questions with an optional trace, and run pairwise evals.

Exit codes: 0 success, 1 operational error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import socket
import sys
import tempfile
from pathlib import Path

from .corpus import ChunkConfig, Granularity, ingest, iter_corpus_lines
from .eval_harness import format_table, load_items, run_eval
from .index import Bm25Params, HashingEmbedder, IndexCatalog
from .llm import HttpLlmClient, ScriptedLlmClient
from .orchestrator import Deps, EngineConfig, Session, TraceEvent, run_turn
from .retrieval import FixtureWebClient
from .service import SessionStore, build_deps, create_app, load_settings


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except BrokenPipeError:
        return 1


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="paperdesk", description=__doc__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p_ingest = sub.add_parser("ingest", help="chunk and index a JSONL paper corpus")
    p_ingest.add_argument("--input", required=True, help="JSONL corpus file")
    p_ingest.add_argument("--data-dir", required=True, help="directory for shard files")
    p_ingest.add_argument(
        "--granularity",
        default=Granularity.QUARTER_ARCHIVE.value,
        choices=[g.value for g in Granularity],
    )
    p_ingest.add_argument("--chunk-tokens", type=int, default=256)
    p_ingest.add_argument("--overlap-tokens", type=int, default=32)
    p_ingest.set_defaults(handler=_cmd_ingest)

    p_shards = sub.add_parser("shards", help="print the shard catalog summary")
    p_shards.add_argument("--data-dir", required=True)
    p_shards.set_defaults(handler=_cmd_shards)

    p_serve = sub.add_parser("serve", help="run the HTTP service")
    p_serve.add_argument("--config", required=True, help="key=value sections config file")
    p_serve.set_defaults(handler=_cmd_serve)

    p_ask = sub.add_parser("ask", help="answer one question and print it with citations")
    p_ask.add_argument("--query", required=True)
    p_ask.add_argument("--data-dir", help="shard catalog directory")
    p_ask.add_argument("--scripted", help="scripted LLM file (fully offline)")
    p_ask.add_argument("--trace", action="store_true", help="stream trace events to stderr")
    p_ask.add_argument("--no-web", action="store_true", help="disable web retrieval")
    p_ask.add_argument("--web-fixture", help="canned web results JSON file")
    p_ask.set_defaults(handler=_cmd_ask)

    p_eval = sub.add_parser("eval", help="pairwise preference eval over an item file")
    p_eval.add_argument("--input", required=True, help="JSONL of eval items")
    p_eval.add_argument("--scripted", help="scripted judge LLM file")
    p_eval.set_defaults(handler=_cmd_eval)

    return parser


def _cmd_ingest(args: argparse.Namespace) -> int:
    input_path = Path(args.input)
    if not input_path.is_file():
        print(f"error: input file not readable: {input_path}", file=sys.stderr)
        return 1
    cfg = ChunkConfig(
        target_tokens=args.chunk_tokens,
        overlap_tokens=args.overlap_tokens,
        granularity=Granularity.parse(args.granularity),
    )
    catalog = IndexCatalog(args.data_dir, embedder=HashingEmbedder(), params=Bm25Params())
    with input_path.open(encoding="utf-8") as handle:
        report = ingest(iter_corpus_lines(handle), cfg, catalog)
    rejections_path = Path(args.data_dir) / "rejections.jsonl"
    with rejections_path.open("w", encoding="utf-8") as handle:
        for rejection in report.rejections:
            handle.write(json.dumps(rejection.to_json()) + "\n")
    print(json.dumps(report.to_json(), indent=2))
    return 0


def _cmd_shards(args: argparse.Namespace) -> int:
    data_dir = Path(args.data_dir)
    if not data_dir.is_dir():
        print(f"error: no such data dir: {data_dir}", file=sys.stderr)
        return 1
    catalog = IndexCatalog(data_dir)
    header = f"{'PERIOD':<10} {'DOMAIN':<12} {'CHUNKS':>8}"
    print(header)
    print("-" * len(header))
    for key in catalog.shard_keys():
        print(f"{key.period:<10} {key.domain:<12} {catalog.chunk_count(key):>8}")
    print(f"total shards: {len(catalog.shard_keys())}, chunks: {catalog.total_chunks}")
    return 0


def _cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    try:
        settings = load_settings(args.config)
        deps, mode = build_deps(settings)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    probe = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    try:
        probe.bind((settings.api.host, settings.api.port))
    except OSError:
        print(
            f"error: port {settings.api.port} on {settings.api.host} is already in use",
            file=sys.stderr,
        )
        return 1
    finally:
        probe.close()
    store = SessionStore(settings.data_dir)
    app = create_app(deps, store, settings.engine, settings.api, llm_mode=mode)
    uvicorn.run(app, host=settings.api.host, port=settings.api.port, log_level="warning")
    return 0


def _cmd_ask(args: argparse.Namespace) -> int:
    if args.scripted:
        client = ScriptedLlmClient.from_file(args.scripted)
    else:
        endpoint = os.environ.get("PAPERDESK_LLM_ENDPOINT")
        model = os.environ.get("PAPERDESK_LLM_MODEL")
        if not endpoint or not model:
            print(
                "error: pass --scripted or set PAPERDESK_LLM_ENDPOINT and PAPERDESK_LLM_MODEL",
                file=sys.stderr,
            )
            return 1
        client = HttpLlmClient(
            endpoint=endpoint, model=model, api_key=os.environ.get("PAPERDESK_LLM_API_KEY")
        )
    if args.data_dir:
        if not Path(args.data_dir).is_dir():
            print(f"error: no such data dir: {args.data_dir}", file=sys.stderr)
            return 1
        catalog = IndexCatalog(args.data_dir)
    else:
        catalog = IndexCatalog(Path(tempfile.gettempdir()) / "paperdesk-empty")  # no shards

    web = None
    if args.web_fixture and not args.no_web:
        web = FixtureWebClient.from_file(args.web_fixture)
    deps = Deps(llm=client, catalog=catalog, embedder=HashingEmbedder(), web=web)
    config = EngineConfig(clarify_enabled=False)  # one-shot: nobody can answer questions

    on_event = _trace_printer if args.trace else None
    session = Session()
    result = run_turn(session, args.query, deps, config, on_event=on_event)
    if result.failed or result.answer is None:
        print(f"error: turn failed: {result.error or 'no answer produced'}", file=sys.stderr)
        return 1
    print(render_answer(result.answer))
    return 0


def _trace_printer(event: TraceEvent) -> None:
    print(json.dumps(event.to_json()), file=sys.stderr, flush=True)


def render_answer(answer) -> str:
    """Answer text with inline [n] citation markers and a trailing source list."""
    sources: list[str] = []
    marker_for: dict[str, int] = {}
    for citation in answer.citations:
        if citation.source_id not in marker_for:
            sources.append(citation.source_id)
            marker_for[citation.source_id] = len(sources)
    by_sentence = {c.sentence_index: marker_for[c.source_id] for c in answer.citations}
    pieces: list[str] = []
    for i, (start, end) in enumerate(answer.sentences):
        pieces.append(answer.text[start:end])
        if i in by_sentence:
            pieces.append(f"[{by_sentence[i]}]")
    rendered = "".join(pieces) if answer.sentences else answer.text
    if sources:
        source_lines = "\n".join(f"[{n}] {sid}" for n, sid in enumerate(sources, start=1))
        rendered = f"{rendered}\n\nSources:\n{source_lines}"
    return rendered


def _cmd_eval(args: argparse.Namespace) -> int:
    input_path = Path(args.input)
    if not input_path.is_file():
        print(f"error: input file not readable: {input_path}", file=sys.stderr)
        return 1
    if args.scripted:
        client = ScriptedLlmClient.from_file(args.scripted)
    else:
        endpoint = os.environ.get("PAPERDESK_LLM_ENDPOINT")
        model = os.environ.get("PAPERDESK_LLM_MODEL")
        if not endpoint or not model:
            print(
                "error: pass --scripted or set PAPERDESK_LLM_ENDPOINT and PAPERDESK_LLM_MODEL",
                file=sys.stderr,
            )
            return 1
        client = HttpLlmClient(
            endpoint=endpoint, model=model, api_key=os.environ.get("PAPERDESK_LLM_API_KEY")
        )
    items = load_items(input_path)
    run = run_eval(client, items)
    print(json.dumps(run.to_json(), indent=2))
    print(format_table(run.to_json()["table"]), file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
