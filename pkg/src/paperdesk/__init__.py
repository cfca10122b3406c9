"""paperdesk: a desk-scale research assistant over a sharded paper corpus.

Core surface: ingest JSONL paper metadata into per-(period, domain) shard
indexes, then answer questions through an adaptive pipeline that rewrites,
decomposes, routes, retrieves (hybrid + BM25 + web), reranks, fuses,
filters, generates, cites, reflects, and polishes — skipping tools a query
does not need.
"""

from .corpus import (
    Chunk,
    ChunkConfig,
    Granularity,
    IngestReport,
    PaperRecord,
    ShardKey,
    chunk_paper,
    ingest,
    parse_record,
    shard_key_for,
)
from .generation import AnswerWithCitations, Citation, attach_citations, generate, split_sentences
from .index import (
    Bm25Params,
    DenseVector,
    HashingEmbedder,
    IndexCatalog,
    ShardIndex,
    SparseVector,
    bm25_search,
    build_shard,
    hybrid_search,
    load_shard,
    persist_shard,
)
from .llm import ChatMessage, ChatRequest, HttpLlmClient, ScriptedLlmClient, complete, complete_json
from .orchestrator import (
    Deps,
    EngineConfig,
    Session,
    TraceEvent,
    TurnResult,
    normalize_trace,
    plan,
    resume_with_clarification,
    run_turn,
)
from .postprocess import Passage, TermOverlapReranker, filter_passages, fuse, rerank
from .query_tools import RewrittenQuery, SubQueryPlan, clarify, decompose, rewrite
from .refinement import ReflectionReport, polish, reflect
from .retrieval import (
    FixtureWebClient,
    RetrievedChunk,
    RouteConstraints,
    WebResult,
    bm25_retrieve,
    hybrid_retrieve,
    select_shards,
    web_retrieve,
)

__version__ = "0.1.0"
