"""Paper ingestion: record validation, chunking, and time/domain shard keys.

A paper record arrives as one JSON object per line (arXiv-style metadata).
Records are split into fixed-token-budget chunks; every chunk is stamped
with the shard key that routes it to a (period, domain) index.
"""

from __future__ import annotations

import calendar
import json
import logging
from dataclasses import dataclass, field
from datetime import date
from enum import Enum
from typing import TYPE_CHECKING, Iterable

if TYPE_CHECKING:
    from .index import IndexCatalog

logger = logging.getLogger(__name__)


class RecordError(ValueError):
    """A paper record that cannot be ingested (bad date, missing fields...)."""


class Granularity(str, Enum):
    """Shard granularity: time period kind x domain kind."""

    QUARTER_ARCHIVE = "quarter-archive"
    MONTH_ARCHIVE = "month-archive"
    QUARTER_CATEGORY = "quarter-category"
    MONTH_CATEGORY = "month-category"

    @property
    def period_kind(self) -> str:
        return self.value.split("-")[0]

    @property
    def domain_kind(self) -> str:
        return self.value.split("-")[1]

    @classmethod
    def parse(cls, text: str) -> "Granularity":
        try:
            return cls(text)
        except ValueError:
            options = ", ".join(g.value for g in cls)
            raise ValueError(f"unknown granularity {text!r} (expected one of: {options})")


@dataclass(frozen=True)
class ShardKey:
    """Routing key for one (time period, domain) slice of the corpus."""

    period: str
    domain: str

    def __str__(self) -> str:
        return f"{self.period}__{self.domain}"


@dataclass(frozen=True)
class PaperRecord:
    paper_id: str
    title: str
    abstract: str
    categories: tuple[str, ...]
    primary_category: str
    published: date
    body: str | None = None


@dataclass(frozen=True)
class Chunk:
    chunk_id: str
    paper_id: str
    ordinal: int
    text: str
    token_count: int
    shard_key: ShardKey


@dataclass(frozen=True)
class ChunkConfig:
    target_tokens: int = 256
    overlap_tokens: int = 32
    granularity: Granularity = Granularity.QUARTER_ARCHIVE

    def __post_init__(self) -> None:
        if self.target_tokens <= 0:
            raise ValueError("target_tokens must be positive")
        if not 0 <= self.overlap_tokens < self.target_tokens:
            raise ValueError("overlap_tokens must be in [0, target_tokens)")


@dataclass
class Rejection:
    line_no: int
    reason: str
    paper_id: str | None = None

    def to_json(self) -> dict:
        out: dict = {"line_no": self.line_no, "reason": self.reason}
        if self.paper_id is not None:
            out["paper_id"] = self.paper_id
        return out


@dataclass
class IngestReport:
    chunks_per_shard: dict[ShardKey, int] = field(default_factory=dict)
    papers_ingested: int = 0
    rejections: list[Rejection] = field(default_factory=list)

    @property
    def total_chunks(self) -> int:
        return sum(self.chunks_per_shard.values())

    def to_json(self) -> dict:
        shards = [
            {"period": key.period, "domain": key.domain, "chunks": count}
            for key, count in sorted(
                self.chunks_per_shard.items(), key=lambda kv: (kv[0].period, kv[0].domain)
            )
        ]
        return {
            "papers_ingested": self.papers_ingested,
            "total_chunks": self.total_chunks,
            "shards": shards,
            "rejected": len(self.rejections),
            "rejections": [r.to_json() for r in self.rejections],
        }


def tokenize_ws(text: str) -> list[str]:
    """Whitespace tokenizer used for chunk budgets."""
    return text.split()


# --------------------------------------------------------------------------
# Shard keys
# --------------------------------------------------------------------------


def archive_of(category: str) -> str:
    """Top-level archive of a category string: text before the first dot."""
    return category.split(".", 1)[0]


def period_label(day: date, period_kind: str) -> str:
    if period_kind == "month":
        return f"{day.year:04d}-{day.month:02d}"
    if period_kind == "quarter":
        quarter = (day.month - 1) // 3 + 1
        return f"{day.year:04d}-Q{quarter}"
    raise ValueError(f"unknown period kind {period_kind!r}")


def period_interval(period: str) -> tuple[date, date]:
    """Inclusive (start, end) date interval a period label covers."""
    year_part, _, rest = period.partition("-")
    year = int(year_part)
    if rest.startswith("Q"):
        quarter = int(rest[1:])
        if not 1 <= quarter <= 4:
            raise ValueError(f"bad quarter in period {period!r}")
        start_month = 3 * (quarter - 1) + 1
        end_month = start_month + 2
    else:
        start_month = end_month = int(rest)
        if not 1 <= start_month <= 12:
            raise ValueError(f"bad month in period {period!r}")
    last_day = calendar.monthrange(year, end_month)[1]
    return date(year, start_month, 1), date(year, end_month, last_day)


def shard_key_for(record: PaperRecord, granularity: Granularity) -> ShardKey:
    """Shard key of a record: calendar period of `published` x domain of the primary category."""
    period = period_label(record.published, granularity.period_kind)
    if granularity.domain_kind == "archive":
        domain = archive_of(record.primary_category)
    else:
        domain = record.primary_category
    return ShardKey(period=period, domain=domain)


# --------------------------------------------------------------------------
# Record parsing
# --------------------------------------------------------------------------


def parse_record(obj: dict) -> PaperRecord:
    """Validate a raw metadata object into a PaperRecord. Raises RecordError."""
    if not isinstance(obj, dict):
        raise RecordError("record is not a JSON object")
    paper_id = obj.get("paper_id")
    if not isinstance(paper_id, str) or not paper_id:
        raise RecordError("missing or empty paper_id")
    title = obj.get("title")
    if not isinstance(title, str):
        raise RecordError("missing title")
    abstract = obj.get("abstract")
    if not isinstance(abstract, str):
        raise RecordError("missing abstract")
    body = obj.get("body")
    if body is not None and not isinstance(body, str):
        raise RecordError("body must be a string when present")
    categories = obj.get("categories")
    if not isinstance(categories, list) or not categories:
        raise RecordError("categories must be a non-empty list")
    if not all(isinstance(c, str) and c for c in categories):
        raise RecordError("categories must be non-empty strings")
    primary = obj.get("primary_category")
    if not isinstance(primary, str) or primary not in categories:
        raise RecordError("primary_category must be one of categories")
    published_raw = obj.get("published")
    if not isinstance(published_raw, str):
        raise RecordError("missing published date")
    try:
        published = date.fromisoformat(published_raw)
    except ValueError:
        raise RecordError(f"invalid published date {published_raw!r}")
    return PaperRecord(
        paper_id=paper_id,
        title=title,
        abstract=abstract,
        body=body,
        categories=tuple(categories),
        primary_category=primary,
        published=published,
    )


# --------------------------------------------------------------------------
# Chunking
# --------------------------------------------------------------------------


def chunk_paper(record: PaperRecord, cfg: ChunkConfig) -> list[Chunk]:
    """Split title+abstract+body into overlapping token windows.

    Windows advance by target_tokens - overlap_tokens, so consecutive chunks
    share exactly overlap_tokens tokens. The title and abstract are prepended
    to the body so a paper is retrievable even without full text.
    """
    parts = [record.title, record.abstract]
    if record.body:
        parts.append(record.body)
    tokens = tokenize_ws(" ".join(parts))
    if not tokens:
        raise RecordError(f"record {record.paper_id}: empty abstract and body")

    key = shard_key_for(record, cfg.granularity)
    stride = cfg.target_tokens - cfg.overlap_tokens
    chunks: list[Chunk] = []
    start = 0
    while True:
        end = min(start + cfg.target_tokens, len(tokens))
        window = tokens[start:end]
        ordinal = len(chunks)
        chunks.append(
            Chunk(
                chunk_id=f"{record.paper_id}#{ordinal:04d}",
                paper_id=record.paper_id,
                ordinal=ordinal,
                text=" ".join(window),
                token_count=len(window),
                shard_key=key,
            )
        )
        if end == len(tokens):
            break
        start += stride
    return chunks


# --------------------------------------------------------------------------
# Ingestion
# --------------------------------------------------------------------------


def iter_corpus_lines(lines: Iterable[str]) -> Iterable[tuple[int, object]]:
    """Yield (line_no, parsed object | RecordError) for a JSONL corpus stream."""
    for line_no, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped:
            continue
        try:
            yield line_no, json.loads(stripped)
        except json.JSONDecodeError as exc:
            yield line_no, RecordError(f"invalid JSON: {exc.msg}")


def ingest(
    records: Iterable[object],
    cfg: ChunkConfig,
    catalog: "IndexCatalog",
) -> IngestReport:
    """Chunk a stream of records into the catalog and publish the shards.

    Accepts PaperRecord instances, raw metadata dicts, or (line_no, obj)
    pairs from iter_corpus_lines. Malformed records are recorded as
    rejections and never abort the stream.
    """
    report = IngestReport()
    seen_ids: set[str] = set()
    line_no = 0
    for item in records:
        if isinstance(item, tuple):
            line_no, payload = item
        else:
            line_no += 1
            payload = item
        paper_id: str | None = None
        try:
            if isinstance(payload, RecordError):
                raise payload
            if isinstance(payload, PaperRecord):
                record = payload
            else:
                record = parse_record(payload)  # type: ignore[arg-type]
            paper_id = record.paper_id
            if record.paper_id in seen_ids:
                raise RecordError(f"duplicate paper_id {record.paper_id!r}")
            chunks = chunk_paper(record, cfg)
        except RecordError as exc:
            report.rejections.append(Rejection(line_no=line_no, reason=str(exc), paper_id=paper_id))
            logger.warning("rejected record at line %d: %s", line_no, exc)
            continue
        seen_ids.add(record.paper_id)
        catalog.stage_chunks(chunks)
        report.papers_ingested += 1
        for chunk in chunks:
            report.chunks_per_shard[chunk.shard_key] = (
                report.chunks_per_shard.get(chunk.shard_key, 0) + 1
            )
    catalog.publish()
    return report
