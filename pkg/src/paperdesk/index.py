"""Per-shard search index: Okapi BM25 over an inverted index, plus dense and
sparse vector stores fused with Reciprocal Rank Fusion.

A built ShardIndex is immutable; searches need no coordination. Shards are
persisted one self-describing binary file each and listed in a catalog
manifest so queries can be routed to the few shards that matter.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol

import numpy as np

from .corpus import Chunk, ShardKey

MAGIC = b"PDSHARD"
FORMAT_VERSION = 1
RRF_K = 60  # standard reciprocal-rank-fusion constant

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


class ShardFormatError(ValueError):
    """Shard file cannot be loaded: bad magic, version, or truncation."""


def tokenize(text: str) -> list[str]:
    """Unicode-lowercase tokens split on non-alphanumerics."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Bm25Params:
    k1: float = 1.2
    b: float = 0.75

    def __post_init__(self) -> None:
        if self.k1 <= 0:
            raise ValueError("k1 must be positive")
        if not 0.0 <= self.b <= 1.0:
            raise ValueError("b must be in [0, 1]")


@dataclass(frozen=True)
class DenseVector:
    """Unit-normalized embedding; cosine similarity reduces to a dot product."""

    values: tuple[float, ...]

    def __post_init__(self) -> None:
        norm = math.sqrt(sum(v * v for v in self.values))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"dense vector must be unit-normalized (norm={norm:.8f})")

    @property
    def dim(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class SparseVector:
    """Term-weight entries with strictly ascending term ids."""

    entries: tuple[tuple[int, float], ...]

    def __post_init__(self) -> None:
        last = -1
        for term_id, weight in self.entries:
            if term_id <= last:
                raise ValueError("sparse entries must have strictly ascending term_ids")
            if weight <= 0:
                raise ValueError("sparse weights must be positive")
            last = term_id


class Embedder(Protocol):
    def embed_dense(self, text: str) -> DenseVector: ...

    def embed_sparse(self, text: str) -> SparseVector: ...


def _stable_hash(token: str) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") >> 1  # keep it non-negative


class HashingEmbedder:
    """Deterministic feature-hashed unigram embedder for tests and offline use.

    Dense: token counts hashed into `dim` buckets, L2-normalized.
    Sparse: one entry per distinct token (stable 63-bit hash), weight = tf.
    Production embedders attach over the same Embedder protocol.
    """

    def __init__(self, dim: int = 64):
        if dim <= 0:
            raise ValueError("dim must be positive")
        self.dim = dim

    def embed_dense(self, text: str) -> DenseVector:
        buckets = [0.0] * self.dim
        for token in tokenize(text):
            buckets[_stable_hash(token) % self.dim] += 1.0
        norm = math.sqrt(sum(v * v for v in buckets))
        if norm == 0.0:
            buckets[0] = 1.0  # tokenless text still needs a unit vector
            norm = 1.0
        return DenseVector(values=tuple(v / norm for v in buckets))

    def embed_sparse(self, text: str) -> SparseVector:
        weights: dict[int, float] = {}
        for token in tokenize(text):
            term_id = _stable_hash(token)
            weights[term_id] = weights.get(term_id, 0.0) + 1.0
        return SparseVector(entries=tuple(sorted(weights.items())))


# --------------------------------------------------------------------------
# Shard index
# --------------------------------------------------------------------------


class ShardIndex:
    """Immutable BM25 + vector index over one shard's chunks."""

    def __init__(
        self,
        shard_key: ShardKey,
        chunks: dict[str, Chunk],
        dense_store: dict[str, DenseVector],
        sparse_store: dict[str, SparseVector],
        params: Bm25Params,
    ):
        self.shard_key = shard_key
        self.chunks = chunks
        self.dense_store = dense_store
        self.sparse_store = sparse_store
        self.params = params

        self.postings: dict[str, list[tuple[str, int]]] = {}
        self.doc_stats: dict[str, int] = {}
        self._chunk_ids = sorted(chunks)
        for chunk_id in self._chunk_ids:
            tokens = tokenize(chunks[chunk_id].text)
            self.doc_stats[chunk_id] = len(tokens)
            counts: dict[str, int] = {}
            for token in tokens:
                counts[token] = counts.get(token, 0) + 1
            for term, tf in counts.items():
                self.postings.setdefault(term, []).append((chunk_id, tf))
        self.N = len(chunks)
        self.avgdl = (sum(self.doc_stats.values()) / self.N) if self.N else 0.0

        self.dim = next(iter(dense_store.values())).dim if dense_store else 0
        if dense_store:
            self._dense_rows = {
                cid: np.asarray(dense_store[cid].values, dtype=np.float64)
                for cid in self._chunk_ids
            }
        else:
            self._dense_rows = {}

    @property
    def chunk_ids(self) -> list[str]:
        return list(self._chunk_ids)

    def idf(self, term: str) -> float:
        n_t = len(self.postings.get(term, ()))
        return math.log(1.0 + (self.N - n_t + 0.5) / (n_t + 0.5))


def build_shard(
    chunks: Iterable[Chunk],
    embedder: Embedder,
    params: Bm25Params = Bm25Params(),
) -> ShardIndex:
    """Index a shard's chunks. All chunks must share one shard key."""
    chunk_list = list(chunks)
    keys = {c.shard_key for c in chunk_list}
    if len(keys) > 1:
        raise ValueError(f"mixed shard keys in one shard: {sorted(map(str, keys))}")
    shard_key = keys.pop() if keys else ShardKey(period="", domain="")
    by_id: dict[str, Chunk] = {}
    for chunk in chunk_list:
        if chunk.chunk_id in by_id:
            raise ValueError(f"duplicate chunk_id {chunk.chunk_id!r}")
        by_id[chunk.chunk_id] = chunk
    dense = {cid: embedder.embed_dense(c.text) for cid, c in by_id.items()}
    sparse = {cid: embedder.embed_sparse(c.text) for cid, c in by_id.items()}
    return ShardIndex(shard_key, by_id, dense, sparse, params)


def bm25_search(index: ShardIndex, query_text: str, k: int) -> list[tuple[str, float]]:
    """Top-k chunks by Okapi BM25.

    score(q, d) = sum over query tokens of
        idf(t) * tf * (k1 + 1) / (tf + k1 * (1 - b + b * |d| / avgdl))
    with idf(t) = ln(1 + (N - n_t + 0.5) / (n_t + 0.5)). Repeated query
    tokens contribute once per occurrence. Only positive scores are
    returned, ties broken by ascending chunk_id.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    if k == 0 or index.N == 0:
        return []
    k1, b = index.params.k1, index.params.b
    scores: dict[str, float] = {}
    for term in tokenize(query_text):
        postings = index.postings.get(term)
        if not postings:
            continue
        idf = index.idf(term)
        for chunk_id, tf in postings:
            norm = k1 * (1.0 - b + b * index.doc_stats[chunk_id] / index.avgdl)
            contribution = idf * tf * (k1 + 1.0) / (tf + norm)
            scores[chunk_id] = scores.get(chunk_id, 0.0) + contribution
    ranked = sorted(
        ((cid, s) for cid, s in scores.items() if s > 0.0),
        key=lambda pair: (-pair[1], pair[0]),
    )
    return ranked[:k]


def _dense_ranking(index: ShardIndex, dense_q: DenseVector) -> list[str]:
    q = np.asarray(dense_q.values, dtype=np.float64)
    scored = []
    for cid in index._chunk_ids:
        score = float(np.dot(index._dense_rows[cid], q))
        if score > 0.0:
            scored.append((cid, score))
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return [cid for cid, _ in scored]


def _sparse_ranking(index: ShardIndex, sparse_q: SparseVector) -> list[str]:
    q_weights = dict(sparse_q.entries)
    scored = []
    for cid in index._chunk_ids:
        score = 0.0
        for term_id, weight in index.sparse_store[cid].entries:
            q_weight = q_weights.get(term_id)
            if q_weight is not None:
                score += weight * q_weight
        if score > 0.0:
            scored.append((cid, score))
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return [cid for cid, _ in scored]


def hybrid_search(
    index: ShardIndex,
    dense_q: DenseVector,
    sparse_q: SparseVector,
    k: int,
) -> list[tuple[str, float]]:
    """Top-k by Reciprocal Rank Fusion of the dense and sparse rankings.

    Each ranking keeps positive-score docs only; fused score is
    sum of 1 / (60 + rank) over the lists a doc appears in, rank from 1.
    """
    if index.N and index.dim and dense_q.dim != index.dim:
        raise ValueError(f"dense query dim {dense_q.dim} != index dim {index.dim}")
    if k <= 0 or index.N == 0:
        return []
    fused: dict[str, float] = {}
    for ranking in (_dense_ranking(index, dense_q), _sparse_ranking(index, sparse_q)):
        for rank, cid in enumerate(ranking, start=1):
            fused[cid] = fused.get(cid, 0.0) + 1.0 / (RRF_K + rank)
    ranked = sorted(fused.items(), key=lambda pair: (-pair[1], pair[0]))
    return ranked[:k]


# --------------------------------------------------------------------------
# Persistence
# --------------------------------------------------------------------------


def _shard_payload(index: ShardIndex) -> dict:
    return {
        "shard_key": {"period": index.shard_key.period, "domain": index.shard_key.domain},
        "params": {"k1": index.params.k1, "b": index.params.b},
        "chunks": [
            {
                "chunk_id": c.chunk_id,
                "paper_id": c.paper_id,
                "ordinal": c.ordinal,
                "text": c.text,
                "token_count": c.token_count,
            }
            for _, c in sorted(index.chunks.items())
        ],
        "dense": {cid: list(vec.values) for cid, vec in sorted(index.dense_store.items())},
        "sparse": {cid: [list(e) for e in vec.entries] for cid, vec in sorted(index.sparse_store.items())},
    }


def persist_shard(index: ShardIndex, path: str | Path) -> None:
    """Write the shard as MAGIC + version byte + length-prefixed JSON payload.

    Serialization is fully deterministic: persisting the same index twice
    yields identical bytes.
    """
    payload = json.dumps(_shard_payload(index), sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = MAGIC + bytes([FORMAT_VERSION]) + struct.pack(">Q", len(payload)) + payload
    Path(path).write_bytes(blob)


def load_shard(path: str | Path) -> ShardIndex:
    """Load a persisted shard; raises ShardFormatError on any corruption."""
    blob = Path(path).read_bytes()
    header_len = len(MAGIC) + 1 + 8
    if len(blob) < header_len:
        raise ShardFormatError(f"{path}: file too short for a shard header")
    if blob[: len(MAGIC)] != MAGIC:
        raise ShardFormatError(f"{path}: not a shard file (bad magic)")
    version = blob[len(MAGIC)]
    if version != FORMAT_VERSION:
        raise ShardFormatError(f"{path}: unsupported shard format version {version}")
    (payload_len,) = struct.unpack(">Q", blob[len(MAGIC) + 1 : header_len])
    payload = blob[header_len:]
    if len(payload) != payload_len:
        raise ShardFormatError(
            f"{path}: truncated shard file ({len(payload)} of {payload_len} payload bytes)"
        )
    try:
        data = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ShardFormatError(f"{path}: corrupt shard payload: {exc}")
    shard_key = ShardKey(**data["shard_key"])
    params = Bm25Params(**data["params"])
    chunks = {
        c["chunk_id"]: Chunk(shard_key=shard_key, **c)
        for c in data["chunks"]
    }
    dense = {cid: DenseVector(values=tuple(vals)) for cid, vals in data["dense"].items()}
    sparse = {
        cid: SparseVector(entries=tuple((int(t), float(w)) for t, w in entries))
        for cid, entries in data["sparse"].items()
    }
    return ShardIndex(shard_key, chunks, dense, sparse, params)


# --------------------------------------------------------------------------
# Catalog
# --------------------------------------------------------------------------


@dataclass
class CatalogEntry:
    shard_key: ShardKey
    path: Path
    chunk_count: int


class IndexCatalog:
    """Maps shard keys to on-disk shard files under <data_dir>/shards/.

    Chunks are staged per shard and turned into searchable indexes by
    publish(): each shard is built in full, written to a temp file, and
    atomically renamed, so readers never observe a partial shard. Every
    shard open is appended to `access_log` (the routing-soundness probe).
    """

    MANIFEST_VERSION = 1

    def __init__(
        self,
        data_dir: str | Path,
        embedder: Embedder | None = None,
        params: Bm25Params = Bm25Params(),
    ):
        self.data_dir = Path(data_dir)
        self.embedder = embedder
        self.params = params
        self.entries: dict[ShardKey, CatalogEntry] = {}
        self.access_log: list[ShardKey] = []
        self._staged: dict[ShardKey, list[Chunk]] = {}
        self._cache: dict[ShardKey, ShardIndex] = {}
        self._lock = threading.Lock()
        if self.manifest_path.exists():
            self._read_manifest()

    @property
    def shards_dir(self) -> Path:
        return self.data_dir / "shards"

    @property
    def manifest_path(self) -> Path:
        return self.data_dir / "catalog.json"

    def shard_keys(self) -> list[ShardKey]:
        return sorted(self.entries, key=lambda key: (key.period, key.domain))

    def chunk_count(self, key: ShardKey) -> int:
        return self.entries[key].chunk_count

    @property
    def total_chunks(self) -> int:
        return sum(entry.chunk_count for entry in self.entries.values())

    def stage_chunks(self, chunks: Iterable[Chunk]) -> None:
        for chunk in chunks:
            self._staged.setdefault(chunk.shard_key, []).append(chunk)

    def publish(self) -> None:
        """Build and persist every staged shard, then rewrite the manifest."""
        if not self._staged:
            self._write_manifest()
            return
        if self.embedder is None:
            raise ValueError("catalog has no embedder; cannot build shards")
        self.shards_dir.mkdir(parents=True, exist_ok=True)
        for key, new_chunks in sorted(self._staged.items(), key=lambda kv: (kv[0].period, kv[0].domain)):
            merged: dict[str, Chunk] = {}
            if key in self.entries:
                for chunk in self.get_index(key).chunks.values():
                    merged[chunk.chunk_id] = chunk
            for chunk in new_chunks:
                merged[chunk.chunk_id] = chunk
            index = build_shard(merged.values(), self.embedder, self.params)
            path = self.shards_dir / f"{key.period}__{key.domain}.idx"
            tmp_path = path.with_suffix(".idx.tmp")
            persist_shard(index, tmp_path)
            tmp_path.replace(path)
            self.entries[key] = CatalogEntry(shard_key=key, path=path, chunk_count=len(merged))
            with self._lock:
                self._cache[key] = index
        self._staged.clear()
        self._write_manifest()

    def get_index(self, key: ShardKey) -> ShardIndex:
        """Load (and cache) one shard, recording the access."""
        self.access_log.append(key)
        with self._lock:
            cached = self._cache.get(key)
        if cached is not None:
            return cached
        entry = self.entries.get(key)
        if entry is None:
            raise KeyError(f"no shard {key} in catalog")
        index = load_shard(entry.path)
        with self._lock:
            self._cache[key] = index
        return index

    def _write_manifest(self) -> None:
        self.data_dir.mkdir(parents=True, exist_ok=True)
        doc = {
            "version": self.MANIFEST_VERSION,
            "shards": [
                {
                    "period": entry.shard_key.period,
                    "domain": entry.shard_key.domain,
                    "path": str(entry.path.relative_to(self.data_dir)),
                    "chunks": entry.chunk_count,
                }
                for entry in (self.entries[k] for k in self.shard_keys())
            ],
        }
        tmp = self.manifest_path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        tmp.replace(self.manifest_path)

    def _read_manifest(self) -> None:
        doc = json.loads(self.manifest_path.read_text(encoding="utf-8"))
        if doc.get("version") != self.MANIFEST_VERSION:
            raise ShardFormatError(
                f"{self.manifest_path}: unsupported catalog version {doc.get('version')}"
            )
        for item in doc["shards"]:
            key = ShardKey(period=item["period"], domain=item["domain"])
            self.entries[key] = CatalogEntry(
                shard_key=key,
                path=self.data_dir / item["path"],
                chunk_count=int(item["chunks"]),
            )
