"""Message embedding, per-group daily pooling and the embedding cache."""

from __future__ import annotations

import hashlib
import logging
import os
import re
import struct
import time
import unicodedata
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import date, timedelta
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from .errors import (
    CacheInvalidError,
    CacheReadError,
    ContractError,
    EmbeddingBatchError,
    ProviderContractError,
    ProviderError,
)
from .ingest import GroupDayDoc

logger = logging.getLogger(__name__)

MAX_TEXT_LEN = 8000
DEFAULT_BATCH_LIMIT = 50
DEFAULT_REMOTE_MODEL = "text-embedding-3-small"
DEFAULT_REMOTE_DIM = 1536
DEFAULT_LOCAL_DIM = 32
API_KEY_ENV = "SENTINEL_EMBED_API_KEY"

_WS = re.compile(r"\s+")
_TOKEN = re.compile(r"[^\W_]+")


def clean_text(s: str, max_len: int = MAX_TEXT_LEN) -> str:
    s = _WS.sub(" ", s)
    s = "".join(ch for ch in s if unicodedata.category(ch) not in ("Cc", "Cf"))
    return s.strip()[:max_len]


# --------------------------------------------------------------------------
# providers
# --------------------------------------------------------------------------

class EmbeddingProvider(Protocol):
    dim: int
    batch_limit: int

    @property
    def identity(self) -> str: ...

    def embed(self, texts: Sequence[str]) -> np.ndarray: ...


def _token_hash(token: str, seed: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=seed.to_bytes(8, "little")).digest()
    return int.from_bytes(digest, "little")


def local_hash_embed(text: str, dim: int = DEFAULT_LOCAL_DIM, seed: int = 0) -> np.ndarray:
    """Signed feature hashing of lowercase word tokens, L2-normalised.

    Each token's keyed 64-bit BLAKE2b hash ``h`` picks the slot ``h % dim``;
    bit 63 of ``h`` picks the sign. An all-zero accumulation stays zero.
    """
    if dim < 2:
        raise ContractError("dim must be >= 2")
    vec = np.zeros(dim)
    for tok in _TOKEN.findall(text.lower()):
        h = _token_hash(tok, seed)
        vec[h % dim] += -1.0 if (h >> 63) & 1 else 1.0
    norm = np.sqrt(np.dot(vec, vec))
    return vec / norm if norm > 0 else vec


class LocalHashProvider:
    """Deterministic offline provider; depends only on (text, dim, seed)."""

    def __init__(self, dim: int = DEFAULT_LOCAL_DIM, seed: int = 0, batch_limit: int = DEFAULT_BATCH_LIMIT):
        self.dim = dim
        self.seed = seed
        self.batch_limit = batch_limit

    @property
    def identity(self) -> str:
        return f"local-hash:blake2b:seed={self.seed}"

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        return np.array([local_hash_embed(t, self.dim, self.seed) for t in texts]).reshape(len(texts), self.dim)


class TransientError(ProviderError):
    """Retryable transport failure (connection error, 429, 5xx)."""


class RemoteProvider:
    """OpenAI-compatible ``/embeddings`` endpoint.

    The API key comes from ``SENTINEL_EMBED_API_KEY`` when set, else from the
    ``api_key`` argument; it is never logged. ``transport`` replaces the HTTP
    call (takes the JSON payload, returns the decoded response) for testing.
    """

    def __init__(
        self,
        model_name: str = DEFAULT_REMOTE_MODEL,
        dim: int = DEFAULT_REMOTE_DIM,
        endpoint: str = "https://api.openai.com/v1/embeddings",
        api_key: str | None = None,
        batch_limit: int = DEFAULT_BATCH_LIMIT,
        max_attempts: int = 5,
        base_delay: float = 1.0,
        timeout: float = 60.0,
        transport: Callable[[dict], dict] | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.model_name = model_name
        self.dim = dim
        self.endpoint = endpoint
        self._api_key = os.environ.get(API_KEY_ENV) or api_key
        self.batch_limit = batch_limit
        self.max_attempts = max_attempts
        self.base_delay = base_delay
        self.timeout = timeout
        self._transport = transport or self._http
        self._sleep = sleep
        self._client = None

    def __repr__(self) -> str:
        return f"RemoteProvider(model_name={self.model_name!r}, dim={self.dim}, endpoint={self.endpoint!r})"

    @property
    def identity(self) -> str:
        return f"remote:{self.model_name}"

    def _http(self, payload: dict) -> dict:
        import httpx

        if self._api_key is None:
            raise ProviderError(f"no API key; set {API_KEY_ENV}")
        if self._client is None:
            self._client = httpx.Client(timeout=self.timeout)
        try:
            resp = self._client.post(self.endpoint, json=payload, headers={"Authorization": f"Bearer {self._api_key}"})
        except httpx.TransportError as exc:
            raise TransientError(type(exc).__name__) from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise ProviderError(f"HTTP {resp.status_code}")
        return resp.json()

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        payload = {"model": self.model_name, "input": list(texts)}
        for attempt in range(self.max_attempts):
            try:
                body = self._transport(payload)
                break
            except TransientError:
                if attempt == self.max_attempts - 1:
                    raise
                delay = self.base_delay * 2**attempt
                logger.warning("embedding call failed (attempt %d/%d), retrying in %.1fs", attempt + 1, self.max_attempts, delay)
                self._sleep(delay)
        data = body.get("data") if isinstance(body, dict) else None
        if not isinstance(data, list) or len(data) != len(texts):
            raise ProviderContractError("response does not carry one embedding per input")
        if all(isinstance(d, dict) and "index" in d for d in data):
            data = sorted(data, key=lambda d: d["index"])
        vectors = [d["embedding"] if isinstance(d, dict) else d for d in data]
        return np.asarray(vectors, dtype=float)


@dataclass(frozen=True)
class EmbeddingProviderSpec:
    kind: str = "local-hash"
    model_name: str = DEFAULT_REMOTE_MODEL
    dim: int = DEFAULT_LOCAL_DIM
    batch_limit: int = DEFAULT_BATCH_LIMIT
    seed: int = 0
    endpoint: str = "https://api.openai.com/v1/embeddings"

    def build(self, api_key: str | None = None) -> EmbeddingProvider:
        if self.batch_limit < 1:
            raise ContractError("batch_limit must be >= 1")
        if self.kind in ("local-hash", "local"):
            return LocalHashProvider(self.dim, self.seed, self.batch_limit)
        if self.kind == "remote":
            return RemoteProvider(self.model_name, self.dim, self.endpoint, api_key, self.batch_limit)
        raise ContractError(f"unknown provider kind {self.kind!r}")


# --------------------------------------------------------------------------
# batching
# --------------------------------------------------------------------------

def embed_batch(provider: EmbeddingProvider, texts: Sequence[str], batch_index: int = 0) -> np.ndarray:
    if len(texts) > provider.batch_limit:
        raise ContractError(f"batch of {len(texts)} exceeds batch_limit {provider.batch_limit}")
    if any(not t for t in texts):
        raise ContractError("embed_batch expects cleaned, non-empty texts")
    if not texts:
        return np.zeros((0, provider.dim))
    try:
        vectors = provider.embed(texts)
    except ProviderContractError:
        raise
    except ProviderError as exc:
        raise EmbeddingBatchError(batch_index, exc) from exc
    if vectors.shape != (len(texts), provider.dim):
        raise ProviderContractError(f"provider returned shape {vectors.shape}, expected {(len(texts), provider.dim)}")
    if not np.all(np.isfinite(vectors)):
        raise ProviderContractError("provider returned non-finite values")
    return vectors


def embed_texts(provider: EmbeddingProvider, texts: Sequence[str], max_inflight: int = 4) -> np.ndarray:
    """Embed any number of texts in provider-sized batches, preserving order."""
    size = provider.batch_limit
    batches = [texts[i : i + size] for i in range(0, len(texts), size)]
    if not batches:
        return np.zeros((0, provider.dim))
    if max_inflight <= 1 or len(batches) == 1:
        parts = [embed_batch(provider, b, i) for i, b in enumerate(batches)]
    else:
        with ThreadPoolExecutor(max_workers=max_inflight) as pool:
            parts = list(pool.map(lambda ib: embed_batch(provider, ib[1], ib[0]), enumerate(batches)))
    return np.concatenate(parts, axis=0)


# --------------------------------------------------------------------------
# pooling
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DailyGroupEmbedding:
    """Mean of a group's message vectors for one day, stored as float32."""

    group_id: str
    date: date
    vector: np.ndarray
    message_count: int

    def __eq__(self, other):
        if not isinstance(other, DailyGroupEmbedding):
            return NotImplemented
        return (
            self.group_id == other.group_id
            and self.date == other.date
            and self.message_count == other.message_count
            and self.vector.dtype == other.vector.dtype
            and np.array_equal(self.vector, other.vector)
        )

    __hash__ = None


def pool_daily(doc: GroupDayDoc, vectors: Sequence[np.ndarray]) -> DailyGroupEmbedding | None:
    """Elementwise mean, summed in input order. Returns None when nothing was embeddable."""
    if len(vectors) == 0:
        return None
    acc = np.zeros(len(vectors[0]), dtype=np.float64)
    for v in vectors:
        acc += np.asarray(v, dtype=np.float64)
    mean = (acc / len(vectors)).astype(np.float32)
    return DailyGroupEmbedding(doc.group_id, doc.date, mean, len(vectors))


def embed_docs(provider: EmbeddingProvider, docs: Sequence[GroupDayDoc], max_inflight: int = 4) -> list[DailyGroupEmbedding]:
    """Clean, embed and pool every document; days with nothing embeddable are skipped."""
    cleaned = [[c for c in (clean_text(m) for m in doc.messages) if c] for doc in docs]
    flat = [t for texts in cleaned for t in texts]
    vectors = embed_texts(provider, flat, max_inflight)
    out, pos = [], 0
    for doc, texts in zip(docs, cleaned):
        pooled = pool_daily(doc, list(vectors[pos : pos + len(texts)]))
        pos += len(texts)
        if pooled is None:
            logger.info("%s %s: no embeddable messages, left as a gap", doc.group_id, doc.date)
        else:
            out.append(pooled)
    return out


# --------------------------------------------------------------------------
# cache file
# --------------------------------------------------------------------------

CACHE_MAGIC = b"SNTLEMB\x00"
CACHE_VERSION = 1
EPOCH = date(1970, 1, 1)


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise EOFError
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")


def cache_write(path: Path, entries: Sequence[DailyGroupEmbedding], provider_id: str, dim: int) -> None:
    """Header: magic, u16 version, provider id, u32 dim, u32 count; then one record per entry."""
    parts = [CACHE_MAGIC, struct.pack("<H", CACHE_VERSION), _pack_str(provider_id), struct.pack("<II", dim, len(entries))]
    for e in entries:
        if e.vector.shape != (dim,):
            raise ContractError(f"entry {e.group_id}/{e.date} has dim {e.vector.shape}, cache dim is {dim}")
        parts.append(_pack_str(e.group_id))
        parts.append(struct.pack("<II", (e.date - EPOCH).days, e.message_count))
        parts.append(np.asarray(e.vector, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def cache_read(path: Path, provider_id: str | None = None, dim: int | None = None) -> tuple[str, int, list[DailyGroupEmbedding]]:
    """Read a cache, checking it against the run's provider identity and dim when given."""
    r = _Reader(Path(path).read_bytes())
    try:
        if r.take(len(CACHE_MAGIC)) != CACHE_MAGIC:
            raise CacheReadError(f"{path}: not an embedding cache")
        (version,) = r.unpack("<H")
        if version != CACHE_VERSION:
            raise CacheInvalidError(f"{path}: cache format version {version}, expected {CACHE_VERSION}")
        file_provider = r.string()
        file_dim, count = r.unpack("<II")
    except EOFError:
        raise CacheReadError(f"{path}: truncated header") from None
    if provider_id is not None and file_provider != provider_id:
        raise CacheInvalidError(f"{path}: built by {file_provider!r}, run uses {provider_id!r}; re-embed")
    if dim is not None and file_dim != dim:
        raise CacheInvalidError(f"{path}: cache dim {file_dim}, run dim {dim}; re-embed")
    entries = []
    for i in range(count):
        try:
            gid = r.string()
            days, n_msgs = r.unpack("<II")
            vec = np.frombuffer(r.take(4 * file_dim), dtype="<f4").astype(np.float32)
        except (EOFError, UnicodeDecodeError):
            raise CacheReadError(f"{path}: record {i} is truncated or corrupt", record_index=i) from None
        entries.append(DailyGroupEmbedding(gid, EPOCH + timedelta(days=days), vec, n_msgs))
    if r.pos != len(r.data):
        raise CacheReadError(f"{path}: {len(r.data) - r.pos} trailing bytes after record {count - 1}", record_index=count)
    return file_provider, file_dim, entries
