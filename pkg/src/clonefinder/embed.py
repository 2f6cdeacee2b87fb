"""Embedding providers and the orchestration that turns fragments into vectors.

Three provider kinds share one interface:

- deterministic-local: feature-hashing bag-of-tokens, no model needed. Shared
  tokens raise cosine similarity gradually, so planted Type-1/Type-2 clones
  are detectable fully offline.
- remote-http: OpenAI-style embeddings endpoint (POST {"input", "model"} ->
  {"data": [{"index", "embedding"}]}), bearer token from an environment
  variable, bounded exponential-backoff retries.
- external-process: newline-delimited JSON over stdin/stdout, one request and
  one response per line, so locally hosted models plug in without linking any
  ML runtime into this package.

All vectors are unit-normalized at ingestion; cosine then equals dot product
in the search index. Raw (unnormalized) provider output is not preserved.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shlex
import subprocess
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import httpx
import numpy as np

from .cache import CacheKey, EmbeddingCache
from .corpus import CodeFragment, truncate_tokens
from .errors import (
    DimensionMismatchError,
    FragmentFormatError,
    ProviderError,
    ProviderProtocolError,
)

logger = logging.getLogger(__name__)

NORM_TOLERANCE = 1e-6
DEFAULT_REMOTE_DIMENSION = 1536
DEFAULT_HASH_DIMENSION = 256
DEFAULT_BATCH_SIZE = 64


@dataclass
class EmbeddingRecord:
    fragment_id: str
    provider_id: str
    content_hash: str
    vector: np.ndarray

    def validate(self) -> None:
        norm = float(np.linalg.norm(self.vector))
        if abs(norm - 1.0) > NORM_TOLERANCE:
            raise FragmentFormatError(
                f"{self.fragment_id}: vector norm {norm} outside 1 +/- {NORM_TOLERANCE}"
            )


@dataclass
class EmbedFailure:
    fragment_id: str
    reason: str


@dataclass
class EmbedOutcome:
    records: list[EmbeddingRecord]
    failures: list[EmbedFailure] = field(default_factory=list)


def content_hash_of(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def provider_input_text(fragment: CodeFragment, code_length: int) -> str:
    """The exact text a provider sees: truncated tokens joined by one space."""
    return " ".join(truncate_tokens(fragment, code_length).tokens)


def _normalize(vector: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vector))
    if norm == 0.0:
        raise ProviderError("provider returned a zero vector")
    return vector / norm


# --- deterministic feature-hashing provider ---------------------------------


@lru_cache(maxsize=1 << 20)
def _token_slot(token: str, dimension: int, seed: int) -> tuple[int, float]:
    digest = hashlib.blake2b(
        token.encode("utf-8"),
        digest_size=9,
        key=seed.to_bytes(8, "little", signed=True),
    ).digest()
    index = int.from_bytes(digest[:8], "little") % dimension
    sign = 1.0 if digest[8] & 1 else -1.0
    return index, sign


def hash_embed(text: str, dimension: int, seed: int = 0) -> np.ndarray:
    """Feature-hashing bag-of-tokens embedding, L2-normalized.

    Deterministic in (text tokens, dimension, seed); identical token multisets
    map to identical vectors, so cosine similarity is invariant under token
    reordering. That is a documented property of this test provider, not of
    neural providers.
    """
    if dimension < 8:
        raise ValueError(f"dimension must be >= 8, got {dimension}")
    tokens = text.split()
    if not tokens:
        raise ValueError("zero-information input: no tokens to embed")
    vector = np.zeros(dimension, dtype=np.float64)
    for token in tokens:
        index, sign = _token_slot(token, dimension, seed)
        vector[index] += sign
    norm = float(np.linalg.norm(vector))
    if norm == 0.0:
        # Pathological full cancellation; rescue deterministically.
        index, sign = _token_slot("\x00".join(tokens), dimension, seed)
        vector[index] = sign
        norm = 1.0
    return vector / norm


class HashProvider:
    """Deterministic local provider; stands in for neural models in tests."""

    kind = "deterministic-local"

    def __init__(
        self,
        dimension: int = DEFAULT_HASH_DIMENSION,
        seed: int = 0,
        provider_id: str | None = None,
        batch_size: int = DEFAULT_BATCH_SIZE,
    ):
        if dimension < 8:
            raise ValueError(f"dimension must be >= 8, got {dimension}")
        self.dimension = dimension
        self.seed = seed
        self.provider_id = provider_id or f"hash-{dimension}"
        self.batch_size = batch_size

    def embed_batch(self, texts: list[str]) -> list[np.ndarray]:
        return [hash_embed(text, self.dimension, self.seed) for text in texts]


# --- remote OpenAI-compatible provider ---------------------------------------


def remote_embed(
    texts: list[str],
    endpoint: str,
    model: str,
    auth: str | None = None,
    *,
    client: httpx.Client | None = None,
    max_attempts: int = 3,
    backoff_base: float = 0.5,
    timeout: float = 60.0,
    expected_dimension: int | None = None,
) -> list[np.ndarray]:
    """POST one batch to an embeddings endpoint; order restored by index.

    Transport errors, 429 and 5xx responses are retried with exponential
    backoff up to max_attempts; other HTTP errors and malformed payloads fail
    immediately.
    """
    headers = {"Content-Type": "application/json"}
    if auth:
        headers["Authorization"] = f"Bearer {auth}"
    body = {"input": texts, "model": model}

    own_client = client is None
    http = client or httpx.Client(timeout=timeout)
    try:
        last_error: Exception | None = None
        for attempt in range(1, max_attempts + 1):
            try:
                response = http.post(endpoint, json=body, headers=headers)
            except httpx.TransportError as exc:
                last_error = exc
                logger.warning(
                    "embed request transport error (attempt %d/%d): %s",
                    attempt, max_attempts, exc,
                )
            else:
                if response.status_code == 200:
                    if attempt > 1:
                        logger.info("embed request succeeded after %d attempts", attempt)
                    return _parse_embedding_response(
                        response, len(texts), expected_dimension
                    )
                if response.status_code in (429,) or response.status_code >= 500:
                    last_error = ProviderError(
                        f"HTTP {response.status_code} from {endpoint}"
                    )
                    logger.warning(
                        "embed request failed (attempt %d/%d): HTTP %s",
                        attempt, max_attempts, response.status_code,
                    )
                else:
                    raise ProviderError(
                        f"HTTP {response.status_code} from {endpoint}: "
                        f"{response.text[:500]}"
                    )
            if attempt < max_attempts:
                time.sleep(backoff_base * (2 ** (attempt - 1)))
        raise ProviderError(
            f"embedding request failed after {max_attempts} attempts: {last_error}"
        )
    finally:
        if own_client:
            http.close()


def _parse_embedding_response(
    response: httpx.Response, expected_count: int, expected_dimension: int | None
) -> list[np.ndarray]:
    try:
        payload = response.json()
        data = payload["data"]
        slots: list[np.ndarray | None] = [None] * expected_count
        for item in data:
            slots[item["index"]] = np.asarray(item["embedding"], dtype=np.float64)
    except (ValueError, KeyError, TypeError, IndexError) as exc:
        logger.error("malformed embedding response: %s", response.text[:2000])
        raise ProviderProtocolError(f"malformed embedding response: {exc}") from exc
    if any(slot is None for slot in slots):
        logger.error("embedding response missing indices: %s", response.text[:2000])
        raise ProviderProtocolError(
            f"embedding response covered {sum(s is not None for s in slots)}"
            f" of {expected_count} inputs"
        )
    vectors = [slot for slot in slots if slot is not None]
    for vec in vectors:
        if expected_dimension is not None and vec.shape[0] != expected_dimension:
            raise DimensionMismatchError(
                f"provider returned dimension {vec.shape[0]},"
                f" declared {expected_dimension}"
            )
    try:
        return [_normalize(v) for v in vectors]
    except ProviderError as exc:
        raise ProviderProtocolError(str(exc)) from exc


class RemoteProvider:
    """OpenAI-compatible embeddings endpoint; auth comes from the environment."""

    kind = "remote-http"

    def __init__(
        self,
        model: str,
        endpoint: str,
        dimension: int = DEFAULT_REMOTE_DIMENSION,
        provider_id: str | None = None,
        api_key_env: str = "OPENAI_API_KEY",
        batch_size: int = DEFAULT_BATCH_SIZE,
        max_attempts: int = 3,
        backoff_base: float = 0.5,
        timeout: float = 60.0,
        transport: httpx.BaseTransport | None = None,
    ):
        self.model = model
        self.endpoint = endpoint
        self.dimension = dimension
        self.provider_id = provider_id or f"remote:{model}"
        self.api_key_env = api_key_env
        self.batch_size = batch_size
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self._client = httpx.Client(transport=transport, timeout=timeout)

    def embed_batch(self, texts: list[str]) -> list[np.ndarray]:
        return remote_embed(
            texts,
            endpoint=self.endpoint,
            model=self.model,
            auth=os.environ.get(self.api_key_env),
            client=self._client,
            max_attempts=self.max_attempts,
            backoff_base=self.backoff_base,
            expected_dimension=self.dimension,
        )

    def close(self) -> None:
        self._client.close()


# --- external-process provider ------------------------------------------------


class ProcessProvider:
    """Line-delimited JSON protocol over a child process's stdin/stdout.

    Request:  {"id": <int>, "text": <str>}\\n
    Response: {"id": <int>, "embedding": [<float>, ...]}\\n
    Responses may arrive in any order; they are matched by id.
    """

    kind = "external-process"

    def __init__(
        self,
        command: str | list[str],
        dimension: int,
        provider_id: str | None = None,
        batch_size: int = DEFAULT_BATCH_SIZE,
    ):
        self.command = shlex.split(command) if isinstance(command, str) else command
        self.dimension = dimension
        self.provider_id = provider_id or f"proc:{Path(self.command[0]).name}"
        self.batch_size = batch_size
        self._proc: subprocess.Popen | None = None
        self._lock = threading.Lock()

    def _ensure_process(self) -> subprocess.Popen:
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(
                self.command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        return self._proc

    def embed_batch(self, texts: list[str]) -> list[np.ndarray]:
        with self._lock:
            proc = self._ensure_process()
            assert proc.stdin is not None and proc.stdout is not None
            try:
                for i, text in enumerate(texts):
                    proc.stdin.write(json.dumps({"id": i, "text": text}) + "\n")
                proc.stdin.flush()
            except (BrokenPipeError, OSError) as exc:
                raise ProviderError(f"embedding process died: {exc}") from exc
            slots: list[np.ndarray | None] = [None] * len(texts)
            for _ in texts:
                line = proc.stdout.readline()
                if not line:
                    raise ProviderError(
                        f"embedding process closed stdout"
                        f" (exit code {proc.poll()})"
                    )
                try:
                    reply = json.loads(line)
                    slots[reply["id"]] = np.asarray(reply["embedding"], dtype=np.float64)
                except (ValueError, KeyError, TypeError, IndexError) as exc:
                    raise ProviderProtocolError(
                        f"bad response line from embedding process: {line[:200]!r}"
                    ) from exc
            vectors = []
            for i, slot in enumerate(slots):
                if slot is None:
                    raise ProviderProtocolError(f"no response for request id {i}")
                if slot.shape[0] != self.dimension:
                    raise DimensionMismatchError(
                        f"process returned dimension {slot.shape[0]},"
                        f" declared {self.dimension}"
                    )
                vectors.append(slot)
            return vectors

    def close(self) -> None:
        if self._proc is not None and self._proc.poll() is None:
            if self._proc.stdin is not None:
                self._proc.stdin.close()
            self._proc.wait(timeout=10)
        self._proc = None


# --- provider spec parsing ------------------------------------------------------


def parse_provider(
    spec: str,
    *,
    endpoint: str | None = None,
    dimension: int | None = None,
    api_key_env: str = "OPENAI_API_KEY",
    transport: httpx.BaseTransport | None = None,
):
    """Build a provider from a CLI spec string.

    Forms: "hash-<dim>", "hash-<dim>@<seed>", "remote:<model>[@<endpoint>]",
    "proc:<command>".
    """
    if spec.startswith("hash-"):
        rest = spec[len("hash-"):]
        seed = 0
        if "@" in rest:
            rest, seed_text = rest.split("@", 1)
            seed = int(seed_text)
        return HashProvider(dimension=int(rest), seed=seed)
    if spec.startswith("remote:"):
        rest = spec[len("remote:"):]
        url = endpoint
        if "@" in rest:
            rest, url = rest.split("@", 1)
        if not url:
            raise ValueError(f"remote provider {spec!r} needs an endpoint URL")
        return RemoteProvider(
            model=rest,
            endpoint=url,
            dimension=dimension or DEFAULT_REMOTE_DIMENSION,
            api_key_env=api_key_env,
            transport=transport,
        )
    if spec.startswith("proc:"):
        if dimension is None:
            raise ValueError(f"process provider {spec!r} needs an explicit dimension")
        return ProcessProvider(command=spec[len("proc:"):], dimension=dimension)
    raise ValueError(f"unknown provider spec {spec!r}")


# --- orchestration ---------------------------------------------------------------


def embed_fragments(
    fragments: list[CodeFragment],
    provider,
    code_length: int = 128,
    cache: EmbeddingCache | None = None,
    parallelism: int = 1,
) -> EmbedOutcome:
    """Embed fragments through one provider with cache-first lookup.

    Cache hits never reach the provider, and duplicate input texts are sent
    only once per call. Provider failures surface as a per-fragment failure
    list; successfully embedded fragments are still returned, in input order.
    """
    if not fragments:
        return EmbedOutcome(records=[])

    texts = [provider_input_text(f, code_length) for f in fragments]
    hashes = [content_hash_of(t) for t in texts]
    keys: list[CacheKey] = [(h, provider.provider_id, code_length) for h in hashes]

    cached = cache.get_many(sorted(set(keys))) if cache is not None else {}

    vectors_by_hash: dict[str, np.ndarray] = {
        key[0]: np.asarray(vec, dtype=np.float64) for key, vec in cached.items()
    }
    pending: dict[str, str] = {}  # content_hash -> text, deduplicated
    for text, chash in zip(texts, hashes):
        if chash not in vectors_by_hash and chash not in pending:
            pending[chash] = text

    failures_by_hash: dict[str, str] = {}
    if pending:
        pending_items = list(pending.items())
        batches = [
            pending_items[i : i + provider.batch_size]
            for i in range(0, len(pending_items), provider.batch_size)
        ]

        def run_batch(batch: list[tuple[str, str]]) -> tuple[list[np.ndarray] | None, str]:
            try:
                return provider.embed_batch([text for _, text in batch]), ""
            except (ProviderError, DimensionMismatchError) as exc:
                return None, str(exc)

        if parallelism > 1 and len(batches) > 1:
            with ThreadPoolExecutor(max_workers=parallelism) as pool:
                results = list(pool.map(run_batch, batches))
        else:
            results = [run_batch(b) for b in batches]

        new_entries: list[tuple[CacheKey, list[float]]] = []
        for batch, (vectors, error) in zip(batches, results):
            if vectors is None:
                for chash, _ in batch:
                    failures_by_hash[chash] = error
                continue
            for (chash, _), vector in zip(batch, vectors):
                normalized = _normalize(vector)
                if normalized.shape[0] != provider.dimension:
                    failures_by_hash[chash] = (
                        f"dimension {normalized.shape[0]} != declared {provider.dimension}"
                    )
                    continue
                vectors_by_hash[chash] = normalized
                new_entries.append(
                    ((chash, provider.provider_id, code_length), normalized.tolist())
                )
        if cache is not None and new_entries:
            cache.put_many(new_entries)

    records: list[EmbeddingRecord] = []
    failures: list[EmbedFailure] = []
    for fragment, chash in zip(fragments, hashes):
        if chash in vectors_by_hash:
            records.append(
                EmbeddingRecord(
                    fragment_id=fragment.fragment_id,
                    provider_id=provider.provider_id,
                    content_hash=chash,
                    vector=vectors_by_hash[chash],
                )
            )
        else:
            failures.append(
                EmbedFailure(
                    fragment_id=fragment.fragment_id,
                    reason=failures_by_hash.get(chash, "unknown embedding failure"),
                )
            )
    if failures:
        logger.warning(
            "%d of %d fragments failed to embed with %s",
            len(failures), len(fragments), provider.provider_id,
        )
    return EmbedOutcome(records=records, failures=failures)


# --- embedding file format ---------------------------------------------------------


def write_embeddings(records: list[EmbeddingRecord], out: str | Path) -> int:
    """One JSON record per line; refuses to mix provider_ids in one file."""
    providers = {r.provider_id for r in records}
    if len(providers) > 1:
        raise FragmentFormatError(
            f"embedding file must hold one provider, got {sorted(providers)}"
        )
    out = Path(out)
    tmp = out.with_name(out.name + ".tmp")
    with tmp.open("w", encoding="utf-8") as handle:
        for record in records:
            handle.write(
                json.dumps(
                    {
                        "fragment_id": record.fragment_id,
                        "provider_id": record.provider_id,
                        "content_hash": record.content_hash,
                        "vector": record.vector.tolist(),
                    },
                    separators=(",", ":"),
                )
            )
            handle.write("\n")
    os.replace(tmp, out)
    return len(records)


def read_embeddings(path: str | Path) -> list[EmbeddingRecord]:
    records: list[EmbeddingRecord] = []
    providers: set[str] = set()
    with Path(path).open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
                record = EmbeddingRecord(
                    fragment_id=raw["fragment_id"],
                    provider_id=raw["provider_id"],
                    content_hash=raw["content_hash"],
                    vector=np.asarray(raw["vector"], dtype=np.float64),
                )
            except (ValueError, KeyError, TypeError) as exc:
                raise FragmentFormatError(
                    f"{path}:{lineno}: bad embedding record: {exc}"
                ) from exc
            record.validate()
            providers.add(record.provider_id)
            if len(providers) > 1:
                raise FragmentFormatError(
                    f"{path}:{lineno}: mixed provider_ids {sorted(providers)}"
                )
            records.append(record)
    return records
