"""Content-addressed embedding cache.

Keyed by (content_hash of the exact provider input text, provider_id,
code_length) so any change to truncation or preprocessing misses. Backed by
sqlite so concurrent workers (threads or processes) can share one cache file.
"""

from __future__ import annotations

import json
import sqlite3
import threading
from pathlib import Path

CacheKey = tuple[str, str, int]  # (content_hash, provider_id, code_length)

_SCHEMA = """
CREATE TABLE IF NOT EXISTS embeddings (
    content_hash TEXT NOT NULL,
    provider_id  TEXT NOT NULL,
    code_length  INTEGER NOT NULL,
    vector       TEXT NOT NULL,
    PRIMARY KEY (content_hash, provider_id, code_length)
)
"""


class EmbeddingCache:
    """Persistent vector cache; safe for concurrent readers and writers."""

    def __init__(self, path: str | Path):
        self.path = str(path)
        self._lock = threading.Lock()
        self._conn = sqlite3.connect(
            self.path, isolation_level=None, check_same_thread=False, timeout=30.0
        )
        with self._lock:
            self._conn.execute("PRAGMA journal_mode=WAL")
            self._conn.execute("PRAGMA busy_timeout=30000")
            self._conn.execute(_SCHEMA)

    def get_many(self, keys: list[CacheKey]) -> dict[CacheKey, list[float]]:
        found: dict[CacheKey, list[float]] = {}
        with self._lock:
            for key in keys:
                row = self._conn.execute(
                    "SELECT vector FROM embeddings"
                    " WHERE content_hash=? AND provider_id=? AND code_length=?",
                    key,
                ).fetchone()
                if row is not None:
                    found[key] = json.loads(row[0])
        return found

    def put_many(self, entries: list[tuple[CacheKey, list[float]]]) -> None:
        with self._lock:
            self._conn.executemany(
                "INSERT OR REPLACE INTO embeddings"
                " (content_hash, provider_id, code_length, vector) VALUES (?, ?, ?, ?)",
                [(k[0], k[1], k[2], json.dumps(vec)) for k, vec in entries],
            )

    def __len__(self) -> int:
        with self._lock:
            return self._conn.execute("SELECT COUNT(*) FROM embeddings").fetchone()[0]

    def close(self) -> None:
        with self._lock:
            self._conn.close()

    def __enter__(self) -> "EmbeddingCache":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
