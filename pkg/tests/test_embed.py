from __future__ import annotations

import json
import sys

import httpx
import numpy as np
import pytest

from clonefinder.cache import EmbeddingCache
from clonefinder.corpus import CodeFragment
from clonefinder.embed import (
    EmbeddingRecord,
    HashProvider,
    ProcessProvider,
    content_hash_of,
    embed_fragments,
    hash_embed,
    parse_provider,
    provider_input_text,
    read_embeddings,
    remote_embed,
    write_embeddings,
)
from clonefinder.errors import (
    DimensionMismatchError,
    FragmentFormatError,
    ProviderError,
    ProviderProtocolError,
)


def make_fragment(fid: str, tokens: list[str]) -> CodeFragment:
    return CodeFragment(
        fragment_id=fid,
        file_path=fid.split(":")[0],
        function_name=fid.split(":")[1],
        start_line=1,
        end_line=1,
        loc=1,
        tokens=tokens,
        raw_text=" ".join(tokens),
    )


class CountingProvider:
    """Hash provider that records every batch it is asked to embed."""

    kind = "deterministic-local"

    def __init__(self, dimension: int = 32, batch_size: int = 64):
        self.dimension = dimension
        self.batch_size = batch_size
        self.provider_id = f"counting-{dimension}"
        self.calls = 0
        self.texts_seen: list[str] = []

    def embed_batch(self, texts):
        self.calls += 1
        self.texts_seen.extend(texts)
        return [hash_embed(t, self.dimension, 0) for t in texts]


# --- hash_embed ---------------------------------------------------------------


def test_hash_embed_bitwise_deterministic():
    a = hash_embed("int main ( void )", 64, seed=3)
    b = hash_embed("int main ( void )", 64, seed=3)
    assert a.tobytes() == b.tobytes()


def test_hash_embed_is_unit_norm():
    vec = hash_embed("alpha beta gamma delta", 32)
    assert abs(np.linalg.norm(vec) - 1.0) <= 1e-9


def test_hash_embed_order_invariant():
    a = hash_embed("x y z", 32)
    b = hash_embed("z x y", 32)
    assert np.allclose(a, b)


def test_hash_embed_seed_changes_vector():
    assert not np.allclose(hash_embed("a b c", 64, 0), hash_embed("a b c", 64, 1))


def test_hash_embed_shared_token_cosine_ordering():
    # 100 shared tokens; B adds 20 unique; C is fully disjoint. The shared-token
    # cosine must sit strictly between the identical-text value 1.0 and the
    # disjoint-text value (near 0). Expected values computed right here, not assumed.
    shared = [f"s{i}" for i in range(100)]
    a = hash_embed(" ".join(shared), 512)
    b = hash_embed(" ".join(shared + [f"u{i}" for i in range(20)]), 512)
    c = hash_embed(" ".join(f"d{i}" for i in range(100)), 512)
    cos_ab = float(a @ b)
    cos_ac = float(a @ c)
    assert cos_ab < 1.0 - 1e-9
    assert cos_ab > 0.5
    assert abs(cos_ac) < 0.3
    assert cos_ab > cos_ac


def test_hash_embed_rejects_empty():
    with pytest.raises(ValueError):
        hash_embed("   ", 32)


def test_hash_embed_rejects_tiny_dimension():
    with pytest.raises(ValueError):
        hash_embed("a", 4)


# --- embed_fragments and cache ---------------------------------------------------


def test_cold_cache_embeds_every_fragment(tmp_path):
    provider = CountingProvider()
    cache = EmbeddingCache(tmp_path / "cache.db")
    frags = [make_fragment(f"f.c:fn{i}:1", ["tok", str(i)]) for i in range(3)]
    outcome = embed_fragments(frags, provider, 128, cache)
    assert len(outcome.records) == 3 and not outcome.failures
    assert len(provider.texts_seen) == 3
    assert [r.fragment_id for r in outcome.records] == [f.fragment_id for f in frags]


def test_warm_cache_serves_without_provider_calls(tmp_path):
    provider = CountingProvider()
    cache = EmbeddingCache(tmp_path / "cache.db")
    frags = [make_fragment(f"f.c:fn{i}:1", ["tok", str(i)]) for i in range(3)]
    first = embed_fragments(frags, provider, 128, cache)
    calls_after_first = provider.calls
    second = embed_fragments(frags, provider, 128, cache)
    assert provider.calls == calls_after_first  # zero new calls
    for a, b in zip(first.records, second.records):
        assert a.fragment_id == b.fragment_id
        assert a.content_hash == b.content_hash
        assert a.vector.tobytes() == b.vector.tobytes()


def test_provider_never_sees_duplicate_hashes(tmp_path):
    provider = CountingProvider()
    cache = EmbeddingCache(tmp_path / "cache.db")
    groups = [
        [make_fragment(f"a.c:f{i}:1", ["x", str(i % 4)]) for i in range(8)],
        [make_fragment(f"b.c:g{i}:1", ["x", str(i % 6)]) for i in range(12)],
        [make_fragment(f"c.c:h{i}:1", ["x", str(i % 3)]) for i in range(5)],
    ]
    for frags in groups:
        embed_fragments(frags, provider, 128, cache)
    seen_hashes = [content_hash_of(t) for t in provider.texts_seen]
    assert len(seen_hashes) == len(set(seen_hashes))


def test_identical_truncated_text_gives_identical_vectors(tmp_path):
    provider = CountingProvider()
    cache = EmbeddingCache(tmp_path / "cache.db")
    # differ only beyond the truncation point
    base = [f"t{i}" for i in range(128)]
    f1 = make_fragment("a.c:f:1", base + ["extra1"])
    f2 = make_fragment("a.c:g:9", base + ["other2", "other3"])
    outcome = embed_fragments([f1, f2], provider, 128, cache)
    assert outcome.records[0].content_hash == outcome.records[1].content_hash
    assert outcome.records[0].vector.tobytes() == outcome.records[1].vector.tobytes()


def test_code_length_participates_in_cache_key(tmp_path):
    provider = CountingProvider()
    cache = EmbeddingCache(tmp_path / "cache.db")
    frag = make_fragment("a.c:f:1", ["a", "b", "c"])
    embed_fragments([frag], provider, 128, cache)
    embed_fragments([frag], provider, 64, cache)  # below token count: same text
    assert len(provider.texts_seen) == 2  # different code_length must miss


def test_empty_input_returns_empty_outcome():
    outcome = embed_fragments([], CountingProvider(), 128, None)
    assert outcome.records == [] and outcome.failures == []


class FailingProvider(CountingProvider):
    def embed_batch(self, texts):
        self.calls += 1
        raise ProviderError("backend down")


def test_provider_failure_reported_not_silent(tmp_path):
    cache = EmbeddingCache(tmp_path / "cache.db")
    frags = [make_fragment(f"f.c:fn{i}:1", ["q", str(i)]) for i in range(4)]
    outcome = embed_fragments(frags, FailingProvider(), 128, cache)
    assert outcome.records == []
    assert len(outcome.failures) == 4
    assert all("backend down" in f.reason for f in outcome.failures)


def test_partial_batch_failure_keeps_good_records(tmp_path):
    class FlakyProvider:
        kind = "deterministic-local"
        dimension = 32
        batch_size = 2
        provider_id = "flaky"

        def __init__(self):
            self.batches = 0

        def embed_batch(self, texts):
            self.batches += 1
            if self.batches == 2:
                raise ProviderError("boom")
            return [hash_embed(t, 32, 0) for t in texts]

    cache = EmbeddingCache(tmp_path / "cache.db")
    frags = [make_fragment(f"f.c:fn{i}:1", ["w", str(i)]) for i in range(4)]
    outcome = embed_fragments(frags, FlakyProvider(), 128, cache)
    assert len(outcome.records) == 2
    assert len(outcome.failures) == 2


def test_parallel_embedding_matches_serial(tmp_path):
    frags = [make_fragment(f"f.c:fn{i}:1", ["p", str(i)]) for i in range(40)]
    serial = embed_fragments(
        frags, CountingProvider(batch_size=8), 128, EmbeddingCache(tmp_path / "a.db")
    )
    parallel = embed_fragments(
        frags,
        CountingProvider(batch_size=8),
        128,
        EmbeddingCache(tmp_path / "b.db"),
        parallelism=4,
    )
    for a, b in zip(serial.records, parallel.records):
        assert a.fragment_id == b.fragment_id
        assert a.vector.tobytes() == b.vector.tobytes()


# --- remote provider ----------------------------------------------------------------


def _mock_client(handler) -> httpx.Client:
    return httpx.Client(transport=httpx.MockTransport(handler))


def test_remote_embed_round_trip_normalizes():
    fixed = [3.0] + [0.0] * 1535

    def handler(request):
        body = json.loads(request.content)
        assert body["model"] == "embed-large"
        assert request.headers["authorization"] == "Bearer sekrit"
        return httpx.Response(
            200, json={"data": [{"index": 0, "embedding": fixed}]}
        )

    vectors = remote_embed(
        ["int main"], "https://api.test/v1/embeddings", "embed-large",
        auth="sekrit", client=_mock_client(handler), expected_dimension=1536,
    )
    assert len(vectors) == 1
    assert vectors[0][0] == pytest.approx(1.0)
    assert abs(np.linalg.norm(vectors[0]) - 1.0) <= 1e-9


def test_remote_embed_restores_permuted_order():
    def handler(request):
        texts = json.loads(request.content)["input"]
        data = [
            {"index": i, "embedding": [float(i + 1)] + [1.0] * 7}
            for i in range(len(texts))
        ]
        return httpx.Response(200, json={"data": list(reversed(data))})

    vectors = remote_embed(
        ["a", "b", "c"], "https://api.test/v1/embeddings", "m",
        client=_mock_client(handler),
    )
    firsts = [float(v[0] * np.linalg.norm([i + 1.0] + [1.0] * 7)) for i, v in enumerate(vectors)]
    assert firsts == pytest.approx([1.0, 2.0, 3.0])


def test_remote_embed_retries_then_succeeds(caplog):
    attempts = {"n": 0}

    def handler(request):
        attempts["n"] += 1
        if attempts["n"] <= 2:
            return httpx.Response(500, text="later")
        return httpx.Response(200, json={"data": [{"index": 0, "embedding": [1.0] * 8}]})

    with caplog.at_level("INFO", logger="clonefinder.embed"):
        vectors = remote_embed(
            ["t"], "https://api.test/e", "m",
            client=_mock_client(handler), backoff_base=0.0,
        )
    assert attempts["n"] == 3
    assert len(vectors) == 1
    assert any("after 3 attempts" in message for message in caplog.messages)


def test_remote_embed_fails_after_bounded_retries():
    def handler(request):
        return httpx.Response(503, text="nope")

    with pytest.raises(ProviderError, match="after 3 attempts"):
        remote_embed(
            ["t"], "https://api.test/e", "m",
            client=_mock_client(handler), backoff_base=0.0,
        )


def test_remote_embed_client_error_is_not_retried():
    attempts = {"n": 0}

    def handler(request):
        attempts["n"] += 1
        return httpx.Response(401, text="bad key")

    with pytest.raises(ProviderError, match="401"):
        remote_embed(["t"], "https://api.test/e", "m", client=_mock_client(handler))
    assert attempts["n"] == 1


def test_remote_embed_malformed_response_is_protocol_error():
    def handler(request):
        return httpx.Response(200, json={"results": "wrong shape"})

    with pytest.raises(ProviderProtocolError):
        remote_embed(["t"], "https://api.test/e", "m", client=_mock_client(handler))


def test_remote_embed_validates_dimension():
    def handler(request):
        return httpx.Response(200, json={"data": [{"index": 0, "embedding": [1.0] * 8}]})

    with pytest.raises(DimensionMismatchError):
        remote_embed(
            ["t"], "https://api.test/e", "m",
            client=_mock_client(handler), expected_dimension=1536,
        )


# --- external-process provider ---------------------------------------------------


CHILD_SCRIPT = """\
import json
import sys

def vec_for(text):
    toks = text.split()
    return [float(len(toks))] + [1.0] * 7

buffer = []
for line in sys.stdin:
    buffer.append(json.loads(line))
    if len(buffer) == 2:  # respond pairwise in reverse to exercise id matching
        for req in reversed(buffer):
            print(json.dumps({"id": req["id"], "embedding": vec_for(req["text"])}))
        sys.stdout.flush()
        buffer = []
if buffer:
    req = buffer[0]
    print(json.dumps({"id": req["id"], "embedding": vec_for(req["text"])}))
    sys.stdout.flush()
"""


def test_process_provider_round_trip(tmp_path):
    script = tmp_path / "child.py"
    script.write_text(CHILD_SCRIPT, encoding="utf-8")
    provider = ProcessProvider([sys.executable, str(script)], dimension=8)
    try:
        vectors = provider.embed_batch(
            ["one", "two tokens", "three tokens here", "now four tokens here"]
        )
        assert [float(v[0]) for v in vectors] == [1.0, 2.0, 3.0, 4.0]
    finally:
        provider.close()


def test_process_provider_death_is_provider_error(tmp_path):
    script = tmp_path / "dead.py"
    script.write_text("import sys; sys.exit(3)\n", encoding="utf-8")
    provider = ProcessProvider([sys.executable, str(script)], dimension=8)
    try:
        with pytest.raises(ProviderError):
            provider.embed_batch(["x"])
    finally:
        provider.close()


# --- provider specs and file format --------------------------------------------------


def test_parse_provider_specs():
    hp = parse_provider("hash-256")
    assert hp.dimension == 256 and hp.seed == 0 and hp.provider_id == "hash-256"
    hp2 = parse_provider("hash-64@7")
    assert hp2.dimension == 64 and hp2.seed == 7
    rp = parse_provider("remote:embed-small@https://api.test/v1")
    assert rp.model == "embed-small" and rp.endpoint == "https://api.test/v1"
    assert rp.dimension == 1536
    with pytest.raises(ValueError):
        parse_provider("remote:no-endpoint")
    with pytest.raises(ValueError):
        parse_provider("bogus-spec")


def test_write_embeddings_rejects_mixed_providers(tmp_path):
    rec = lambda pid: EmbeddingRecord("a.c:f:1", pid, "h", np.array([1.0, 0.0]))
    with pytest.raises(FragmentFormatError):
        write_embeddings([rec("p1"), rec("p2")], tmp_path / "e.ndjson")


def test_embeddings_round_trip(tmp_path):
    provider = HashProvider(dimension=32)
    frags = [make_fragment(f"f.c:fn{i}:1", ["r", str(i)]) for i in range(3)]
    records = embed_fragments(frags, provider, 128, None).records
    out = tmp_path / "emb.ndjson"
    assert write_embeddings(records, out) == 3
    back = read_embeddings(out)
    for a, b in zip(records, back):
        assert a.fragment_id == b.fragment_id
        assert a.content_hash == b.content_hash
        assert a.vector.tobytes() == b.vector.tobytes()


def test_read_embeddings_rejects_bad_norm(tmp_path):
    out = tmp_path / "emb.ndjson"
    out.write_text(
        json.dumps(
            {"fragment_id": "a", "provider_id": "p", "content_hash": "h",
             "vector": [1.0, 1.0]}
        ) + "\n",
        encoding="utf-8",
    )
    with pytest.raises(FragmentFormatError):
        read_embeddings(out)
