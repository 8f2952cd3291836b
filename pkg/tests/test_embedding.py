import numpy as np
import pytest

from cuiset.embedding import (
    DeterministicLocalProvider,
    EmbeddingCache,
    NodeText,
    RemoteEmbeddingProvider,
    embed_all,
    node_text,
)
from cuiset.errors import ProviderError
from cuiset.graph import ConceptNode


def make_node(**overrides):
    base = dict(
        cui="C0000001",
        preferred_name="barline osteix",
        synonyms=["osteix variant", "barline form"],
        definition="a barline pattern",
        semantic_types={"Finding", "Disease or Syndrome"},
        source_vocabularies={"NCI", "SNOMEDCT_US"},
    )
    base.update(overrides)
    return ConceptNode(**base)


class TestNodeText:
    def test_template_matches_independent_oracle(self):
        node = make_node()
        expected = (
            "Name: barline osteix\n"
            "Synonyms: barline form; osteix variant\n"
            "Definition: a barline pattern\n"
            "Semantic types: Disease or Syndrome; Finding\n"
            "Sources: NCI; SNOMEDCT_US"
        )
        assert node_text(node).text == expected

    def test_missing_definition_renders_none(self):
        text = node_text(make_node(definition=None)).text
        assert "Definition: none" in text

    def test_identical_nodes_identical_text(self):
        assert node_text(make_node()) == node_text(make_node())

    def test_synonym_order_is_canonical(self):
        a = node_text(make_node(synonyms=["zz", "aa"]))
        b = node_text(make_node(synonyms=["aa", "zz"]))
        assert a.text == b.text


class TestLocalProvider:
    def test_bit_identical_across_instances(self):
        texts = [f"token{i} shared words" for i in range(20)]
        m1 = DeterministicLocalProvider().embed_batch(texts)
        m2 = DeterministicLocalProvider().embed_batch(texts)
        assert m1.dtype == np.float32
        assert np.array_equal(m1, m2)

    def test_vectors_unit_norm(self):
        m = DeterministicLocalProvider().embed_batch(["alpha beta gamma", "delta"])
        norms = np.linalg.norm(m.astype(np.float64), axis=1)
        assert np.allclose(norms, 1.0, atol=1e-6)

    def test_seed_changes_vectors(self):
        a = DeterministicLocalProvider(seed=0).embed_batch(["same text"])
        b = DeterministicLocalProvider(seed=1).embed_batch(["same text"])
        assert not np.array_equal(a, b)

    def test_shared_tokens_increase_similarity(self):
        p = DeterministicLocalProvider()
        q, near, far = p.embed_batch(
            ["velquarsis disorder", "velquarsis variant", "unrelated words entirely"]
        )
        assert np.linalg.norm(q - near) < np.linalg.norm(q - far)

    def test_whitespace_only_text(self):
        m = DeterministicLocalProvider().embed_batch(["   "])
        assert np.isfinite(m).all()


class CountingProvider:
    name = "counting"
    dimension = 8
    kind = "deterministic-local"

    def __init__(self, fail_times: int = 0):
        self.calls = []
        self.fail_times = fail_times

    def embed_batch(self, texts):
        if self.fail_times > 0:
            self.fail_times -= 1
            raise ProviderError("transient")
        self.calls.append(len(texts))
        rng = np.random.default_rng(len(texts))
        return rng.standard_normal((len(texts), 8)).astype(np.float32)


def items(n):
    return [NodeText(cui=f"C{i + 1:07d}", text=f"text {i}") for i in range(n)]


class TestEmbedAll:
    def test_empty_corpus(self):
        matrix, cuis = embed_all([], CountingProvider(), batch=4)
        assert matrix.shape == (0, 8) and cuis == []

    def test_batch_arithmetic(self):
        provider = CountingProvider()
        embed_all(items(3), provider, batch=2)
        assert provider.calls == [2, 1]

    def test_order_preserved(self):
        provider = DeterministicLocalProvider(dimension=16)
        texts = items(7)
        matrix, cuis = embed_all(texts, provider, batch=3)
        assert cuis == [t.cui for t in texts]
        direct = provider.embed_batch([t.text for t in texts])
        assert np.array_equal(matrix, direct)

    def test_retry_then_success(self):
        provider = CountingProvider(fail_times=2)
        matrix, _ = embed_all(items(2), provider, batch=2, backoff=0.001)
        assert matrix.shape == (2, 8)

    def test_exhausted_retries_name_batch(self):
        provider = CountingProvider(fail_times=99)
        with pytest.raises(ProviderError, match="batch 0"):
            embed_all(items(2), provider, batch=2, max_retries=1, backoff=0.001)

    def test_invalid_batch_size(self):
        with pytest.raises(ValueError):
            embed_all(items(1), CountingProvider(), batch=0)

    def test_concurrent_batches_keep_order(self):
        provider = DeterministicLocalProvider(dimension=16)
        texts = items(20)
        serial, _ = embed_all(texts, provider, batch=3, max_in_flight=1)
        threaded, _ = embed_all(texts, provider, batch=3, max_in_flight=4)
        assert np.array_equal(serial, threaded)


class TestCache:
    def test_second_pass_hits_cache(self, tmp_path):
        cache = EmbeddingCache(tmp_path / "cache.sqlite")
        provider = CountingProvider()
        texts = items(5)
        first, _ = embed_all(texts, provider, batch=2, cache=cache)
        calls_after_first = list(provider.calls)
        second, _ = embed_all(texts, provider, batch=2, cache=cache)
        assert provider.calls == calls_after_first  # no new provider calls
        assert np.array_equal(first, second)
        cache.close()

    def test_cache_is_provider_scoped(self, tmp_path):
        cache = EmbeddingCache(tmp_path / "cache.sqlite")
        texts = items(3)
        a = CountingProvider()
        embed_all(texts, a, batch=4, cache=cache)

        class OtherProvider(CountingProvider):
            name = "other"

        b = OtherProvider()
        embed_all(texts, b, batch=4, cache=cache)
        assert b.calls  # different provider name, cache miss
        cache.close()


class TestRemoteProvider:
    def test_missing_api_key(self, monkeypatch):
        monkeypatch.delenv("TEST_EMB_KEY", raising=False)
        provider = RemoteEmbeddingProvider(
            model="emb-model", dimension=4, api_key_env="TEST_EMB_KEY"
        )
        with pytest.raises(ProviderError, match="TEST_EMB_KEY"):
            provider.embed_batch(["x"])

    def test_parses_payload_and_restores_order(self, monkeypatch):
        import httpx

        monkeypatch.setenv("TEST_EMB_KEY", "secret")

        captured = {}

        def fake_post(url, json=None, headers=None, timeout=None):
            captured["url"] = url
            captured["auth"] = headers["Authorization"]
            data = [
                {"index": 1, "embedding": [1.0, 0.0, 0.0, 0.0]},
                {"index": 0, "embedding": [0.0, 1.0, 0.0, 0.0]},
            ]
            return httpx.Response(200, json={"data": data})

        monkeypatch.setattr(httpx, "post", fake_post)
        provider = RemoteEmbeddingProvider(
            model="emb-model", dimension=4, api_key_env="TEST_EMB_KEY"
        )
        matrix = provider.embed_batch(["a", "b"])
        assert captured["url"].endswith("/embeddings")
        assert captured["auth"] == "Bearer secret"
        assert matrix[0, 1] == 1.0 and matrix[1, 0] == 1.0

    def test_http_error_surfaces(self, monkeypatch):
        import httpx

        monkeypatch.setenv("TEST_EMB_KEY", "secret")
        monkeypatch.setattr(
            httpx, "post", lambda *a, **k: httpx.Response(429, text="rate limited")
        )
        provider = RemoteEmbeddingProvider(
            model="emb-model", dimension=4, api_key_env="TEST_EMB_KEY"
        )
        with pytest.raises(ProviderError, match="429"):
            provider.embed_batch(["a"])
