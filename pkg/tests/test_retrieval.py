import json

import numpy as np
import pytest

from embrank.errors import DataError, UsageError
from embrank.numerics import make_rng
from embrank.retrieval import (
    Bm25Index,
    HashEncoder,
    Passage,
    Query,
    Retriever,
    VectorIndex,
    load_bm25,
    read_corpus,
    read_embeddings,
    read_queries,
    retrieve_topk,
    save_bm25,
    write_corpus,
    write_embeddings,
)
from embrank.text import split_terms, stable_hash, tokenize

from conftest import TOY_TEXTS, exhaustive_topk


class TestTokenize:
    def test_empty(self):
        assert tokenize("", 64) == []

    def test_case_folding_and_determinism(self):
        ids = tokenize("Hello, hello", 64)
        assert len(ids) == 2
        assert ids[0] == ids[1]

    def test_golden_snapshot(self):
        # Frozen after first implementation; FNV-1a is platform independent.
        assert tokenize("the quick brown fox jumped over the lazy dog", 64) == [
            60, 28, 15, 14, 20, 47, 60, 47, 41,
        ]

    def test_ids_in_range(self):
        ids = tokenize("a sentence with several different words 123", 17)
        assert all(0 <= i < 17 for i in ids)

    def test_split_terms_drops_punctuation(self):
        assert split_terms("Hello, WORLD-of2 things!") == ["hello", "world", "of2", "things"]

    def test_stable_hash_is_stable(self):
        assert stable_hash("alpha") == stable_hash("alpha")
        assert stable_hash("alpha") != stable_hash("beta")


class TestBm25:
    def test_query_with_no_indexed_terms_scores_zero(self):
        index = Bm25Index.build([Passage(id="d1", text="the quick brown fox")])
        assert index.score(Query(id="q", text="zebra unicorn"), "d1") == 0.0

    def test_single_doc_hand_formula(self):
        # One doc, query of two present terms, k1=0.9, b=0.4, dl=avgdl:
        # each term scores idf * (1*(k1+1)) / (1 + k1) = idf = ln(1 + 0.5/1.5).
        # Total frozen from a 50-digit Decimal evaluation.
        index = Bm25Index.build([Passage(id="d1", text="the quick brown fox")])
        score = index.score(Query(id="q", text="quick fox"), "d1")
        assert abs(score - 0.5753641449035618) < 1e-12

    def test_containing_doc_scores_strictly_higher(self):
        docs = [
            Passage(id="a", text="apples and oranges here"),
            Passage(id="b", text="just some other words"),
        ]
        index = Bm25Index.build(docs)
        q = Query(id="q", text="apples")
        assert index.score(q, "a") > index.score(q, "b")
        assert index.score(q, "b") == 0.0

    def test_unknown_passage_is_error(self):
        index = Bm25Index.build([Passage(id="d1", text="something")])
        with pytest.raises(DataError, match="not indexed"):
            index.score(Query(id="q", text="something"), "missing")

    def test_search_matches_pointwise_scores(self):
        docs = [Passage(id=f"d{i}", text=t) for i, t in enumerate(TOY_TEXTS)]
        index = Bm25Index.build(docs)
        q = Query(id="q", text="alpha kappa sigma")
        ranked = index.search(q, k=len(docs))
        for pid, score in ranked:
            assert abs(score - index.score(q, pid)) < 1e-12
        scores = [s for _, s in ranked]
        assert scores == sorted(scores, reverse=True)

    def test_empty_corpus_is_error(self):
        with pytest.raises(DataError, match="empty corpus"):
            Bm25Index.build([])

    def test_json_round_trip(self, tmp_path):
        docs = [Passage(id=f"d{i}", text=t) for i, t in enumerate(TOY_TEXTS)]
        index = Bm25Index.build(docs)
        path = tmp_path / "bm25.json"
        save_bm25(path, index)
        loaded = load_bm25(path)
        q = Query(id="q", text="alpha kappa")
        for d in docs:
            assert abs(index.score(q, d.id) - loaded.score(q, d.id)) < 1e-15
        save_bm25(tmp_path / "again.json", loaded)
        assert path.read_bytes() == (tmp_path / "again.json").read_bytes()


class TestEncoder:
    def test_single_token_is_normalized_row(self, tiny_encoder):
        ids = tokenize("alpha", tiny_encoder.vocab_hash_size)
        row = tiny_encoder.table.value[ids[0]]
        np.testing.assert_allclose(
            tiny_encoder.encode("alpha"), row / np.linalg.norm(row), atol=1e-15
        )

    def test_determinism(self, tiny_encoder):
        a = tiny_encoder.encode("some words here")
        b = tiny_encoder.encode("some words here")
        np.testing.assert_array_equal(a, b)

    def test_two_token_mean_oracle(self, tiny_encoder):
        ids = tokenize("alpha beta", tiny_encoder.vocab_hash_size)
        expected = tiny_encoder.table.value[ids].mean(axis=0)
        expected /= np.linalg.norm(expected)
        np.testing.assert_allclose(tiny_encoder.encode("alpha beta"), expected, atol=1e-15)

    def test_unencodable_text_is_error(self, tiny_encoder):
        with pytest.raises(DataError, match="unencodable"):
            tiny_encoder.encode("...!!!...")

    def test_unit_norm(self, tiny_encoder):
        for text in TOY_TEXTS:
            assert abs(np.linalg.norm(tiny_encoder.encode(text)) - 1.0) < 1e-9

    def test_cls_pooling_returns_reserved_prefix_row(self):
        enc = HashEncoder(dim=8, vocab_hash_size=32, pooling="cls", seed=1)
        row = enc.table.value[enc.cls_row]
        np.testing.assert_allclose(enc.encode("anything"), row / np.linalg.norm(row), atol=1e-15)

    def test_encoder_is_frozen(self, tiny_encoder):
        assert not tiny_encoder.table.trainable

    def test_same_seed_same_table(self):
        a = HashEncoder(dim=8, vocab_hash_size=32, seed=11)
        b = HashEncoder(dim=8, vocab_hash_size=32, seed=11)
        np.testing.assert_array_equal(a.table.value, b.table.value)


class TestRetrieveTopk:
    @pytest.fixture
    def retriever(self, tiny_encoder):
        rng = make_rng(0)
        passages = []
        for i in range(10):
            words = [TOY_TEXTS[j % len(TOY_TEXTS)].split()[i % 5] for j in range(i, i + 4)]
            words.append(f"unique{i}")
            rng.shuffle(words)
            passages.append(Passage(id=f"d{i:02d}", text=" ".join(words)))
        return Retriever(passages, tiny_encoder)

    def test_k_at_least_corpus_returns_everything(self, retriever):
        hits = retrieve_topk(retriever, Query(id="q", text="alpha unique3"), k=99)
        assert len(hits) == 10
        scores = [h.score for h in hits]
        assert scores == sorted(scores, reverse=True)

    def test_query_identical_to_passage_ranks_first(self, retriever):
        text = retriever.passages["d04"].text
        hits = retrieve_topk(retriever, Query(id="q", text=text), k=3)
        assert hits[0].passage.id == "d04"
        assert abs(hits[0].score - 1.0) < 1e-9

    def test_matches_bruteforce_oracle(self, retriever, tiny_encoder):
        q = Query(id="q", text="alpha zeta unique7")
        qvec = tiny_encoder.encode(q.text)
        expected = exhaustive_topk(retriever.vindex.matrix, retriever.vindex.ids, qvec, 3)
        hits = retrieve_topk(retriever, q, k=3, backend="dense")
        assert [(h.passage.id, round(h.score, 12)) for h in hits] == [
            (pid, round(s, 12)) for pid, s in expected
        ]

    def test_embeddings_come_back_unit_norm(self, retriever):
        for h in retrieve_topk(retriever, Query(id="q", text="alpha"), k=10):
            assert abs(np.linalg.norm(h.embedding) - 1.0) < 1e-9

    def test_bm25_backend(self, retriever):
        hits = retrieve_topk(retriever, Query(id="q", text="unique5"), k=2, backend="bm25")
        assert hits[0].passage.id == "d05"

    def test_bad_k_is_error(self, retriever):
        with pytest.raises(UsageError):
            retrieve_topk(retriever, Query(id="q", text="alpha"), k=0)

    def test_unknown_backend_is_error(self, retriever):
        with pytest.raises(UsageError):
            retrieve_topk(retriever, Query(id="q", text="alpha"), k=1, backend="bogus")

    def test_determinism(self, retriever):
        q = Query(id="q", text="alpha zeta")
        first = [(h.passage.id, h.score) for h in retrieve_topk(retriever, q, 5)]
        second = [(h.passage.id, h.score) for h in retrieve_topk(retriever, q, 5)]
        assert first == second

    def test_stored_and_reencoded_embeddings_identical(self, retriever, tiny_encoder):
        # the reuse-or-reencode choice must not change anything
        for h in retrieve_topk(retriever, Query(id="q", text="alpha"), k=10):
            np.testing.assert_array_equal(h.embedding, tiny_encoder.encode(h.passage.text))


class TestFileFormats:
    def test_corpus_round_trip(self, tmp_path):
        passages = [
            Passage(id="a", text="first text", title="First"),
            Passage(id="b", text="second text"),
        ]
        path = tmp_path / "corpus.jsonl"
        write_corpus(path, passages)
        loaded = read_corpus(path)
        assert loaded == passages

    def test_malformed_json_reports_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"id": "a", "text": "ok"}\nnot json\n', encoding="utf-8")
        with pytest.raises(DataError, match="bad.jsonl:2"):
            read_corpus(path)

    def test_duplicate_id_is_error(self, tmp_path):
        path = tmp_path / "dup.jsonl"
        path.write_text(
            '{"id": "a", "text": "x"}\n{"id": "a", "text": "y"}\n', encoding="utf-8"
        )
        with pytest.raises(DataError, match="duplicate"):
            read_corpus(path)

    def test_queries_missing_field_reports_line(self, tmp_path):
        path = tmp_path / "q.jsonl"
        path.write_text('{"id": "q1"}\n', encoding="utf-8")
        with pytest.raises(DataError, match="q.jsonl:1"):
            read_queries(path)

    def test_embeddings_round_trip(self, tmp_path, tiny_encoder):
        ids = [f"d{i}" for i in range(4)]
        matrix = tiny_encoder.encode_batch(TOY_TEXTS[:4])
        path = tmp_path / "emb.jsonl"
        write_embeddings(path, ids, matrix)
        header = json.loads(path.read_text().splitlines()[0])
        assert header == {"dim": tiny_encoder.dim, "count": 4}
        loaded_ids, loaded = read_embeddings(path)
        assert loaded_ids == ids
        np.testing.assert_allclose(loaded, matrix, atol=1e-15)

    def test_embeddings_header_count_mismatch(self, tmp_path):
        path = tmp_path / "emb.jsonl"
        path.write_text('{"dim": 2, "count": 3}\n{"id": "a", "values": [1.0, 0.0]}\n')
        with pytest.raises(DataError, match="promised 3"):
            read_embeddings(path)

    def test_embeddings_renormalized_on_load(self, tmp_path):
        path = tmp_path / "emb.jsonl"
        path.write_text('{"dim": 2, "count": 1}\n{"id": "a", "values": [3.0, 4.0]}\n')
        _, matrix = read_embeddings(path)
        np.testing.assert_allclose(matrix[0], [0.6, 0.8], atol=1e-15)


def test_vector_index_row_lookup(tiny_encoder):
    passages = [Passage(id=f"d{i}", text=t) for i, t in enumerate(TOY_TEXTS)]
    vindex = VectorIndex.from_encoder(passages, tiny_encoder)
    np.testing.assert_array_equal(vindex.row("d2"), tiny_encoder.encode(TOY_TEXTS[2]))
    with pytest.raises(DataError):
        vindex.row("nope")
