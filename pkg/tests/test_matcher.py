"""Scoring, the subset oracle, index build/IO, and exact top-k retrieval."""

import numpy as np
import pytest

from viewret.corpus import EntityCorpus, EntityRecord, Vocabulary
from viewret.encoder import encode_entity, fingerprint, init_dual
from viewret.matcher import (
    INDEX_MAGIC,
    EntityIndex,
    IndexedEntity,
    RetrievalResult,
    StaleIndexError,
    build_index,
    load_index,
    matching_score,
    optimal_subset_oracle,
    read_results,
    require_fresh,
    retrieve,
    save_index,
    score,
    write_results,
)
from viewret.views import build_views


def indexed(entity_id, vectors, view_ids=None):
    vectors = np.asarray(vectors, dtype=np.float64)
    if view_ids is None:
        view_ids = np.arange(len(vectors))
    return IndexedEntity(entity_id, np.asarray(view_ids, dtype=np.int64), vectors)


class TestScore:
    def test_zero_mention_vector(self):
        assert score(np.zeros(3), np.array([1.0, -2.0, 5.0])) == 0.0

    def test_identical_unit_vectors(self):
        v = np.array([1.0, 0.0])
        assert score(v, v) == 1.0

    def test_hand_arithmetic(self):
        assert score(np.array([1.0, 2.0]), np.array([3.0, -1.0])) == 1.0

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            score(np.zeros(2), np.zeros(3))


class TestMatchingScore:
    def test_single_view(self):
        e = indexed("e1", [[0.5, 0.5]])
        vid, s = matching_score(np.array([1.0, 1.0]), e)
        assert (vid, s) == (0, 1.0)

    def test_tie_takes_smaller_view_id(self):
        e = indexed("e1", [[0.2, 0.0], [0.9, 0.0], [0.9, 0.0]])
        vid, s = matching_score(np.array([1.0, 0.0]), e)
        assert vid == 1
        assert s == 0.9

    def test_no_views_rejected(self):
        e = indexed("e1", np.zeros((0, 2)))
        with pytest.raises(ValueError, match="no cached views"):
            matching_score(np.zeros(2), e)

    def test_appending_views_never_decreases_score(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            dim = int(rng.integers(2, 8))
            n = int(rng.integers(1, 6))
            vectors = rng.normal(size=(n, dim))
            mention = rng.normal(size=dim)
            _, before = matching_score(mention, indexed("e", vectors))
            grown = np.vstack([vectors, rng.normal(size=(1, dim))])
            _, after = matching_score(mention, indexed("e", grown))
            assert after >= before


def random_viewset(rng, n_sentences, vocab, max_tokens=12):
    words = " ".join(
        " ".join(f"t{rng.integers(30)}" for _ in range(int(rng.integers(2, 6)))) + "."
        for _ in range(n_sentences)
    )
    entity = EntityRecord(f"e{rng.integers(10**6)}", f"title{rng.integers(30)}", words)
    return build_views(entity, vocab, max_tokens)


class TestOptimalSubsetOracle:
    def test_single_view_case(self):
        vocab = Vocabulary()
        vs = build_views(EntityRecord("e1", "t", "only one."), vocab, 40)
        model = init_dual(vocab, 4, seed=0)
        mention = np.ones(4)
        indices, s = optimal_subset_oracle(mention, vs, model.entity_side)
        assert indices == (0,)
        vec = encode_entity(model.entity_side, vs.title_tokens, vs.views[0].tokens)
        assert s == float(np.dot(mention, vec))

    def test_oracle_at_least_best_singleton(self):
        rng = np.random.default_rng(17)
        vocab = Vocabulary()
        for _ in range(40):
            vs = random_viewset(rng, int(rng.integers(1, 7)), vocab)
            model = init_dual(vocab, int(rng.integers(2, 9)), seed=int(rng.integers(99)))
            mention = rng.normal(size=model.dim)
            basic_vecs = np.stack([
                encode_entity(model.entity_side, vs.title_tokens, v.tokens)
                for v in vs.views
            ])
            _, best_single = matching_score(mention, indexed(vs.entity_id, basic_vecs))
            _, oracle_score = optimal_subset_oracle(mention, vs, model.entity_side)
            assert best_single <= oracle_score

    def test_singleton_restriction_matches_matching_score(self):
        rng = np.random.default_rng(23)
        vocab = Vocabulary()
        for _ in range(40):
            vs = random_viewset(rng, int(rng.integers(1, 7)), vocab)
            model = init_dual(vocab, int(rng.integers(2, 9)), seed=int(rng.integers(99)))
            mention = rng.normal(size=model.dim)
            singles = [
                (float(np.dot(mention, encode_entity(
                    model.entity_side, vs.title_tokens, v.tokens))), v.view_id)
                for v in vs.views
            ]
            best = max(s for s, _ in singles)
            best_vid = min(vid for s, vid in singles if s == best)
            basic_vecs = np.stack([
                encode_entity(model.entity_side, vs.title_tokens, v.tokens)
                for v in vs.views
            ])
            vid, s = matching_score(mention, indexed(vs.entity_id, basic_vecs))
            assert (vid, s) == (best_vid, best)

    def test_view_limit_enforced(self):
        vocab = Vocabulary()
        desc = " ".join(f"s{i} words here." for i in range(13))
        vs = build_views(EntityRecord("e1", "t", desc), vocab, 40)
        model = init_dual(vocab, 4, seed=0)
        with pytest.raises(ValueError, match="oracle limited"):
            optimal_subset_oracle(np.zeros(4), vs, model.entity_side)


def tiny_corpus():
    return EntityCorpus([
        EntityRecord("e1", "alpha one", "First fact. Second fact. Third fact."),
        EntityRecord("e2", "beta two", "Lone sentence."),
    ])


class TestBuildIndex:
    def test_vector_bookkeeping(self):
        corpus = tiny_corpus()
        vocab = Vocabulary()
        viewsets = [build_views(e, vocab, 40) for e in corpus]
        model = init_dual(vocab, 4, seed=0)
        index = build_index(corpus, viewsets, model)
        assert [len(e.view_ids) for e in index.entities] == [3, 1]
        assert sum(len(e.view_ids) for e in index.entities) == 4
        assert index.fingerprint == fingerprint(model)

    def test_missing_viewset_rejected(self):
        corpus = tiny_corpus()
        vocab = Vocabulary()
        viewsets = [build_views(corpus.entities[0], vocab, 40)]
        model = init_dual(vocab, 4, seed=0)
        with pytest.raises(ValueError, match="no view set"):
            build_index(corpus, viewsets, model)

    def test_rebuild_gives_identical_bytes(self, tmp_path):
        corpus = tiny_corpus()
        vocab = Vocabulary()
        viewsets = [build_views(e, vocab, 40) for e in corpus]
        model = init_dual(vocab, 4, seed=0)
        p1, p2 = tmp_path / "a.idx", tmp_path / "b.idx"
        save_index(build_index(corpus, viewsets, model), p1)
        save_index(build_index(corpus, viewsets, model), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_stale_fingerprint_detected(self):
        corpus = tiny_corpus()
        vocab = Vocabulary()
        viewsets = [build_views(e, vocab, 40) for e in corpus]
        model = init_dual(vocab, 4, seed=0)
        index = build_index(corpus, viewsets, model)
        require_fresh(index, model)
        other = init_dual(vocab, 4, seed=1)
        with pytest.raises(StaleIndexError):
            require_fresh(index, other)


class TestRetrieve:
    def test_single_entity_always_rank_one(self):
        index = EntityIndex([indexed("only", [[0.1, 0.2]])], "fp", 2)
        r = retrieve(index, np.array([5.0, -3.0]), 4)
        assert r.entity_ids() == ["only"]

    def test_best_view_of_other_entity_wins(self):
        # B's second view outscores everything A has.
        a = indexed("A", [[1.0, 0.0], [0.8, 0.1]])
        b = indexed("B", [[0.1, 0.0], [2.0, 0.0]])
        index = EntityIndex([a, b], "fp", 2)
        mention = np.array([1.0, 0.0])
        r = retrieve(index, mention, 2)
        assert r.ranking[0] == ("B", 1, 2.0)
        assert r.ranking[1] == ("A", 0, 1.0)

    def test_k_prefix_property(self):
        rng = np.random.default_rng(3)
        entities = [indexed(f"e{i:03d}", rng.normal(size=(int(rng.integers(1, 4)), 5)))
                    for i in range(20)]
        index = EntityIndex(entities, "fp", 5)
        mention = rng.normal(size=5)
        full = retrieve(index, mention, 64)
        assert len(full.ranking) == 20
        assert full.ranking[:8] == retrieve(index, mention, 8).ranking

    def test_matches_naive_full_sort(self):
        rng = np.random.default_rng(9)
        for _ in range(25):
            dim = int(rng.integers(2, 6))
            entities = [
                indexed(f"e{i:03d}", rng.normal(size=(int(rng.integers(1, 5)), dim)))
                for i in range(int(rng.integers(2, 15)))
            ]
            index = EntityIndex(entities, "fp", dim)
            mention = rng.normal(size=dim)
            got = retrieve(index, mention, len(entities)).ranking
            naive = sorted(
                ((e.entity_id, *matching_score(mention, e)[::-1]) for e in entities),
                key=lambda t: (-t[1], t[0]),
            )
            naive = [(eid, int(vid), s) for eid, s, vid in naive]
            assert got == naive

    def test_score_ties_break_by_entity_id(self):
        a = indexed("b-entity", [[1.0, 0.0]])
        b = indexed("a-entity", [[1.0, 0.0]])
        index = EntityIndex([a, b], "fp", 2)
        r = retrieve(index, np.array([1.0, 0.0]), 2)
        assert r.entity_ids() == ["a-entity", "b-entity"]

    def test_empty_index_rejected(self):
        with pytest.raises(ValueError, match="empty index"):
            retrieve(EntityIndex([], "fp", 2), np.zeros(2), 1)

    def test_k_validated(self):
        index = EntityIndex([indexed("e", [[1.0]])], "fp", 1)
        with pytest.raises(ValueError):
            retrieve(index, np.zeros(1), 0)


class TestIndexFile:
    def test_roundtrip_exact(self, tmp_path):
        corpus = tiny_corpus()
        vocab = Vocabulary()
        viewsets = [build_views(e, vocab, 40) for e in corpus]
        model = init_dual(vocab, 4, seed=0)
        index = build_index(corpus, viewsets, model)
        path = tmp_path / "entities.idx"
        save_index(index, path)
        assert path.read_bytes()[:5] == INDEX_MAGIC
        loaded = load_index(path)
        assert loaded.fingerprint == index.fingerprint
        assert loaded.dim == index.dim
        for a, b in zip(loaded.entities, index.entities):
            assert a.entity_id == b.entity_id
            assert np.array_equal(a.view_ids, b.view_ids)
            assert np.array_equal(a.vectors, b.vectors)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.idx"
        path.write_bytes(b"JUNK!" + b"\x00" * 32)
        with pytest.raises(ValueError, match="magic"):
            load_index(path)


class TestResultsFile:
    def test_roundtrip_exact(self, tmp_path):
        results = [
            RetrievalResult("m1", [("e2", 3, 0.125), ("e1", 0, -1.5)]),
            RetrievalResult("m2", [("e1", 1, 0.4000000000000001)]),
        ]
        path = tmp_path / "results.jsonl"
        write_results(results, path)
        assert read_results(path) == results
