import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from conftest import make_vanilla
from ramlc.retrieval import (
    NeighborMode,
    Repository,
    RepositoryError,
    build_repository,
    label_overlap,
    model_label_overlap,
    neighbor_representation,
    random_label_overlap,
)
from ramlc.text_data import CLS, Document


def make_repo(vectors, labels=None, ids=None):
    vectors = np.asarray(vectors, np.float32)
    n = len(vectors)
    ids = ids or [f"e{i:04d}" for i in range(n)]
    if labels is None:
        labels = np.zeros((n, 3), np.uint8)
        has = np.zeros(n, bool)
    else:
        has = labels.any(axis=1)
    return Repository(ids, vectors, labels, has, "fp")


def oracle_topk(repo, query, k, exclude=None):
    q = np.asarray(query, np.float64)
    q = q / np.linalg.norm(q)
    scored = []
    for i, doc_id in enumerate(repo.ids):
        if doc_id == exclude:
            continue
        key = repo.keys[i].astype(np.float64)
        scored.append((-float(q @ key), doc_id))
    scored.sort()
    return [doc_id for _, doc_id in scored[:k]]


def test_keys_unit_norm():
    repo = make_repo(np.random.default_rng(0).normal(size=(3, 5)))
    assert len(repo) == 3
    assert_allclose(np.linalg.norm(repo.keys, axis=1), 1.0, atol=1e-6)


def test_matches_bruteforce_oracle():
    rng = np.random.default_rng(0)
    repo = make_repo(rng.normal(size=(500, 32)))
    for _ in range(200):
        q = rng.normal(size=32)
        k = int(rng.integers(1, 20))
        assert [e.id for e, _ in repo.topk(q, k)] == oracle_topk(repo, q, k)


def test_self_similarity_ranks_first():
    rng = np.random.default_rng(1)
    repo = make_repo(rng.normal(size=(20, 6)))
    entry, sim = repo.topk(repo.raw[7], 1)[0]
    assert entry.id == repo.ids[7] and abs(sim - 1.0) < 1e-6
    assert repo.topk(repo.raw[7], 1, exclude_id=repo.ids[7])[0][0].id != repo.ids[7]


def test_orthogonal_ties_break_by_id():
    repo = make_repo(np.eye(4)[1:], ids=["c", "a", "b"])
    got = repo.topk(np.array([1.0, 0, 0, 0]), 3)
    assert [e.id for e, _ in got] == ["a", "b", "c"]
    assert all(s == 0 for _, s in got)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_positive_rescaling_invariance(seed, factor):
    rng = np.random.default_rng(seed)
    repo = make_repo(rng.normal(size=(40, 8)))
    q = rng.normal(size=8)
    a = [e.id for e, _ in repo.topk(q, 5)]
    b = [e.id for e, _ in repo.topk(q * factor, 5)]
    assert a == b


def test_k_at_least_size_returns_everything():
    rng = np.random.default_rng(2)
    repo = make_repo(rng.normal(size=(12, 4)))
    q = rng.normal(size=4)
    assert [e.id for e, _ in repo.topk(q, 50)] == oracle_topk(repo, q, 50)
    assert len(repo.topk(q, 50, exclude_id=repo.ids[0])) == 11


def test_search_errors():
    repo = make_repo(np.eye(3))
    with pytest.raises(RepositoryError, match="zero"):
        repo.topk(np.zeros(3), 1)
    with pytest.raises(RepositoryError, match="K"):
        repo.topk(np.ones(3), 0)
    with pytest.raises(RepositoryError):
        repo.topk(np.ones(4), 1)


def test_repository_rejects_zero_vectors_and_duplicates():
    with pytest.raises(RepositoryError, match="e0001"):
        make_repo([[1.0, 0], [0.0, 0]])
    with pytest.raises(RepositoryError, match="unique"):
        make_repo(np.eye(2), ids=["x", "x"])


def test_build_counts_and_determinism(tiny_corpus):
    model = make_vanilla(tiny_corpus)
    repo = build_repository(model, tiny_corpus)
    assert len(repo) == len(tiny_corpus.train)
    assert repo.encoder_fingerprint == model.fingerprint
    again = build_repository(model, tiny_corpus)
    assert_array_equal(repo.raw, again.raw)
    assert_array_equal(repo.keys, again.keys)
    assert repo.ids == again.ids


def test_build_with_unlabeled(tiny_corpus):
    from ramlc.text_data import Corpus

    small = Corpus(tiny_corpus.labels, tiny_corpus.vocab, tiny_corpus.train[:5], tiny_corpus.dev,
                   tiny_corpus.test, unlabeled=tiny_corpus.unlabeled[:5] + [
                       Document(f"u{i}", "", (CLS, 3 + i), frozenset()) for i in range(2)],
                   max_seq_len=tiny_corpus.max_seq_len)
    model = make_vanilla(tiny_corpus)
    repo = build_repository(model, small, include_unlabeled=True)
    assert len(repo) == 12
    assert int((~repo.has_labels).sum()) == 7
    assert repo.includes_unlabeled
    assert len(build_repository(model, small)) == 5


def test_build_rejects_foreign_vocab(tiny_corpus):
    model = make_vanilla(tiny_corpus)
    model.vocab_fingerprint = "elsewhere"
    with pytest.raises(RepositoryError, match="vocab"):
        build_repository(model, tiny_corpus)


def test_serialization_roundtrip(tmp_path, tiny_corpus):
    model = make_vanilla(tiny_corpus)
    repo = build_repository(model, tiny_corpus, include_unlabeled=True)
    repo.save(tmp_path / "r.bin")
    back = Repository.load(tmp_path / "r.bin")
    assert back.ids == repo.ids
    assert_array_equal(back.raw, repo.raw)
    assert_array_equal(back.keys, repo.keys)
    assert_array_equal(back.labels, repo.labels)
    assert_array_equal(back.has_labels, repo.has_labels)
    assert back.encoder_fingerprint == repo.encoder_fingerprint and back.includes_unlabeled
    back.save(tmp_path / "again.bin")
    assert (tmp_path / "again.bin").read_bytes() == (tmp_path / "r.bin").read_bytes()


def test_load_rejects_garbage(tmp_path):
    (tmp_path / "x").write_bytes(b"nope")
    with pytest.raises(RepositoryError):
        Repository.load(tmp_path / "x")


def test_neighbor_modes():
    rng = np.random.default_rng(0)
    labels = np.array([[1, 0, 1]], np.uint8)
    repo = make_repo(rng.normal(size=(1, 4)), labels=labels)
    entry = repo[0]
    assert_array_equal(neighbor_representation(entry, "text"), entry.vector)
    assert_array_equal(neighbor_representation(entry, NeighborMode.LABELS, np.zeros((3, 4))), 0.0)
    proj = rng.normal(size=(7, 4))
    x = np.concatenate([entry.vector.astype(np.float64), [1.0, 0.0, 1.0]])
    expected = [sum(x[i] * proj[i, j] for i in range(7)) for j in range(4)]
    assert_allclose(neighbor_representation(entry, "text+labels", proj), expected, atol=1e-6)
    with pytest.raises(RepositoryError):
        neighbor_representation(entry, "labels", np.zeros((5, 4)))


def test_neighbor_mode_needs_labels():
    entry = make_repo(np.eye(2))[0]
    with pytest.raises(RepositoryError, match="no labels"):
        neighbor_representation(entry, "labels", np.zeros((3, 2)))
    assert NeighborMode.parse("Text+Labels") is NeighborMode.TEXT_LABELS
    assert NeighborMode.LABELS.needs_labels and not NeighborMode.TEXT.needs_labels


def lo_setup(label_sets, vectors):
    n_labels = 1 + max(max(s) for s in label_sets)
    docs = [Document(f"d{i}", "", (CLS,), frozenset(s)) for i, s in enumerate(label_sets)]
    hot = np.zeros((len(docs), n_labels), np.uint8)
    for i, s in enumerate(label_sets):
        hot[i, list(s)] = 1
    repo = Repository([d.id for d in docs], vectors, hot, np.ones(len(docs), bool), "fp")
    return docs, repo


def test_label_overlap_identical_sets():
    rng = np.random.default_rng(0)
    docs, repo = lo_setup([{0, 1}] * 6, rng.normal(size=(6, 3)))
    assert label_overlap(docs, repo, 3, repo.raw) == 1.0


def test_label_overlap_hand_case():
    docs, repo = lo_setup([{0, 1}, {1, 2}], np.eye(2))
    # only the first document is scored; its sole neighbor is the second
    assert label_overlap(docs[:1], repo, 1, repo.raw[:1]) == 0.5


def test_label_overlap_disjoint():
    docs, repo = lo_setup([{0}, {1}, {2}, {3}], np.random.default_rng(1).normal(size=(4, 3)))
    assert label_overlap(docs, repo, 2, repo.raw) == 0.0


def test_label_overlap_empty_set_rejected():
    docs, repo = lo_setup([{0}, {1}], np.eye(2))
    bad = [Document("z", "", (CLS,), frozenset())]
    with pytest.raises(RepositoryError, match="empty label set"):
        label_overlap(bad, repo, 1, np.ones((1, 2)))


def test_random_label_overlap_identical_sets():
    docs, repo = lo_setup([{0, 2}] * 5, np.random.default_rng(0).normal(size=(5, 3)))
    assert random_label_overlap(docs, repo, 2) == 1.0


def test_model_label_overlap_in_unit_interval(tiny_corpus, trained_pair):
    vanilla, repo, _ = trained_pair
    lo = model_label_overlap(vanilla, tiny_corpus, repo, 3)
    assert 0.0 <= lo <= 1.0
