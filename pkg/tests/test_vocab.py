import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slamkit.errors import EmptyCorpus
from slamkit.synth import random_unit_vectors
from slamkit.vocab import (
    BowVector,
    distinct_words,
    kmeans,
    quantize,
    score,
    train_vocabulary,
    transform,
)


def blobs(rng, n_per=100, sigma=0.02):
    centers = random_unit_vectors(rng, 2)
    X = np.vstack([c + rng.normal(scale=sigma, size=(n_per, 256)) for c in centers])
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    return X, np.repeat([0, 1], n_per)


def place_corpus(rng, n_images=60, n_protos=400, per_image=40, sigma=0.03):
    protos = random_unit_vectors(rng, n_protos)
    images = []
    for _ in range(n_images):
        d = protos[rng.integers(0, n_protos, per_image)] + rng.normal(scale=sigma, size=(per_image, 256))
        images.append(d / np.linalg.norm(d, axis=1, keepdims=True))
    return images


def path_replay_word(d, tree):
    """Independent descent: explicit per-level argmax over child centroids."""
    node = 0
    while not tree.is_leaf[node]:
        best, best_sim = None, -math.inf
        for c in tree.children(node):
            sim = float(np.dot(d, tree.centroids[c].astype(np.float64)))
            if sim > best_sim:
                best, best_sim = c, sim
        node = best
    return int(tree.word_ids[node])


def dense_bow_oracle(D, tree):
    v = np.zeros(tree.n_words)
    for d in D:
        w = path_replay_word(d, tree)
        v[w] += tree.word_weight(w)
    return v / v.sum() if v.sum() else v


@pytest.fixture(scope="module")
def corpus():
    return place_corpus(np.random.default_rng(7))


@pytest.fixture(scope="module")
def tree(corpus):
    return train_vocabulary(corpus, k=10, depth=2, seed=3)


# -- kmeans ------------------------------------------------------------------

def test_kmeans_single_cluster_is_mean(rng):
    X = rng.normal(size=(50, 8))
    C, a = kmeans(X, 1, seed=0)
    np.testing.assert_allclose(C[0], X.mean(axis=0), atol=1e-12)
    assert np.all(a == 0)


def test_kmeans_two_blobs(rng):
    X, labels = blobs(rng)
    _, a = kmeans(X, 2, seed=5)
    assert np.array_equal(a, labels) or np.array_equal(a, 1 - labels)


def test_kmeans_k_equals_n(rng):
    X = rng.normal(size=(12, 4))
    C, a = kmeans(X, 12, seed=0)
    assert np.sum((X - C[a]) ** 2) == 0.0


def test_kmeans_fewer_distinct_than_k():
    X = np.array([[1.0, 0], [1.0, 0], [0, 1.0]])
    C, a = kmeans(X, 5)
    assert len(C) == 2
    np.testing.assert_array_equal(C[a], X)


def test_kmeans_deterministic(rng):
    X = rng.normal(size=(300, 16))
    C1, a1 = kmeans(X, 6, seed=9)
    C2, a2 = kmeans(X, 6, seed=9)
    np.testing.assert_array_equal(C1, C2)
    np.testing.assert_array_equal(a1, a2)


def test_kmeans_no_empty_clusters(rng):
    # many duplicates of one point force empty clusters after seeding
    X = np.vstack([np.zeros((100, 3)), rng.normal(size=(5, 3)) + 10])
    C, a = kmeans(X, 5, seed=1)
    assert len(np.unique(a)) == len(C)


def test_kmeans_spherical_unit_centroids(rng):
    X, _ = blobs(rng)
    C, _ = kmeans(X, 3, seed=0, spherical=True)
    np.testing.assert_allclose(np.linalg.norm(C, axis=1), 1.0)


# -- training ----------------------------------------------------------------

def test_empty_corpus():
    with pytest.raises(EmptyCorpus):
        train_vocabulary([], 10, 3)
    with pytest.raises(EmptyCorpus):
        train_vocabulary([np.zeros((0, 256))], 10, 3)


def test_single_image_idf_is_zero(rng):
    t = train_vocabulary([random_unit_vectors(rng, 80)], k=4, depth=2, seed=0)
    assert np.all(t.weights == 0)


def test_two_blob_vocabulary_separates(rng):
    X, labels = blobs(rng)
    t = train_vocabulary([X[:100], X[100:]], k=2, depth=1, seed=0)
    assert t.n_words == 2
    w = t.quantize_many(X)
    assert len(set(w[labels == 0])) == 1 and len(set(w[labels == 1])) == 1
    assert w[0] != w[-1]
    # each word appears in exactly one of the two images
    assert np.allclose(t.idf(), math.log(2))


def test_large_tree_invariants():
    rng = np.random.default_rng(0)
    images = place_corpus(rng, n_images=100, n_protos=3000, per_image=100)
    t = train_vocabulary(images, k=10, depth=3, seed=1)
    assert t.n_words <= 1000
    t.check_invariants()


def test_training_bit_reproducible(corpus):
    a = train_vocabulary(corpus, k=6, depth=2, seed=11)
    b = train_vocabulary(corpus, k=6, depth=2, seed=11)
    for name in ("parents", "is_leaf", "word_ids", "weights", "centroids"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_deeper_tree_never_uses_fewer_words(corpus):
    counts = [distinct_words(corpus, train_vocabulary(corpus, k=4, depth=L, seed=2)) for L in (1, 2, 3, 4)]
    assert counts == sorted(counts)


def test_shallow_tree_is_prefix_of_deep_tree(corpus):
    shallow = train_vocabulary(corpus, k=4, depth=2, seed=2)
    deep = train_vocabulary(corpus, k=4, depth=3, seed=2)
    n = shallow.n_nodes
    assert np.array_equal(deep.parents[:n], shallow.parents)
    assert np.array_equal(deep.centroids[:n], shallow.centroids)


# -- quantize / transform / score -------------------------------------------

def test_quantize_leaf_centroid(tree):
    for leaf in np.flatnonzero(tree.is_leaf)[:20]:
        d = tree.centroids[leaf].astype(np.float64)
        d /= np.linalg.norm(d)
        if path_replay_word(d, tree) == tree.word_ids[leaf]:
            assert quantize(d, tree) == tree.word_ids[leaf]


def test_single_word_image(tree, corpus):
    d = corpus[0][0]
    w = quantize(d, tree)
    if tree.word_weight(w) > 0:
        bow = transform(np.repeat(d[None], 5, axis=0), tree)
        assert bow.as_dict() == {w: 1.0}


def test_transform_matches_path_replay_oracle(tree, corpus):
    rng = np.random.default_rng(3)
    for im in corpus[:15] + [random_unit_vectors(rng, 30)]:
        bow = transform(im, tree)
        dense = np.zeros(tree.n_words)
        dense[bow.words] = bow.weights
        np.testing.assert_allclose(dense, dense_bow_oracle(im, tree), atol=1e-12, rtol=0)


def test_transform_normalized_and_no_zero_entries(tree, corpus):
    for im in corpus:
        bow = transform(im, tree)
        assert abs(bow.weights.sum() - 1.0) < 1e-9
        assert np.all(bow.weights != 0)
        assert np.all(bow.words < tree.n_words)
        assert np.all(np.diff(bow.words) > 0)


def test_score_identical_and_disjoint():
    v = BowVector.from_dict({1: 0.25, 4: 0.75})
    assert score(v, v) == 1.0
    assert score(v, BowVector.from_dict({2: 0.5, 3: 0.5})) == 0.0


def random_bow(rng, n_words=50):
    k = int(rng.integers(1, 20))
    ids = rng.choice(n_words, k, replace=False)
    w = rng.uniform(0.01, 1, k)
    return BowVector.from_dict(dict(zip(ids.tolist(), (w / w.sum()).tolist())))


def test_score_matches_dense_oracle(rng):
    for _ in range(200):
        a, b = random_bow(rng), random_bow(rng)
        da = np.zeros(50)
        db = np.zeros(50)
        for k, v in a.as_dict().items():
            da[k] = v
        for k, v in b.as_dict().items():
            db[k] = v
        assert score(a, b) == pytest.approx(1 - 0.5 * np.abs(da - db).sum(), abs=1e-12)


@settings(max_examples=200)
@given(st.integers(0, 2**32 - 1))
def test_score_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = random_bow(rng), random_bow(rng)
    s = score(a, b)
    assert 0.0 <= s <= 1.0
    assert abs(s - score(b, a)) <= 1e-12
    assert score(a, a) == pytest.approx(1.0, abs=1e-12)


def test_bow_vector_sorts_and_rejects_duplicates():
    v = BowVector([5, 1, 3], [0.2, 0.3, 0.5])
    assert v.words.tolist() == [1, 3, 5]
    with pytest.raises(ValueError):
        BowVector([1, 1], [0.5, 0.5])
