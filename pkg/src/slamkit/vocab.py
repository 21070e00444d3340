"""Hierarchical bag-of-words vocabulary over 256-d float descriptors.

A tree of branching factor ``k`` and depth ``L`` is grown by recursive
k-means; its leaves are the visual words. Images become sparse TF-IDF
vectors (L1-normalized) compared with the L1 score
``1 - 0.5 * |v1 - v2|_1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import EmptyCorpus
from .matching import DESCRIPTOR_DIM, FeatureSet
from .rng import make_rng

NO_PARENT = -1
NO_WORD = -1


# ---------------------------------------------------------------------------
# k-means


def _sq_dists(X, C):
    return (
        np.einsum("ij,ij->i", X, X)[:, None]
        - 2.0 * (X @ C.T)
        + np.einsum("ij,ij->i", C, C)[None, :]
    )


def _kmeans_pp(X, k, rng):
    n = len(X)
    centers = [int(rng.integers(n))]
    d2 = np.maximum(_sq_dists(X, X[centers[-1]][None])[:, 0], 0.0)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # every point coincides with a chosen center
            c = int(rng.integers(n))
        else:
            c = int(np.searchsorted(np.cumsum(d2), rng.uniform(0, total), side="right"))
            c = min(c, n - 1)
        centers.append(c)
        d2 = np.minimum(d2, np.maximum(_sq_dists(X, X[c][None])[:, 0], 0.0))
    return X[centers].copy()


def kmeans(descriptors, k: int, seed=0, max_iters: int = 100, spherical: bool = False):
    """Lloyd's k-means with k-means++ seeding.

    Returns ``(centroids, assignments)``. When there are no more than ``k``
    distinct rows, the distinct rows themselves are the centroids. With
    ``spherical`` the centroids are rescaled to unit length after every update.
    """
    X = np.asarray(descriptors, dtype=float)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("kmeans needs a non-empty (N, D) array")
    if k < 1:
        raise ValueError("k must be >= 1")
    distinct, inverse = np.unique(X, axis=0, return_inverse=True)
    if len(distinct) <= k:
        return distinct, inverse.reshape(-1)

    rng = make_rng(seed)
    C = _kmeans_pp(X, k, rng)
    if spherical:
        C /= np.maximum(np.linalg.norm(C, axis=1, keepdims=True), 1e-12)
    assign = None
    for _ in range(max_iters):
        D = _sq_dists(X, C)
        new = np.argmin(D, axis=1)
        counts = np.bincount(new, minlength=k)
        while np.any(counts == 0):
            empty = int(np.flatnonzero(counts == 0)[0])
            own = D[np.arange(len(X)), new]
            # only steal from clusters that keep at least one member
            own = np.where(counts[new] > 1, own, -np.inf)
            far = int(np.argmax(own))
            counts[new[far]] -= 1
            new[far] = empty
            counts[empty] = 1
            D[far] = _sq_dists(X[far][None], C)[0]
            D[far, empty] = 0.0
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        onehot = np.zeros((k, len(X)))
        onehot[assign, np.arange(len(X))] = 1.0
        C = (onehot @ X) / counts[:, None]
        if spherical:
            C /= np.maximum(np.linalg.norm(C, axis=1, keepdims=True), 1e-12)
    return C, assign


# ---------------------------------------------------------------------------
# Tree and vectors


@dataclass(frozen=True, eq=False)
class BowVector:
    """Sparse word -> weight map, sorted by word id."""

    words: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.words, dtype=np.int64).reshape(-1)
        v = np.asarray(self.weights, dtype=float).reshape(-1)
        if len(w) != len(v):
            raise ValueError("words and weights differ in length")
        if len(w) > 1 and np.any(np.diff(w) <= 0):
            order = np.argsort(w, kind="stable")
            w, v = w[order], v[order]
            if np.any(np.diff(w) == 0):
                raise ValueError("duplicate word ids")
        w.flags.writeable = False
        v.flags.writeable = False
        object.__setattr__(self, "words", w)
        object.__setattr__(self, "weights", v)

    @classmethod
    def from_dict(cls, d) -> BowVector:
        items = sorted(d.items())
        return cls(np.array([k for k, _ in items], dtype=np.int64), np.array([v for _, v in items]))

    def as_dict(self) -> dict[int, float]:
        return {int(k): float(v) for k, v in zip(self.words, self.weights)}

    def __len__(self):
        return len(self.words)

    def __eq__(self, other):
        if not isinstance(other, BowVector):
            return NotImplemented
        return np.array_equal(self.words, other.words) and np.array_equal(self.weights, other.weights)

    def l1_normalized(self) -> BowVector:
        keep = self.weights != 0
        w, v = self.words[keep], self.weights[keep]
        total = np.abs(v).sum()
        if total == 0:
            return BowVector(np.zeros(0, dtype=np.int64), np.zeros(0))
        return BowVector(w, v / total)


def score(v1: BowVector, v2: BowVector) -> float:
    """L1 similarity in [0, 1]; 0 when either vector is empty.

    Evaluated over the shared words as ``0.5 * sum(|a| + |b| - |a - b|)``,
    which equals ``1 - 0.5 * |a - b|_1`` for L1-normalized inputs and is
    exactly 0 for disjoint supports.
    """
    if not len(v1) or not len(v2):
        return 0.0
    common, ia, ib = np.intersect1d(v1.words, v2.words, assume_unique=True, return_indices=True)
    if not len(common):
        return 0.0
    a, b = v1.weights[ia], v2.weights[ib]
    s = 0.5 * float(np.sum(np.abs(a) + np.abs(b) - np.abs(a - b)))
    return min(1.0, max(0.0, s))


@dataclass(eq=False)
class VocabularyTree:
    k: int
    depth: int
    parents: np.ndarray
    is_leaf: np.ndarray
    word_ids: np.ndarray
    weights: np.ndarray
    centroids: np.ndarray  # float32, row 0 (root) is zero
    corpus_size: int | None = None
    seed: int | None = None
    _children: list = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=np.int64)
        self.is_leaf = np.asarray(self.is_leaf, dtype=bool)
        self.word_ids = np.asarray(self.word_ids, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=float)
        self.centroids = np.asarray(self.centroids, dtype=np.float32).reshape(-1, DESCRIPTOR_DIM)
        n = len(self.parents)
        if not (len(self.is_leaf) == len(self.word_ids) == len(self.weights) == len(self.centroids) == n):
            raise ValueError("node arrays differ in length")
        children = [[] for _ in range(n)]
        for i, p in enumerate(self.parents.tolist()):
            if i == 0:
                if p != NO_PARENT:
                    raise ValueError("node 0 must be the root")
                continue
            if not 0 <= p < i:
                raise ValueError(f"node {i} has invalid parent {p}")
            children[p].append(i)
        self._children = [np.array(c, dtype=np.int64) for c in children]

    @property
    def n_nodes(self) -> int:
        return len(self.parents)

    @property
    def n_words(self) -> int:
        return int(np.count_nonzero(self.is_leaf))

    def children(self, node: int) -> np.ndarray:
        return self._children[node]

    @cached_property
    def _centroids64(self) -> np.ndarray:
        return self.centroids.astype(np.float64)

    @cached_property
    def _word_to_node(self) -> np.ndarray:
        out = np.empty(self.n_words, dtype=np.int64)
        leaves = np.flatnonzero(self.is_leaf)
        out[self.word_ids[leaves]] = leaves
        return out

    def word_weight(self, word: int) -> float:
        return float(self.weights[self._word_to_node[word]])

    def idf(self) -> np.ndarray:
        """Weight per word id."""
        return self.weights[self._word_to_node]

    def quantize_nodes(self, descriptors) -> np.ndarray:
        """Leaf node reached by each descriptor (max dot product, ties to lower index)."""
        D = np.asarray(descriptors, dtype=float).reshape(-1, DESCRIPTOR_DIM)
        node = np.zeros(len(D), dtype=np.int64)
        C = self._centroids64
        active = np.flatnonzero(~self.is_leaf[node])
        while len(active):
            for u in np.unique(node[active]).tolist():
                rows = active[node[active] == u]
                ch = self._children[u]
                node[rows] = ch[np.argmax(D[rows] @ C[ch].T, axis=1)]
            active = active[~self.is_leaf[node[active]]]
        return node

    def quantize_many(self, descriptors) -> np.ndarray:
        return self.word_ids[self.quantize_nodes(descriptors)]

    def check_invariants(self) -> None:
        assert all(len(c) <= self.k for c in self._children)
        leaves = np.flatnonzero(self.is_leaf)
        assert sorted(self.word_ids[leaves].tolist()) == list(range(len(leaves)))
        assert np.all(self.word_ids[~self.is_leaf] == NO_WORD)
        assert np.all(self.weights >= 0)
        assert all(len(self._children[i]) == 0 for i in leaves)
        assert all(len(self._children[i]) > 0 for i in np.flatnonzero(~self.is_leaf))


def quantize(descriptor, tree: VocabularyTree) -> int:
    return int(tree.quantize_many(np.asarray(descriptor)[None])[0])


def transform(features: FeatureSet | np.ndarray, tree: VocabularyTree) -> BowVector:
    """TF-IDF bag of words of one image, L1-normalized; zero-weight words dropped."""
    D = features.descriptors if isinstance(features, FeatureSet) else np.asarray(features)
    if len(D) == 0:
        return BowVector(np.zeros(0, dtype=np.int64), np.zeros(0))
    words = tree.quantize_many(D)
    acc = np.bincount(words, weights=tree.idf()[words], minlength=tree.n_words)
    nz = np.flatnonzero(acc)
    return BowVector(nz, acc[nz]).l1_normalized()


def _node_seed(seed, path):
    return [int(seed), *path]


def train_vocabulary(corpus, k: int = 10, depth: int = 3, seed=0, max_iters: int = 25) -> VocabularyTree:
    """Grow a vocabulary tree by recursive spherical k-means.

    ``corpus`` is a sequence of images, each a FeatureSet or an (N, 256)
    array. Each node's clustering is seeded from ``(seed, path)`` so a
    shallower tree is always a prefix of a deeper one trained the same way.
    """
    images = [c.descriptors if isinstance(c, FeatureSet) else np.asarray(c, dtype=float) for c in corpus]
    images = [im.reshape(-1, DESCRIPTOR_DIM) for im in images]
    if not images or sum(len(im) for im in images) == 0:
        raise EmptyCorpus("training corpus has no descriptors")
    if k < 2 or depth < 1:
        raise ValueError("need k >= 2 and depth >= 1")
    X = np.vstack(images)

    parents = [NO_PARENT]
    centroids = [np.zeros(DESCRIPTOR_DIM, dtype=np.float32)]
    leaf = [True]
    queue = [(0, np.arange(len(X)), 0, ())]
    head = 0
    while head < len(queue):
        node, idx, level, path = queue[head]
        head += 1
        if level >= depth or len(idx) < 2:
            continue
        C, _ = kmeans(X[idx], k, seed=_node_seed(seed, path), max_iters=max_iters, spherical=True)
        if len(C) < 2:
            continue
        C = C / np.maximum(np.linalg.norm(C, axis=1, keepdims=True), 1e-12)
        C32 = C.astype(np.float32)
        leaf[node] = False
        first = len(parents)
        for c in C32:
            parents.append(node)
            centroids.append(c)
            leaf.append(True)
        # route training data the same way quantization will
        owner = np.argmax(X[idx] @ C32.astype(np.float64).T, axis=1)
        for j in range(len(C32)):
            queue.append((first + j, idx[owner == j], level + 1, path + (j,)))

    is_leaf = np.array(leaf)
    word_ids = np.full(len(parents), NO_WORD, dtype=np.int64)
    word_ids[is_leaf] = np.arange(int(is_leaf.sum()))
    tree = VocabularyTree(k, depth, np.array(parents), is_leaf, word_ids,
                          np.zeros(len(parents)), np.array(centroids),
                          corpus_size=len(images), seed=seed if isinstance(seed, int) else None)

    n_images = len(images)
    doc_freq = np.zeros(tree.n_words)
    for im in images:
        if len(im):
            doc_freq[np.unique(tree.quantize_many(im))] += 1
    idf = np.zeros(tree.n_words)
    hit = doc_freq > 0
    idf[hit] = np.log(n_images / doc_freq[hit])
    weights = np.zeros(len(parents))
    weights[tree._word_to_node] = idf
    tree.weights = weights
    return tree


def distinct_words(corpus, tree: VocabularyTree) -> int:
    words = set()
    for im in corpus:
        D = im.descriptors if isinstance(im, FeatureSet) else np.asarray(im)
        if len(D):
            words.update(tree.quantize_many(D).tolist())
    return len(words)

