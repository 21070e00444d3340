"""Feature-matching enhancement: spatial mask, descriptor association, DLT, RANSAC.

The pipeline thins each frame's keypoints with a minimum-separation mask,
pairs descriptors by mutual nearest neighbour, then keeps only the pairs
consistent with a single homography under a (deliberately tight) inlier
threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateConfiguration, InsufficientMatches, NoConsensus
from .geometry import Homography, Point2, Unit, apply_homography
from .rng import make_rng

DESCRIPTOR_DIM = 256

_MAX_CONDITION = 1e12
_COLLINEAR_EPS = 1e-9
_BATCH = 32


# ---------------------------------------------------------------------------
# Types


@dataclass(frozen=True)
class Feature:
    location: Point2
    score: float
    descriptor: np.ndarray


@dataclass(frozen=True, eq=False)
class FeatureSet:
    """Keypoints of one frame stored column-wise.

    ``points`` is (N, 2) in pixels, ``scores`` (N,), ``descriptors`` (N, 256)
    with unit L2 rows.
    """

    points: np.ndarray
    scores: np.ndarray
    descriptors: np.ndarray
    frame_id: int = 0
    timestamp: float = 0.0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 2)
        sc = np.asarray(self.scores, dtype=float).reshape(-1)
        de = np.asarray(self.descriptors, dtype=float)
        if de.size == 0:
            de = de.reshape(0, DESCRIPTOR_DIM)
        if de.ndim != 2 or de.shape[1] != DESCRIPTOR_DIM:
            raise ValueError(f"descriptors must be (N, {DESCRIPTOR_DIM}); got {de.shape}")
        if not (len(pts) == len(sc) == len(de)):
            raise ValueError("points, scores and descriptors differ in length")
        if len(de):
            norms = np.linalg.norm(de, axis=1)
            if np.any(np.abs(norms - 1.0) >= 1e-6):
                raise ValueError("descriptors must have unit L2 norm")
        if not np.all(np.isfinite(pts)):
            raise ValueError("non-finite keypoint location")
        for name, arr in (("points", pts), ("scores", sc), ("descriptors", de)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    def __len__(self):
        return len(self.points)

    def __getitem__(self, i) -> Feature:
        u, v = self.points[i]
        return Feature(Point2(float(u), float(v)), float(self.scores[i]), self.descriptors[i])

    def subset(self, indices) -> FeatureSet:
        idx = np.asarray(indices, dtype=np.intp)
        return FeatureSet(self.points[idx], self.scores[idx], self.descriptors[idx],
                          self.frame_id, self.timestamp)

    @classmethod
    def from_features(cls, features, frame_id=0, timestamp=0.0) -> FeatureSet:
        features = list(features)
        return cls(
            np.array([[f.location.u, f.location.v] for f in features]).reshape(-1, 2),
            np.array([f.score for f in features]),
            np.array([f.descriptor for f in features]).reshape(-1, DESCRIPTOR_DIM),
            frame_id,
            timestamp,
        )


@dataclass(frozen=True)
class MatchPair:
    index_a: int
    index_b: int
    similarity: float


@dataclass(frozen=True)
class MatchConfig:
    mask_radius: float = 8.0
    inlier_threshold: float = 0.5
    max_iterations: int = 2000
    confidence: float = 0.999
    min_matches: int = 8
    min_similarity: float = 0.5
    symmetric: bool = False
    # (fx, fy, cx, cy); when set, RANSAC runs on the normalized image plane
    intrinsics: tuple[float, float, float, float] | None = None

    def __post_init__(self):
        if self.mask_radius < 0:
            raise ValueError("mask_radius must be >= 0")
        if self.inlier_threshold <= 0:
            raise ValueError("inlier_threshold must be > 0")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must lie in (0, 1)")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.min_matches < 4:
            raise ValueError("min_matches must be >= 4")


@dataclass(frozen=True, eq=False)
class MatchReport:
    homography: Homography
    index_a: np.ndarray
    index_b: np.ndarray
    similarity: np.ndarray
    errors: np.ndarray
    inlier_mask: np.ndarray
    iterations: int
    units: Unit = Unit.PIXEL
    src: np.ndarray = field(default=None, repr=False)
    dst: np.ndarray = field(default=None, repr=False)

    def _pairs(self, mask) -> list[MatchPair]:
        return [
            MatchPair(int(a), int(b), float(s))
            for a, b, s in zip(self.index_a[mask], self.index_b[mask], self.similarity[mask])
        ]

    @property
    def pairs(self) -> list[MatchPair]:
        return self._pairs(np.ones(len(self.index_a), dtype=bool))

    @property
    def inliers(self) -> list[MatchPair]:
        return self._pairs(self.inlier_mask)

    @property
    def rejected(self) -> list[MatchPair]:
        return self._pairs(~self.inlier_mask)

    @property
    def n_inliers(self) -> int:
        return int(np.count_nonzero(self.inlier_mask))

    @property
    def mean_inlier_error(self) -> float:
        if not self.n_inliers:
            return math.nan
        return float(np.mean(self.errors[self.inlier_mask]))


# ---------------------------------------------------------------------------
# Mask filter


def mask_filter_indices(points, scores, r: float) -> np.ndarray:
    """Indices kept by greedy minimum-separation suppression, in input order.

    Features are visited by descending score (ties: lower index first); one
    is kept iff it lies at distance >= ``r`` from every feature kept so far.
    """
    if r < 0:
        raise ValueError("mask radius must be >= 0")
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    n = len(pts)
    if n == 0 or r == 0:
        return np.arange(n)
    order = np.lexsort((np.arange(n), -np.asarray(scores, dtype=float)))
    pairs = cKDTree(pts).query_pairs(r, output_type="ndarray")
    if len(pairs):
        d = np.linalg.norm(pts[pairs[:, 0]] - pts[pairs[:, 1]], axis=1)
        pairs = pairs[d < r]
    if not len(pairs):
        return np.arange(n)
    both = np.concatenate([pairs, pairs[:, ::-1]])
    both = both[np.argsort(both[:, 0], kind="stable")]
    starts = np.searchsorted(both[:, 0], np.arange(n + 1))
    nbrs = both[:, 1]
    suppressed = np.zeros(n, dtype=bool)
    keep = np.zeros(n, dtype=bool)
    for i in order.tolist():
        if suppressed[i]:
            continue
        keep[i] = True
        suppressed[nbrs[starts[i]:starts[i + 1]]] = True
    return np.flatnonzero(keep)


def mask_filter(features: FeatureSet, r: float) -> FeatureSet:
    return features.subset(mask_filter_indices(features.points, features.scores, r))


# ---------------------------------------------------------------------------
# Descriptor association


def mutual_nearest_neighbors(desc_a, desc_b, min_similarity: float):
    """Return (ia, ib, similarity) arrays of mutual best dot-product matches."""
    if len(desc_a) == 0 or len(desc_b) == 0:
        empty = np.zeros(0, dtype=np.intp)
        return empty, empty, np.zeros(0)
    S = desc_a @ desc_b.T
    best_b = np.argmax(S, axis=1)
    best_a = np.argmax(S, axis=0)
    ia = np.arange(len(desc_a))
    sim = S[ia, best_b]
    ok = (best_a[best_b] == ia) & (sim >= min_similarity)
    return ia[ok], best_b[ok], sim[ok]


def match_descriptors(a: FeatureSet, b: FeatureSet, min_similarity: float = 0.5) -> list[MatchPair]:
    ia, ib, sim = mutual_nearest_neighbors(a.descriptors, b.descriptors, min_similarity)
    return [MatchPair(int(i), int(j), float(s)) for i, j, s in zip(ia, ib, sim)]


# ---------------------------------------------------------------------------
# DLT


def hartley_normalization(pts):
    """Similarity T moving the centroid to the origin with mean radius sqrt(2)."""
    pts = np.asarray(pts, dtype=float)
    c = pts.mean(axis=0)
    d = np.mean(np.linalg.norm(pts - c, axis=1))
    if d < 1e-12:
        raise DegenerateConfiguration("points are coincident")
    s = math.sqrt(2.0) / d
    T = np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])
    return (pts - c) * s, T


def _dlt_rows(x1, x2):
    """Stack the two linear constraints per correspondence, with h9 fixed to 1."""
    u1, v1 = x1[..., 0], x1[..., 1]
    u2, v2 = x2[..., 0], x2[..., 1]
    A = np.zeros(x1.shape[:-2] + (2 * x1.shape[-2], 8))
    A[..., 0::2, 0] = u1
    A[..., 0::2, 1] = v1
    A[..., 0::2, 2] = 1.0
    A[..., 0::2, 6] = -u1 * u2
    A[..., 0::2, 7] = -v1 * u2
    A[..., 1::2, 3] = u1
    A[..., 1::2, 4] = v1
    A[..., 1::2, 5] = 1.0
    A[..., 1::2, 6] = -u1 * v2
    A[..., 1::2, 7] = -v1 * v2
    b = np.empty(A.shape[:-1])
    b[..., 0::2] = u2
    b[..., 1::2] = v2
    return A, b


_TRIPLES = ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3))


def _has_collinear_triple(p) -> np.ndarray:
    """p: (..., 4, 2) normalized points -> bool (...)."""
    bad = np.zeros(p.shape[:-2], dtype=bool)
    for i, j, k in _TRIPLES:
        a = p[..., j, :] - p[..., i, :]
        b = p[..., k, :] - p[..., i, :]
        bad |= np.abs(a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]) < _COLLINEAR_EPS
    return bad


def dlt_homography(src, dst) -> Homography:
    """Least-squares homography from >= 4 correspondences, h9 = 1.

    Solved in Hartley-normalized coordinates and mapped back.
    """
    src = np.asarray(src, dtype=float).reshape(-1, 2)
    dst = np.asarray(dst, dtype=float).reshape(-1, 2)
    if len(src) != len(dst):
        raise ValueError("src and dst differ in length")
    if len(src) < 4:
        raise InsufficientMatches(f"need >= 4 correspondences, got {len(src)}")
    x1, T1 = hartley_normalization(src)
    x2, T2 = hartley_normalization(dst)
    if len(src) == 4 and (_has_collinear_triple(x1) or _has_collinear_triple(x2)):
        raise DegenerateConfiguration("three of the four points are collinear")
    A, b = _dlt_rows(x1, x2)
    if np.linalg.cond(A) > _MAX_CONDITION:
        raise DegenerateConfiguration("DLT system is ill-conditioned")
    h, *_ = np.linalg.lstsq(A, b, rcond=None)
    Hn = np.append(h, 1.0).reshape(3, 3)
    return Homography(np.linalg.solve(T2, Hn @ T1))


# ---------------------------------------------------------------------------
# Transfer error


def transfer_errors(H: Homography | np.ndarray, src, dst, symmetric: bool = False) -> np.ndarray:
    """Forward transfer distance |H(src) - dst| per pair (inf where undefined)."""
    M = H.matrix if isinstance(H, Homography) else np.asarray(H, dtype=float)
    src = np.asarray(src, dtype=float).reshape(-1, 2)
    dst = np.asarray(dst, dtype=float).reshape(-1, 2)
    err = _forward_errors(M[None], src, dst)[0]
    if symmetric:
        back = _forward_errors(np.linalg.inv(M)[None], dst, src)[0]
        err = 0.5 * (err + back)
    return err


def transfer_error(H: Homography, p_a: Point2, p_b: Point2) -> float:
    return apply_homography(H, p_a).distance(p_b)


def _forward_errors(Hs, src, dst) -> np.ndarray:
    """Hs: (B, 3, 3) -> (B, N) one-way transfer errors."""
    P = Hs[:, :, :2] @ src.T + Hs[:, :, 2:3]
    den = P[:, 2]
    bad = np.abs(den) < 1e-12
    den = np.where(bad, 1.0, den)
    du = P[:, 0] / den - dst[:, 0]
    dv = P[:, 1] / den - dst[:, 1]
    err = np.sqrt(du * du + dv * dv)
    err[bad] = np.inf
    return err


# ---------------------------------------------------------------------------
# RANSAC


def _required_iterations(inlier_ratio: float, confidence: float, cap: int) -> int:
    if inlier_ratio <= 0:
        return cap
    p_good = inlier_ratio**4
    if p_good >= 1.0 - 1e-15:
        return 1
    n = math.log(1.0 - confidence) / math.log(1.0 - p_good)
    return int(min(cap, max(1, math.ceil(n))))


def _sample_quads(rng, n, count) -> np.ndarray:
    idx = rng.integers(0, n, size=(count, 4))
    while True:
        s = np.sort(idx, axis=1)
        dup = np.any(s[:, 1:] == s[:, :-1], axis=1)
        if not dup.any():
            return idx
        idx[dup] = rng.integers(0, n, size=(int(dup.sum()), 4))


def _minimal_solve(x1, x2, idx):
    """Batched 4-point solve. Returns (B', 3, 3) normalized-space homographies."""
    p, q = x1[idx], x2[idx]
    ok = ~(_has_collinear_triple(p) | _has_collinear_triple(q))
    if not ok.any():
        return np.zeros((0, 3, 3))
    A, b = _dlt_rows(p[ok], q[ok])
    try:
        h = np.linalg.solve(A, b[..., None])[..., 0]
    except np.linalg.LinAlgError:
        sols = []
        for Ai, bi in zip(A, b):
            try:
                sols.append(np.linalg.solve(Ai, bi))
            except np.linalg.LinAlgError:
                continue
        if not sols:
            return np.zeros((0, 3, 3))
        h = np.array(sols)
    h = h[np.all(np.isfinite(h), axis=1)]
    return np.concatenate([h, np.ones((len(h), 1))], axis=1).reshape(-1, 3, 3)


def ransac_homography(src, dst, config: MatchConfig = MatchConfig(), seed=0) -> MatchReport:
    """Robust homography with adaptive iteration count and inlier refit.

    Pairs are ``(src[i], dst[i])``; errors are measured in the units of the
    inputs and compared against ``config.inlier_threshold``.
    """
    src = np.asarray(src, dtype=float).reshape(-1, 2)
    dst = np.asarray(dst, dtype=float).reshape(-1, 2)
    n = len(src)
    if len(dst) != n:
        raise ValueError("src and dst differ in length")
    if n < 4 or n < config.min_matches:
        raise InsufficientMatches(f"{n} pairs; need >= {max(4, config.min_matches)}")
    delta = config.inlier_threshold
    rng = make_rng(seed)
    x1, T1 = hartley_normalization(src)
    x2, T2 = hartley_normalization(dst)
    T2inv = np.linalg.inv(T2)

    best_count, best_cost, best_H = 0, math.inf, None
    needed = config.max_iterations
    iterations = 0
    while iterations < min(needed, config.max_iterations):
        batch = min(_BATCH, config.max_iterations - iterations)
        idx = _sample_quads(rng, n, batch)
        iterations += batch
        Hn = _minimal_solve(x1, x2, idx)
        if not len(Hn):
            continue
        Hs = T2inv @ Hn @ T1
        err = _forward_errors(Hs, src, dst)
        if config.symmetric:
            good = np.abs(np.linalg.det(Hs)) > 1e-12
            Hs, err = Hs[good], err[good]
            if not len(Hs):
                continue
            err = 0.5 * (err + _forward_errors(np.linalg.inv(Hs), dst, src))
        inl = err < delta
        counts = inl.sum(axis=1)
        costs = np.where(inl, err, delta).sum(axis=1)
        k = int(np.lexsort((costs, -counts))[0])
        if counts[k] > best_count or (counts[k] == best_count and costs[k] < best_cost):
            best_count, best_cost, best_H = int(counts[k]), float(costs[k]), Hs[k]
            needed = _required_iterations(best_count / n, config.confidence, config.max_iterations)

    if best_H is None or best_count < config.min_matches:
        raise NoConsensus(f"best consensus {best_count} < min_matches {config.min_matches}")

    try:
        H = Homography(best_H)
    except DegenerateConfiguration as exc:
        raise NoConsensus("best model is degenerate") from exc
    err = transfer_errors(H, src, dst, config.symmetric)
    mask = err < delta
    for _ in range(5):
        if mask.sum() < 4:
            break
        try:
            H_new = dlt_homography(src[mask], dst[mask])
        except DegenerateConfiguration:
            break
        err_new = transfer_errors(H_new, src, dst, config.symmetric)
        mask_new = err_new < delta
        if mask_new.sum() < mask.sum():
            break
        converged = np.array_equal(mask_new, mask)
        H, err, mask = H_new, err_new, mask_new
        if converged:
            break
    if mask.sum() < config.min_matches:
        raise NoConsensus(f"refined consensus {int(mask.sum())} < min_matches {config.min_matches}")
    idx = np.arange(n)
    return MatchReport(H, idx, idx.copy(), np.full(n, np.nan), err, mask, iterations,
                       src=src, dst=dst)


# ---------------------------------------------------------------------------
# Full pipeline


def to_normalized_plane(points, intrinsics) -> np.ndarray:
    fx, fy, cx, cy = intrinsics
    pts = np.asarray(points, dtype=float)
    return np.column_stack([(pts[:, 0] - cx) / fx, (pts[:, 1] - cy) / fy])


def enhance_matches(a: FeatureSet, b: FeatureSet, config: MatchConfig = MatchConfig(), seed=0) -> MatchReport:
    """Mask both frames, associate descriptors, then verify with RANSAC.

    Indices in the returned report refer to the unfiltered input sets.
    """
    keep_a = mask_filter_indices(a.points, a.scores, config.mask_radius)
    keep_b = mask_filter_indices(b.points, b.scores, config.mask_radius)
    ia, ib, sim = mutual_nearest_neighbors(
        a.descriptors[keep_a], b.descriptors[keep_b], config.min_similarity
    )
    ia, ib = keep_a[ia], keep_b[ib]
    src, dst = a.points[ia], b.points[ib]
    units = Unit.PIXEL
    if config.intrinsics is not None:
        src = to_normalized_plane(src, config.intrinsics)
        dst = to_normalized_plane(dst, config.intrinsics)
        units = Unit.NORMALIZED
    report = ransac_homography(src, dst, config, seed)
    return replace(report, index_a=ia, index_b=ib, similarity=sim, units=units)
