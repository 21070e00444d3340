"""Deterministic synthetic data: planted-homography scenes and drifting trajectories.

All generators draw from :func:`slamkit.rng.make_rng` (Philox), so identical
specs and seeds reproduce identical outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import (
    Homography,
    PlanarCamera,
    PoseSE3,
    Trajectory,
    compose,
    exp_se3,
    inverse,
    yaw_pose,
)
from .matching import DESCRIPTOR_DIM, FeatureSet
from .rng import make_rng


def random_unit_vectors(rng, n, dim=DESCRIPTOR_DIM) -> np.ndarray:
    v = rng.standard_normal((n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def perturb_descriptors(rng, desc, sigma) -> np.ndarray:
    if sigma <= 0:
        return np.array(desc, dtype=float)
    v = desc + rng.normal(scale=sigma, size=desc.shape)
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def sample_spaced_points(rng, n, width, height, min_spacing=0.0, max_tries=200_000) -> np.ndarray:
    """Uniform points in [0, w) x [0, h), pairwise at least ``min_spacing`` apart."""
    if min_spacing <= 0:
        return np.column_stack([rng.uniform(0, width, n), rng.uniform(0, height, n)])
    cell = min_spacing / math.sqrt(2.0)
    grid: dict[tuple[int, int], tuple[float, float]] = {}
    out: list[tuple[float, float]] = []
    tries = 0
    while len(out) < n:
        tries += 1
        if tries > max_tries:
            raise ValueError(f"cannot place {n} points {min_spacing} px apart in {width}x{height}")
        x, y = rng.uniform(0, width), rng.uniform(0, height)
        gx, gy = int(x // cell), int(y // cell)
        ok = True
        for i in range(gx - 2, gx + 3):
            for j in range(gy - 2, gy + 3):
                p = grid.get((i, j))
                if p is not None and (p[0] - x) ** 2 + (p[1] - y) ** 2 < min_spacing**2:
                    ok = False
                    break
            if not ok:
                break
        if ok:
            grid[(gx, gy)] = (x, y)
            out.append((x, y))
    return np.array(out)


def random_planar_homography(rng, width, height) -> Homography:
    """A mild viewpoint change: rotation, scale, shift and slight perspective."""
    angle = rng.uniform(-0.2, 0.2)
    scale = rng.uniform(0.9, 1.1)
    c, s = math.cos(angle) * scale, math.sin(angle) * scale
    shear = rng.uniform(-0.03, 0.03)
    persp = rng.uniform(-1e-4, 1e-4, 2)
    A = np.array([[c, -s + shear, 0.0], [s, c, 0.0], [persp[0], persp[1], 1.0]])
    center = np.array([[1, 0, width / 2], [0, 1, height / 2], [0, 0, 1.0]])
    shift = np.array([[1, 0, rng.uniform(-30, 30)], [0, 1, rng.uniform(-30, 30)], [0, 0, 1.0]])
    return Homography(shift @ center @ A @ np.linalg.inv(center))


# ---------------------------------------------------------------------------
# Matched two-view scenes


@dataclass(frozen=True)
class SceneSpec:
    n: int = 200
    outlier_fraction: float = 0.0
    noise_sigma: float = 0.5
    descriptor_noise: float = 0.05
    width: float = 640.0
    height: float = 480.0
    min_spacing: float = 0.0
    homography: np.ndarray | None = None
    # "copy": outlier pairs share descriptors (wrong association of similar
    # features); "random": outlier targets carry unrelated descriptors.
    outlier_descriptors: str = "copy"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise ValueError("outlier_fraction must lie in [0, 1)")
        if self.outlier_descriptors not in ("copy", "random"):
            raise ValueError("outlier_descriptors must be 'copy' or 'random'")


@dataclass(frozen=True, eq=False)
class MatchedScene:
    a: FeatureSet
    b: FeatureSet
    pairs: np.ndarray  # (n, 2) ground-truth (index_a, index_b)
    inlier: np.ndarray  # (n,) bool, True where b = H(a) + noise
    homography: Homography

    @property
    def src(self) -> np.ndarray:
        return self.a.points[self.pairs[:, 0]]

    @property
    def dst(self) -> np.ndarray:
        return self.b.points[self.pairs[:, 1]]


def gen_matched_scene(spec: SceneSpec) -> MatchedScene:
    rng = make_rng(spec.seed)
    n = spec.n
    if spec.homography is None:
        H = random_planar_homography(rng, spec.width, spec.height)
    else:
        H = Homography(spec.homography)
    pts_a = sample_spaced_points(rng, n, spec.width, spec.height, spec.min_spacing)
    n_out = int(round(spec.outlier_fraction * n))
    is_out = np.zeros(n, dtype=bool)
    is_out[rng.permutation(n)[:n_out]] = True

    pts_b = H.apply(pts_a)
    if spec.noise_sigma > 0:
        pts_b = pts_b + rng.normal(scale=spec.noise_sigma, size=pts_b.shape)
    pts_b[is_out] = np.column_stack([
        rng.uniform(0, spec.width, n_out), rng.uniform(0, spec.height, n_out)
    ])

    desc_a = random_unit_vectors(rng, n)
    desc_b = perturb_descriptors(rng, desc_a, spec.descriptor_noise)
    if spec.outlier_descriptors == "random" and n_out:
        desc_b[is_out] = random_unit_vectors(rng, n_out)
    scores_a = rng.uniform(0.0, 1.0, n)
    scores_b = np.clip(scores_a + rng.normal(scale=0.02, size=n), 0.0, 1.0)

    perm = rng.permutation(n)  # b-index of the partner of a-feature i
    order_b = np.argsort(perm)
    a = FeatureSet(pts_a, scores_a, desc_a, frame_id=0)
    b = FeatureSet(pts_b[order_b], scores_b[order_b], desc_b[order_b], frame_id=1)
    pairs = np.column_stack([np.arange(n), perm])
    return MatchedScene(a, b, pairs, ~is_out, H)


# ---------------------------------------------------------------------------
# Drifting trajectories


@dataclass(frozen=True)
class DriftSpec:
    n: int = 100
    radius: float = 10.0
    laps: float = 1.1
    # world-frame translation error added per step (accumulates linearly)
    drift_translation: tuple[float, float, float] = (0.012, -0.008, 0.0)
    # yaw error per step, applied in the body frame of each odometry increment
    drift_yaw: float = -0.0015
    noise_translation: float = 0.002
    noise_rotation: float = 0.0005
    revisit_radius: float = 1.0
    min_separation: int = 30
    dt: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n < 10:
            raise ValueError("need at least 10 nodes")


@dataclass(frozen=True, eq=False)
class DriftResult:
    ground_truth: Trajectory
    drifted: Trajectory
    loop_pairs: list[tuple[int, int]]


def gen_drift_trajectory(spec: DriftSpec) -> DriftResult:
    """Circle ground truth plus an odometry-integrated copy that drifts.

    Node 0 is exact. With rotation drift and noise disabled, node ``i`` is off
    by exactly ``i * drift_translation``.
    """
    rng = make_rng(spec.seed)
    n = spec.n
    step = 2.0 * math.pi * spec.laps / (n - 1)
    gt = []
    for i in range(n):
        a = i * step
        gt.append(yaw_pose(spec.radius * math.cos(a), spec.radius * math.sin(a), 0.0,
                           a + math.pi / 2, timestamp=i * spec.dt))

    drift = np.asarray(spec.drift_translation, dtype=float)
    yaw_bias = exp_se3([0, 0, 0, 0, 0, spec.drift_yaw])
    chain = gt[0]
    est = [gt[0]]
    for i in range(1, n):
        delta = compose(inverse(gt[i - 1]), gt[i])
        if spec.drift_yaw or spec.noise_translation or spec.noise_rotation:
            noise = np.concatenate([
                rng.normal(scale=spec.noise_translation, size=3) if spec.noise_translation else np.zeros(3),
                rng.normal(scale=spec.noise_rotation, size=3) if spec.noise_rotation else np.zeros(3),
            ])
            delta = compose(compose(delta, exp_se3(noise)), yaw_bias)
            chain = compose(chain, delta)
        else:
            chain = gt[i]
        est.append(PoseSE3(chain.rotation, chain.translation + i * drift, gt[i].timestamp))

    pos = np.array([p.translation for p in gt])
    pairs = []
    for j in range(n):
        for i in range(j - spec.min_separation + 1):
            if np.linalg.norm(pos[i] - pos[j]) < spec.revisit_radius:
                pairs.append((i, j))
    return DriftResult(Trajectory.from_poses(gt), Trajectory.from_poses(est), pairs)


# ---------------------------------------------------------------------------
# Keyframe observations for loop-closure scenarios


@dataclass(frozen=True)
class LoopScenarioSpec:
    drift: DriftSpec = field(default_factory=DriftSpec)
    camera: PlanarCamera = field(default_factory=PlanarCamera)
    landmark_density: float = 5.0  # per square metre of ground plane
    pixel_noise: float = 0.3
    descriptor_noise: float = 0.03
    clutter_fraction: float = 0.1
    seed: int = 0


@dataclass(frozen=True, eq=False)
class LoopScenario:
    ground_truth: Trajectory
    drifted: Trajectory
    loop_pairs: list[tuple[int, int]]
    keyframes: list[FeatureSet]
    camera: PlanarCamera


def _landmark_field(rng, center_radius, margin, density):
    """Landmarks in an annulus of width ``2 * margin`` around a circle (a disc if radius 0)."""
    r_in = max(0.0, center_radius - margin)
    r_out = center_radius + margin
    m = rng.poisson(density * math.pi * (r_out**2 - r_in**2))
    rad = np.sqrt(rng.uniform(r_in**2, r_out**2, m))
    ang = rng.uniform(0, 2 * math.pi, m)
    xy = np.column_stack([rad * np.cos(ang), rad * np.sin(ang)])
    return xy, random_unit_vectors(rng, m), rng.uniform(0.2, 1.0, m)


def _view_margin(cam: PlanarCamera) -> float:
    half_w = cam.width / cam.fx * cam.plane_distance / 2
    half_h = cam.height / cam.fy * cam.plane_distance / 2
    return math.hypot(half_w, half_h) + 1.0


def _render(rng, spec, pose, xy, desc, strength, index, margin, frame_id) -> FeatureSet:
    cam = spec.camera
    near = np.array(index.query_ball_point(pose.translation[:2], margin), dtype=np.intp)
    near.sort()
    uv, inside = cam.project(pose, cam.plane_points(pose, xy[near]))
    ids = near[inside]
    uv = uv[inside] + rng.normal(scale=spec.pixel_noise, size=(len(ids), 2))
    d = perturb_descriptors(rng, desc[ids], spec.descriptor_noise)
    s = np.clip(strength[ids] + rng.normal(scale=0.02, size=len(ids)), 0.0, 1.0)
    n_clutter = int(round(spec.clutter_fraction * len(ids)))
    if n_clutter:
        uv = np.vstack([uv, np.column_stack([rng.uniform(0, cam.width, n_clutter),
                                             rng.uniform(0, cam.height, n_clutter)])])
        d = np.vstack([d, random_unit_vectors(rng, n_clutter)])
        s = np.concatenate([s, rng.uniform(0.0, 1.0, n_clutter)])
    return FeatureSet(uv, s, d, frame_id=frame_id, timestamp=pose.timestamp)


def gen_loop_scenario(spec: LoopScenarioSpec) -> LoopScenario:
    """Drifting circle with per-keyframe features rendered from ground-truth poses."""
    drift = gen_drift_trajectory(spec.drift)
    rng = make_rng(spec.seed)
    margin = _view_margin(spec.camera)
    xy, desc, strength = _landmark_field(rng, spec.drift.radius, margin, spec.landmark_density)
    index = cKDTree(xy)
    keyframes = [_render(rng, spec, pose, xy, desc, strength, index, margin, k)
                 for k, pose in enumerate(drift.ground_truth)]
    return LoopScenario(drift.ground_truth, drift.drifted, drift.loop_pairs, keyframes, spec.camera)


@dataclass(frozen=True, eq=False)
class RevisitPair:
    features_a: FeatureSet
    features_b: FeatureSet
    true_a: PoseSE3
    true_b: PoseSE3
    drifted_b: PoseSE3


def gen_revisit_pair(spec: LoopScenarioSpec = LoopScenarioSpec(), offset: float = 0.5,
                     max_yaw: float = 0.3, drift: float = 1.0) -> RevisitPair:
    """Two views of the same ground patch: a first pass and a later, drifted revisit.

    The revisit is displaced up to ``offset`` metres and ``max_yaw`` radians
    from the first pass; its odometry estimate is further off by ``drift`` metres.
    """
    rng = make_rng(spec.seed)
    margin = _view_margin(spec.camera)
    xy, desc, strength = _landmark_field(rng, 0.0, margin + offset, spec.landmark_density)
    index = cKDTree(xy)
    yaw = rng.uniform(-math.pi, math.pi)
    a = yaw_pose(0.0, 0.0, 0.0, yaw, timestamp=0.0)
    dx, dy = rng.uniform(-offset, offset, 2)
    b = yaw_pose(dx, dy, 0.0, yaw + rng.uniform(-max_yaw, max_yaw), timestamp=1.0)
    direction = rng.normal(size=2)
    direction *= drift / np.linalg.norm(direction)
    b_est = PoseSE3(b.rotation, b.translation + np.array([direction[0], direction[1], 0.0]), b.timestamp)
    fa = _render(rng, spec, a, xy, desc, strength, index, margin, 0)
    fb = _render(rng, spec, b, xy, desc, strength, index, margin, 1)
    return RevisitPair(fa, fb, a, b, b_est)
