"""Loop verification and SE(3) pose-graph optimization.

Edge residual: ``r = log(Z^-1 T_i^-1 T_j)`` with twists ordered (rho, phi).
Node updates are right perturbations ``T <- T exp(delta)``. The cost is
``0.5 * sum rho(r^T Omega r)``; loop edges use a Huber kernel of width 0.1
on the residual norm, odometry edges are plain least squares.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.linalg import spsolve

from .errors import DisconnectedGraph, InsufficientMatches, MalformedFile, NoConsensus
from .geometry import (
    PlanarCamera,
    PoseSE3,
    Trajectory,
    compose,
    exp_se3,
    inverse,
    log_se3,
    se3_adjoint,
    se3_left_jacobian_inv,
)
from .matching import MatchConfig, enhance_matches
from .placedb import DEFAULT_MIN_GAP, KeyframeDatabase, KeyframeRecord
from .vocab import VocabularyTree, transform

MIN_LOOP_INLIERS = 25
HUBER_WIDTH = 0.1
# odometry: 2 cm / 0.3 deg per step; loop edges: 10 cm / 1 deg per inlier
ODOMETRY_INFORMATION = np.diag([2500.0] * 3 + [40000.0] * 3)
LOOP_BASE_INFORMATION = np.diag([100.0] * 3 + [3300.0] * 3)
LOOP_MATCH_CONFIG = MatchConfig(mask_radius=8.0, inlier_threshold=1.5, min_matches=8)


# ---------------------------------------------------------------------------
# Graph types


@dataclass(frozen=True, eq=False)
class Edge:
    """Relative-pose constraint ``Z ~ T_i^-1 T_j``."""

    i: int
    j: int
    measurement: PoseSE3
    information: np.ndarray = field(default_factory=lambda: ODOMETRY_INFORMATION.copy())
    inlier_count: int = 0
    robust: bool = False

    def __post_init__(self):
        if self.i == self.j:
            raise ValueError("edge endpoints must differ")
        info = np.array(self.information, dtype=float).reshape(6, 6)
        if not np.allclose(info, info.T, rtol=0, atol=1e-9 * max(1.0, np.abs(info).max())):
            raise ValueError("information matrix must be symmetric")
        info = 0.5 * (info + info.T)
        try:
            np.linalg.cholesky(info)
        except np.linalg.LinAlgError as exc:
            raise ValueError("information matrix must be positive definite") from exc
        info.flags.writeable = False
        object.__setattr__(self, "information", info)


def LoopEdge(i, j, measurement, information=None, inlier_count=0) -> Edge:
    """Loop-closure constraint (robust kernel enabled)."""
    info = LOOP_BASE_INFORMATION * max(inlier_count, 1) if information is None else information
    return Edge(i, j, measurement, info, inlier_count, robust=True)


@dataclass(eq=False)
class PoseGraph:
    nodes: dict[int, PoseSE3] = field(default_factory=dict)
    edges: list[Edge] = field(default_factory=list)

    def add_node(self, node_id: int, pose: PoseSE3) -> None:
        self.nodes[int(node_id)] = pose

    def add_edge(self, edge: Edge) -> None:
        if edge.i not in self.nodes or edge.j not in self.nodes:
            raise KeyError(f"edge ({edge.i}, {edge.j}) references a missing node")
        self.edges.append(edge)

    @property
    def sequential(self) -> list[Edge]:
        return [e for e in self.edges if not e.robust]

    @property
    def loops(self) -> list[Edge]:
        return [e for e in self.edges if e.robust]

    @classmethod
    def from_trajectory(cls, traj: Trajectory, information=None) -> PoseGraph:
        """Nodes ``0..n-1`` with odometry edges between consecutive poses."""
        info = ODOMETRY_INFORMATION if information is None else information
        g = cls()
        poses = list(traj)
        for k, p in enumerate(poses):
            g.add_node(k, p)
        for k in range(1, len(poses)):
            g.add_edge(Edge(k - 1, k, compose(inverse(poses[k - 1]), poses[k]), info))
        return g

    def reachable_from(self, start: int) -> set[int]:
        adj: dict[int, list[int]] = {n: [] for n in self.nodes}
        for e in self.edges:
            adj[e.i].append(e.j)
            adj[e.j].append(e.i)
        seen = {start}
        todo = deque([start])
        while todo:
            for m in adj[todo.popleft()]:
                if m not in seen:
                    seen.add(m)
                    todo.append(m)
        return seen

    def is_connected(self) -> bool:
        return not self.nodes or len(self.reachable_from(next(iter(self.nodes)))) == len(self.nodes)

    def trajectory(self) -> Trajectory:
        return Trajectory.from_poses(self.nodes[k] for k in sorted(self.nodes))


# ---------------------------------------------------------------------------
# Residuals


def edge_residual(Z: PoseSE3, Ti: PoseSE3, Tj: PoseSE3) -> np.ndarray:
    return log_se3(compose(compose(inverse(Z), inverse(Ti)), Tj))


def edge_jacobians(Z: PoseSE3, Ti: PoseSE3, Tj: PoseSE3):
    """``(r, J_i, J_j)`` for right perturbations of ``T_i`` and ``T_j``."""
    r = edge_residual(Z, Ti, Tj)
    Zinv = inverse(Z)
    Ji = -se3_left_jacobian_inv(r) @ se3_adjoint(Zinv.R, Zinv.translation)
    Jj = se3_left_jacobian_inv(-r)
    return r, Ji, Jj


def _huber(e: float, k: float) -> tuple[float, float]:
    """(cost scale, IRLS weight) for residual norm ``e``."""
    if e <= k:
        return 1.0, 1.0
    return 2.0 * k / e - (k / e) ** 2, k / e


def edge_cost(edge: Edge, Ti: PoseSE3, Tj: PoseSE3, huber_width: float = HUBER_WIDTH) -> float:
    r = edge_residual(edge.measurement, Ti, Tj)
    s = float(r @ edge.information @ r)
    if edge.robust:
        s *= _huber(float(np.linalg.norm(r)), huber_width)[0]
    return 0.5 * s


def graph_cost(graph: PoseGraph, poses: dict[int, PoseSE3] | None = None,
               huber_width: float = HUBER_WIDTH) -> float:
    poses = graph.nodes if poses is None else poses
    return float(sum(edge_cost(e, poses[e.i], poses[e.j], huber_width) for e in graph.edges))


# ---------------------------------------------------------------------------
# Levenberg-Marquardt


@dataclass(frozen=True, eq=False)
class OptimizeResult:
    poses: dict[int, PoseSE3]
    initial_cost: float
    final_cost: float
    iterations: int
    converged: bool

    @property
    def status(self) -> str:
        return "converged" if self.converged else "max_iterations"

    def trajectory(self) -> Trajectory:
        return Trajectory.from_poses(self.poses[k] for k in sorted(self.poses))


def _normal_equations(graph, poses, col, n_free, huber_width):
    rows, cols, vals = [], [], []
    g = np.zeros(6 * n_free)
    for e in graph.edges:
        r, Ji, Jj = edge_jacobians(e.measurement, poses[e.i], poses[e.j])
        W = e.information
        if e.robust:
            W = W * _huber(float(np.linalg.norm(r)), huber_width)[1]
        blocks = [(col[e.i], Ji), (col[e.j], Jj)]
        for a, Ja in blocks:
            if a < 0:
                continue
            g[6 * a:6 * a + 6] += Ja.T @ W @ r
            for b, Jb in blocks:
                if b < 0:
                    continue
                blk = Ja.T @ W @ Jb
                ii, jj = np.meshgrid(np.arange(6 * a, 6 * a + 6), np.arange(6 * b, 6 * b + 6), indexing="ij")
                rows.append(ii.ravel())
                cols.append(jj.ravel())
                vals.append(blk.ravel())
    n = 6 * n_free
    if rows:
        H = coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)).tocsc()
    else:
        H = coo_matrix((n, n)).tocsc()
    return H, g


def optimize(graph: PoseGraph, fixed: int = 0, max_iters: int = 50, tol: float = 1e-8,
             huber_width: float = HUBER_WIDTH, initial_lambda: float = 1e-4) -> OptimizeResult:
    """Minimize the graph cost over all nodes except ``fixed``.

    Steps that do not lower the cost are rejected and the damping grows
    tenfold; accepted steps shrink it. Stops once the step norm falls below
    ``tol`` or after ``max_iters`` linear solves.
    """
    if fixed not in graph.nodes:
        raise KeyError(f"fixed node {fixed} not in graph")
    if len(graph.reachable_from(fixed)) != len(graph.nodes):
        raise DisconnectedGraph("pose graph is not connected")
    order = sorted(graph.nodes)
    free = [k for k in order if k != fixed]
    col = {k: -1 for k in order}
    col.update({k: a for a, k in enumerate(free)})
    poses = dict(graph.nodes)
    cost0 = cost = graph_cost(graph, poses, huber_width)
    if cost == 0.0 or not free:
        return OptimizeResult(poses, cost0, cost, 0, True)

    lam = initial_lambda
    converged = False
    it = 0
    while it < max_iters:
        it += 1
        H, g = _normal_equations(graph, poses, col, len(free), huber_width)
        diag = H.diagonal()
        damp = lam * np.maximum(diag, 1e-12)
        H = H + coo_matrix((damp, (np.arange(len(diag)), np.arange(len(diag)))), shape=H.shape).tocsc()
        delta = -np.atleast_1d(spsolve(H, g))
        if not np.all(np.isfinite(delta)):
            lam *= 10.0
            continue
        step = float(np.linalg.norm(delta))
        trial = dict(poses)
        for k in free:
            a = col[k]
            trial[k] = compose(poses[k], exp_se3(delta[6 * a:6 * a + 6], poses[k].timestamp))
        new_cost = graph_cost(graph, trial, huber_width)
        if new_cost < cost:
            poses, cost = trial, new_cost
            lam = max(lam / 10.0, 1e-12)
        else:
            lam *= 10.0
        if step < tol:
            converged = True
            break
    return OptimizeResult(poses, cost0, cost, it, converged)


# ---------------------------------------------------------------------------
# Loop detection pipeline


def geometric_verify(query: KeyframeRecord, candidate: KeyframeRecord,
                     config: MatchConfig = LOOP_MATCH_CONFIG, seed=0,
                     min_loop_inliers: int = MIN_LOOP_INLIERS,
                     camera: PlanarCamera | None = None) -> Edge | None:
    """Loop edge ``candidate -> query`` if the two frames share enough verified matches.

    With a ``camera`` the relative pose comes from the verified homography
    (planar motion over the ground plane); otherwise it is the relative
    transform of the two poses stored at insertion.
    """
    if query.features is None or candidate.features is None:
        raise ValueError("both keyframes must retain their features")
    try:
        report = enhance_matches(candidate.features, query.features, config, seed)
    except (InsufficientMatches, NoConsensus):
        return None
    if report.n_inliers < min_loop_inliers:
        return None
    if camera is not None:
        Z = camera.relative_pose_from_homography(report.homography, normalized=config.intrinsics is not None)
    elif query.pose is not None and candidate.pose is not None:
        Z = compose(inverse(candidate.pose), query.pose)
    else:
        raise ValueError("relative pose needs stored poses or a camera model")
    i = candidate.id if candidate.id is not None else -1
    j = query.id if query.id is not None else -2
    if i == j:
        i, j = -1, -2
    return LoopEdge(i, j, Z, inlier_count=report.n_inliers)


@dataclass(frozen=True, eq=False)
class LoopClosureResult:
    initial: Trajectory
    corrected: Trajectory
    loop_edges: list[Edge]
    optimization: OptimizeResult | None


def close_loops(trajectory: Trajectory, keyframes, vocabulary: VocabularyTree,
                camera: PlanarCamera | None = None, config: MatchConfig = LOOP_MATCH_CONFIG,
                min_gap: int = DEFAULT_MIN_GAP, top_n: int = 3,
                min_loop_inliers: int = MIN_LOOP_INLIERS, seed=0,
                max_iters: int = 50, tol: float = 1e-8) -> LoopClosureResult:
    """Insert keyframes in order, verify retrieved candidates, then optimize.

    ``keyframes[k]`` are the features of trajectory node ``k``.
    """
    if len(keyframes) != len(trajectory):
        raise ValueError("one feature set per trajectory node is required")
    db = KeyframeDatabase(min_gap=min_gap)
    graph = PoseGraph.from_trajectory(trajectory)
    loops = []
    for k, fs in enumerate(keyframes):
        pose = trajectory[k]
        record = KeyframeRecord(transform(fs, vocabulary), fs, pose, pose.timestamp, id=k)
        for cand_id, _ in db.query(record.bow, top_n=top_n, current_id=k):
            edge = geometric_verify(record, db[cand_id], config, seed=[int(seed), k, cand_id],
                                    min_loop_inliers=min_loop_inliers, camera=camera)
            if edge is not None:
                loops.append(edge)
                graph.add_edge(edge)
        db.add(KeyframeRecord(record.bow, fs, pose, pose.timestamp))
    if not loops:
        return LoopClosureResult(trajectory, trajectory, [], None)
    res = optimize(graph, fixed=0, max_iters=max_iters, tol=tol)
    return LoopClosureResult(trajectory, res.trajectory(), loops, res)


# ---------------------------------------------------------------------------
# g2o text format


def _upper(info) -> list[float]:
    return [float(info[a, b]) for a in range(6) for b in range(a, 6)]


def format_g2o(graph: PoseGraph) -> str:
    lines = []
    for k in sorted(graph.nodes):
        p = graph.nodes[k]
        q = p.rotation
        vals = [*p.translation, q[1], q[2], q[3], q[0]]
        lines.append(f"VERTEX_SE3:QUAT {k} " + " ".join(repr(float(v)) for v in vals))
    for e in graph.edges:
        z = e.measurement
        q = z.rotation
        vals = [*z.translation, q[1], q[2], q[3], q[0], *_upper(e.information)]
        tag = "EDGE_SE3:QUAT"
        extra = f" # loop inliers={e.inlier_count}" if e.robust else ""
        lines.append(f"{tag} {e.i} {e.j} " + " ".join(repr(float(v)) for v in vals) + extra)
    return "\n".join(lines) + "\n"


def parse_g2o(text: str) -> PoseGraph:
    g = PoseGraph()
    pending = []
    for lineno, line in enumerate(text.splitlines(), 1):
        body, _, comment = line.partition("#")
        parts = body.split()
        if not parts:
            continue
        try:
            if parts[0] == "VERTEX_SE3:QUAT":
                if len(parts) != 9:
                    raise ValueError("vertex needs id and 7 values")
                v = [float(x) for x in parts[2:]]
                g.add_node(int(parts[1]), PoseSE3([v[6], v[3], v[4], v[5]], v[:3]))
            elif parts[0] == "EDGE_SE3:QUAT":
                if len(parts) != 31:
                    raise ValueError("edge needs 2 ids, 7 values and 21 information entries")
                v = [float(x) for x in parts[3:]]
                info = np.zeros((6, 6))
                info[np.triu_indices(6)] = v[7:]
                info = info + np.triu(info, 1).T
                Z = PoseSE3([v[6], v[3], v[4], v[5]], v[:3])
                robust = "loop" in comment
                inliers = 0
                if "inliers=" in comment:
                    inliers = int(comment.split("inliers=")[1].split()[0])
                pending.append((lineno, Edge(int(parts[1]), int(parts[2]), Z, info, inliers, robust)))
            else:
                raise ValueError(f"unknown record {parts[0]!r}")
        except ValueError as exc:
            raise MalformedFile(str(exc), line=lineno) from exc
    for lineno, e in pending:
        try:
            g.add_edge(e)
        except KeyError as exc:
            raise MalformedFile(str(exc), line=lineno) from exc
    return g


def write_g2o(path, graph: PoseGraph) -> None:
    Path(path).write_text(format_g2o(graph))


def read_g2o(path) -> PoseGraph:
    return parse_g2o(Path(path).read_text())


def endpoint_error(est: Trajectory, ref: Trajectory) -> float:
    return float(math.dist(est.positions[-1], ref.positions[-1]))
