"""``slamkit`` command-line entry point.

Exit status: 0 on success, 1 on a runtime error (message on stderr),
2 on a usage error. ``--json`` replaces the summary lines on stdout with a
single JSON object. A ``--config`` file of ``key=value`` lines supplies
defaults for any option (keys use the option name, dashes or underscores);
flags given on the command line win.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import io
from .errors import SlamKitError
from .evaluation import (
    ate,
    errors_to_csv,
    format_percent,
    improvement_report,
    parse_metric,
    rpe,
)
from .geometry import PlanarCamera
from .loopgraph import LOOP_MATCH_CONFIG, MIN_LOOP_INLIERS, PoseGraph, close_loops, write_g2o
from .matching import MatchConfig, enhance_matches
from .placedb import DEFAULT_MIN_GAP, KeyframeDatabase, KeyframeRecord
from .synth import (
    DriftSpec,
    LoopScenarioSpec,
    SceneSpec,
    gen_drift_trajectory,
    gen_loop_scenario,
    gen_matched_scene,
)
from .vocab import train_vocabulary, transform

CAMERA_FILE = "camera.cfg"


class Output:
    """Collects summary values; prints lines or one JSON object at the end."""

    def __init__(self, as_json: bool):
        self.as_json = as_json
        self.values: dict = {}
        self.lines: list[str] = []

    def add(self, line: str, **values) -> None:
        self.lines.append(line)
        self.values.update(values)

    def flush(self, stream) -> None:
        if self.as_json:
            stream.write(json.dumps(self.values, sort_keys=True) + "\n")
        else:
            for line in self.lines:
                stream.write(line + "\n")


def _verbose(args, msg: str) -> None:
    if args.verbose:
        print(msg, file=sys.stderr)


def _fmt(x: float) -> str:
    return f"{x:.6f}"


# ---------------------------------------------------------------------------
# synth


def cmd_synth_scene(args, out: Output) -> None:
    spec = SceneSpec(n=args.n, outlier_fraction=args.outliers, noise_sigma=args.noise,
                     descriptor_noise=args.descriptor_noise, min_spacing=args.min_spacing, seed=args.seed)
    sc = gen_matched_scene(spec)
    io.write_features(args.out_a, sc.a)
    io.write_features(args.out_b, sc.b)
    if args.truth:
        with open(args.truth, "w", newline="") as fh:
            fh.write("# homography " + " ".join(repr(float(h)) for h in sc.homography.params) + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index_a", "index_b", "inlier"])
            for (ia, ib), ok in zip(sc.pairs.tolist(), sc.inlier.tolist()):
                w.writerow([ia, ib, int(ok)])
    n_out = int(np.count_nonzero(~sc.inlier))
    out.add(f"features {spec.n}", features=spec.n)
    out.add(f"outliers {n_out}", outliers=n_out)


def cmd_synth_drift(args, out: Output) -> None:
    drift = DriftSpec(n=args.nodes, radius=args.radius, laps=args.laps, seed=args.seed)
    if args.out_keyframes:
        sc = gen_loop_scenario(LoopScenarioSpec(drift=drift, seed=args.seed))
        gt, est, pairs = sc.ground_truth, sc.drifted, sc.loop_pairs
        kdir = Path(args.out_keyframes)
        io.write_feature_sequence(kdir, sc.keyframes)
        cam = sc.camera
        io.write_config(kdir / CAMERA_FILE, {
            "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "width": cam.width, "height": cam.height, "plane_distance": cam.plane_distance,
        })
    else:
        d = gen_drift_trajectory(drift)
        gt, est, pairs = d.ground_truth, d.drifted, d.loop_pairs
    io.write_trajectory_tum(args.out_gt, gt)
    io.write_trajectory_tum(args.out_est, est)
    end = float(np.linalg.norm(est.positions[-1] - gt.positions[-1]))
    out.add(f"nodes {len(gt)}", nodes=len(gt))
    out.add(f"loop_pairs {len(pairs)}", loop_pairs=len(pairs))
    out.add(f"endpoint_error {_fmt(end)}", endpoint_error=end)


# ---------------------------------------------------------------------------
# match


def _match_config(args) -> MatchConfig:
    intr = None
    if args.fx is not None:
        if None in (args.fy, args.cx, args.cy):
            raise ValueError("--fx requires --fy, --cx and --cy")
        intr = (args.fx, args.fy, args.cx, args.cy)
    return MatchConfig(mask_radius=args.mask_radius, inlier_threshold=args.threshold,
                       max_iterations=args.max_iterations, confidence=args.confidence,
                       min_matches=args.min_matches, min_similarity=args.min_similarity,
                       symmetric=args.symmetric, intrinsics=intr)


def cmd_match(args, out: Output) -> None:
    a = io.read_features(args.a)
    b = io.read_features(args.b, frame_id=1)
    rep = enhance_matches(a, b, _match_config(args), seed=args.seed)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index_a", "index_b", "similarity", "error", "inlier"])
            for ia, ib, s, e, ok in zip(rep.index_a.tolist(), rep.index_b.tolist(), rep.similarity.tolist(),
                                        rep.errors.tolist(), rep.inlier_mask.tolist()):
                w.writerow([ia, ib, repr(s), repr(e), int(ok)])
    out.add(f"candidates {len(rep.index_a)}", candidates=len(rep.index_a))
    out.add(f"inliers {rep.n_inliers}", inliers=rep.n_inliers)
    out.add(f"mean_inlier_error {_fmt(rep.mean_inlier_error)}", mean_inlier_error=rep.mean_inlier_error)
    out.add("homography " + " ".join(repr(float(h)) for h in rep.homography.params),
            homography=[float(h) for h in rep.homography.params])


# ---------------------------------------------------------------------------
# vocabulary and database


def _load_frames(paths) -> list:
    frames = []
    for p in map(Path, paths):
        if p.is_dir() or p.suffix == ".csv":
            frames.extend(io.read_feature_sequence(p))
        else:
            frames.append(io.read_features(p, frame_id=len(frames)))
    return frames


def cmd_train_vocab(args, out: Output) -> None:
    frames = _load_frames(args.features)
    tree = train_vocabulary(frames, k=args.k, depth=args.depth, seed=args.seed)
    io.write_vocabulary(args.out, tree)
    out.add(f"images {len(frames)}", images=len(frames))
    out.add(f"nodes {tree.n_nodes}", nodes=tree.n_nodes)
    out.add(f"words {tree.n_words}", words=tree.n_words)


def _open_db(path, min_gap) -> KeyframeDatabase:
    p = Path(path)
    if (p / "database.json").exists():
        return KeyframeDatabase.load(p)
    return KeyframeDatabase(min_gap=min_gap)


def cmd_db_add(args, out: Output) -> None:
    tree = io.read_vocabulary(args.vocab)
    db = _open_db(args.db, args.min_gap)
    frames = _load_frames(args.features)
    if args.id_by == "timestamp":
        frames.sort(key=lambda f: f.timestamp)
        last = db.records[-1].timestamp if len(db) else None
        if last is not None and frames and frames[0].timestamp <= last:
            raise ValueError("timestamps must follow the newest stored keyframe")
    ids = [db.add(KeyframeRecord(transform(f, tree), f, None, f.timestamp)) for f in frames]
    db.dump(args.db)
    out.add(f"added {len(ids)}", added=len(ids), ids=ids)
    out.add(f"size {len(db)}", size=len(db))


def cmd_db_query(args, out: Output) -> None:
    tree = io.read_vocabulary(args.vocab)
    db = KeyframeDatabase.load(args.db)
    frames = _load_frames(args.features)
    rows = []
    for k, f in enumerate(frames):
        for rank, (kf, s) in enumerate(db.query(transform(f, tree), top_n=args.top, min_gap=args.min_gap), 1):
            rows.append((k, rank, kf, db[kf].timestamp, s))
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["query", "rank", "keyframe_id", "timestamp", "score"])
            for r in rows:
                w.writerow([r[0], r[1], r[2], repr(float(r[3])), repr(float(r[4]))])
    for q, rank, kf, _, s in rows:
        out.add(f"query {q} rank {rank} keyframe {kf} score {_fmt(s)}")
    out.values["candidates"] = [{"query": q, "rank": r, "keyframe": kf, "score": s} for q, r, kf, _, s in rows]


# ---------------------------------------------------------------------------
# loop closing


def _camera(path) -> PlanarCamera:
    cfg = io.read_config(path)
    fields = {"fx": float, "fy": float, "cx": float, "cy": float, "width": int, "height": int,
              "plane_distance": float}
    return PlanarCamera(**{k: t(float(cfg[k])) if t is int else t(cfg[k]) for k, t in fields.items() if k in cfg})


def cmd_loop_close(args, out: Output) -> None:
    traj = io.read_trajectory(args.traj)
    kdir = Path(args.keyframes)
    frames = io.read_feature_sequence(kdir)
    cam_path = Path(args.camera) if args.camera else kdir / CAMERA_FILE
    camera = _camera(cam_path) if cam_path.exists() else None
    _verbose(args, f"{len(frames)} keyframes, camera {'on' if camera else 'off'}")
    stamps = np.array([f.timestamp for f in frames])
    idx = []
    for t in stamps:
        j = int(np.argmin(np.abs(traj.timestamps - t)))
        if abs(traj.timestamps[j] - t) > args.max_diff:
            raise ValueError(f"no trajectory pose within {args.max_diff} s of keyframe at {t!r}")
        idx.append(j)
    nodes = traj.subset(idx)
    tree = io.read_vocabulary(args.vocab)
    res = close_loops(nodes, frames, tree, camera=camera, config=LOOP_MATCH_CONFIG, min_gap=args.min_gap,
                      min_loop_inliers=args.min_inliers, seed=args.seed)
    io.write_trajectory_tum(args.out, res.corrected)
    if args.graph and res.optimization is not None:
        g = PoseGraph.from_trajectory(res.initial)
        for e in res.loop_edges:
            g.add_edge(e)
        write_g2o(args.graph, g)
    out.add(f"loops {len(res.loop_edges)}", loops=len(res.loop_edges))
    if res.optimization is not None:
        o = res.optimization
        out.add(f"cost {_fmt(o.initial_cost)} -> {_fmt(o.final_cost)}",
                initial_cost=o.initial_cost, final_cost=o.final_cost)
        out.add(f"iterations {o.iterations} {o.status}", iterations=o.iterations, status=o.status)
    if args.ref:
        ref = io.read_trajectory(args.ref)
        before = ate(res.initial, ref, max_diff=args.max_diff).rmse
        after = ate(res.corrected, ref, max_diff=args.max_diff).rmse
        imp = improvement_report(before, after) if before > 0 else None
        out.add(f"ate_before {_fmt(before)}", ate_before=before)
        out.add(f"ate_after {_fmt(after)}", ate_after=after)
        out.add(f"improvement {format_percent(imp)}", improvement=imp)


# ---------------------------------------------------------------------------
# evaluation and reports


def cmd_eval_ate(args, out: Output) -> None:
    est, ref = io.read_trajectory(args.est), io.read_trajectory(args.ref)
    res = ate(est, ref, align=args.align != "none", with_scale=args.align == "sim3", max_diff=args.max_diff)
    if args.out:
        Path(args.out).write_text(errors_to_csv(res.timestamps, res.errors))
    for k, v in res.summary().items():
        out.add(f"{k} {_fmt(v)}", **{k: v})
    out.values["pairs"] = len(res.errors)
    if args.align == "sim3":
        out.add(f"scale {_fmt(res.transform.scale)}", scale=res.transform.scale)


def cmd_eval_rpe(args, out: Output) -> None:
    est, ref = io.read_trajectory(args.est), io.read_trajectory(args.ref)
    res = rpe(est, ref, delta=args.delta, max_diff=args.max_diff)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "trans_error", "rot_error"])
            for i, (t, r) in enumerate(zip(res.trans_errors, res.rot_errors)):
                w.writerow([i, repr(float(t)), repr(float(r))])
    out.add(f"rpe_t {_fmt(res.trans_rmse)}", rpe_t=res.trans_rmse)
    out.add(f"rpe_r {_fmt(res.rot_rmse)} rad ({res.rot_rmse_deg:.4f} deg)",
            rpe_r=res.rot_rmse, rpe_r_deg=res.rot_rmse_deg)
    out.values["delta"] = res.delta


def cmd_report_improvement(args, out: Output) -> None:
    base, imp = parse_metric(args.baseline), parse_metric(args.improved)
    pct = improvement_report(base, imp)
    out.add(format_percent(pct), improvement=pct, baseline=base, improved=imp)


# ---------------------------------------------------------------------------
# parser


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed (default 0)")
    g.add_argument("--config", default=argparse.SUPPRESS, help="key=value file of option defaults")
    g.add_argument("--verbose", action="store_true", default=argparse.SUPPRESS, help="progress on stderr")
    g.add_argument("--json", action="store_true", default=argparse.SUPPRESS,
                   help="print one JSON object instead of summary lines")
    return p


def _match_options(p) -> None:
    p.add_argument("--mask-radius", type=float, default=8.0, help="mask radius r in pixels")
    p.add_argument("--threshold", type=float, default=0.5, help="inlier threshold delta")
    p.add_argument("--max-iterations", type=int, default=2000)
    p.add_argument("--confidence", type=float, default=0.999)
    p.add_argument("--min-matches", type=int, default=8)
    p.add_argument("--min-similarity", type=float, default=0.5)
    p.add_argument("--symmetric", action="store_true", help="symmetric transfer error")
    for name in ("fx", "fy", "cx", "cy"):
        p.add_argument(f"--{name}", type=float, default=None, help="intrinsics for normalized-plane RANSAC")


def build_parser() -> tuple[argparse.ArgumentParser, list[argparse.ArgumentParser]]:
    common = _common()
    root = argparse.ArgumentParser(
        prog="slamkit", parents=[common],
        description="Feature matching, place recognition, pose-graph and trajectory evaluation tools.")
    leaves: list[argparse.ArgumentParser] = []
    sub = root.add_subparsers(dest="command", required=True, metavar="command")

    def leaf(parent_sub, name, func, help_text):
        p = parent_sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        p.set_defaults(func=func)
        leaves.append(p)
        return p

    synth = sub.add_parser("synth", help="generate synthetic data").add_subparsers(
        dest="what", required=True, metavar="kind")
    p = leaf(synth, "scene", cmd_synth_scene, "two feature files related by a planted homography")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--outliers", type=float, default=0.0)
    p.add_argument("--noise", type=float, default=0.5, help="pixel noise sigma")
    p.add_argument("--descriptor-noise", type=float, default=0.05)
    p.add_argument("--min-spacing", type=float, default=0.0)
    p.add_argument("--out-a", required=True)
    p.add_argument("--out-b", required=True)
    p.add_argument("--truth", help="CSV of ground-truth pairs")
    p = leaf(synth, "drift", cmd_synth_drift, "drifting circular trajectory with ground truth")
    p.add_argument("--nodes", type=int, default=100)
    p.add_argument("--radius", type=float, default=10.0)
    p.add_argument("--laps", type=float, default=1.1)
    p.add_argument("--out-gt", required=True)
    p.add_argument("--out-est", required=True)
    p.add_argument("--out-keyframes", help="directory for per-keyframe feature files")

    p = leaf(sub, "match", cmd_match, "masked matching plus RANSAC verification of two feature files")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    _match_options(p)
    p.add_argument("--out", help="CSV of candidate matches")

    p = leaf(sub, "train-vocab", cmd_train_vocab, "train a vocabulary tree")
    p.add_argument("--features", nargs="+", required=True, help="feature files, index CSVs or directories")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--out", required=True)

    db = sub.add_parser("db", help="keyframe database").add_subparsers(dest="what", required=True, metavar="action")
    p = leaf(db, "add", cmd_db_add, "append keyframes to a database directory")
    p.add_argument("--db", default="keyframe_db")
    p.add_argument("--vocab", required=True)
    p.add_argument("--features", nargs="+", required=True)
    p.add_argument("--id-by", choices=["timestamp", "order"], default="timestamp")
    p.add_argument("--min-gap", type=int, default=DEFAULT_MIN_GAP)
    p = leaf(db, "query", cmd_db_query, "rank stored keyframes against query frames")
    p.add_argument("--db", default="keyframe_db")
    p.add_argument("--vocab", required=True)
    p.add_argument("--features", nargs="+", required=True)
    p.add_argument("--top", type=int, default=5)
    p.add_argument("--min-gap", type=int, default=DEFAULT_MIN_GAP)
    p.add_argument("--out")

    p = leaf(sub, "loop-close", cmd_loop_close, "detect loops and optimize the pose graph")
    p.add_argument("--traj", required=True)
    p.add_argument("--keyframes", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--camera", help="camera key=value file (default: <keyframes>/camera.cfg)")
    p.add_argument("--min-gap", type=int, default=DEFAULT_MIN_GAP)
    p.add_argument("--min-inliers", type=int, default=MIN_LOOP_INLIERS)
    p.add_argument("--max-diff", type=float, default=0.02)
    p.add_argument("--ref", help="ground truth for before/after ATE")
    p.add_argument("--graph", help="write the pose graph in g2o format")
    p.add_argument("--out", required=True)

    ev = sub.add_parser("eval", help="trajectory metrics").add_subparsers(dest="what", required=True, metavar="metric")
    p = leaf(ev, "ate", cmd_eval_ate, "absolute trajectory error")
    p.add_argument("--est", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--align", choices=["se3", "sim3", "none"], default="se3")
    p.add_argument("--max-diff", type=float, default=0.02)
    p.add_argument("--out", help="CSV of per-timestamp errors")
    p = leaf(ev, "rpe", cmd_eval_rpe, "relative pose error")
    p.add_argument("--est", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--delta", type=int, default=1)
    p.add_argument("--max-diff", type=float, default=0.02)
    p.add_argument("--out")

    rep = sub.add_parser("report", help="comparison reports").add_subparsers(dest="what", required=True, metavar="kind")
    p = leaf(rep, "improvement", cmd_report_improvement, "percent ATE improvement over a baseline")
    p.add_argument("--baseline", required=True, help="baseline value, or 'failed'")
    p.add_argument("--improved", required=True, help="improved value, or 'failed'")
    return root, leaves


def _apply_config(path, leaves) -> None:
    cfg = io.read_config(path)
    for p in leaves:
        defaults = {}
        for action in p._actions:
            key = action.dest
            if key not in cfg or not action.option_strings:
                continue
            raw = cfg[key]
            if isinstance(action, argparse._StoreTrueAction):
                defaults[key] = raw.lower() in ("1", "true", "yes", "on")
            elif action.nargs in ("+", "*"):
                defaults[key] = raw.split()
            else:
                defaults[key] = action.type(raw) if action.type else raw
            action.required = False
        p.set_defaults(**defaults)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, leaves = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    try:
        if known.config:
            _apply_config(known.config, leaves)
    except (SlamKitError, OSError, ValueError) as exc:
        print(f"slamkit: error: {exc}", file=sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    for name, default in (("seed", 0), ("verbose", False), ("json", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    out = Output(args.json)
    try:
        args.func(args, out)
    except (SlamKitError, OSError, ValueError, KeyError) as exc:
        print(f"slamkit: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    out.flush(sys.stdout)
    return 0


if __name__ == "__main__":
    sys.exit(main())
