"""File formats: feature files, vocabulary files, trajectories, sequence indexes, config.

Binary layouts (little-endian throughout)::

    feature file  "SVFT" u32 version=1, f64 timestamp_s, u32 dim=256, u64 count,
                  count x (f32 u, f32 v, f32 score, 256 x f32 descriptor)
    vocabulary    "SVVB" u32 version=1, u32 k, u32 L, u32 dim=256, u64 node_count,
                  node_count x (u64 parent, u8 leaf, u64 word_id, f64 weight,
                  256 x f32 centroid); parent/word_id are 2**64-1 when absent
"""

from __future__ import annotations

import csv
import struct
from decimal import Decimal, InvalidOperation
from pathlib import Path

import numpy as np

from .errors import MalformedFile, SlamKitError, UnsupportedVersion
from .geometry import Trajectory
from .matching import DESCRIPTOR_DIM, FeatureSet
from .vocab import NO_PARENT, NO_WORD, VocabularyTree

FEATURE_MAGIC = b"SVFT"
VOCAB_MAGIC = b"SVVB"
VERSION = 1
U64_MAX = np.uint64(2**64 - 1)

_FEATURE_HEADER = struct.Struct("<4sIdIQ")
_FEATURE_RECORD = np.dtype([("u", "<f4"), ("v", "<f4"), ("score", "<f4"), ("desc", "<f4", (DESCRIPTOR_DIM,))])
_VOCAB_HEADER = struct.Struct("<4sIIIIQ")
_VOCAB_NODE = np.dtype([
    ("parent", "<u8"), ("leaf", "u1"), ("word", "<u8"), ("weight", "<f8"),
    ("centroid", "<f4", (DESCRIPTOR_DIM,)),
])


# ---------------------------------------------------------------------------
# Features


def features_to_bytes(fs: FeatureSet) -> bytes:
    rec = np.zeros(len(fs), dtype=_FEATURE_RECORD)
    rec["u"] = fs.points[:, 0]
    rec["v"] = fs.points[:, 1]
    rec["score"] = fs.scores
    rec["desc"] = fs.descriptors
    header = _FEATURE_HEADER.pack(FEATURE_MAGIC, VERSION, float(fs.timestamp), DESCRIPTOR_DIM, len(fs))
    return header + rec.tobytes()


def features_from_bytes(data: bytes, frame_id: int = 0) -> FeatureSet:
    hsize = _FEATURE_HEADER.size
    if len(data) < hsize:
        raise MalformedFile("truncated feature header", offset=len(data))
    magic, version, stamp, dim, count = _FEATURE_HEADER.unpack_from(data)
    if magic != FEATURE_MAGIC:
        raise MalformedFile(f"bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise UnsupportedVersion(f"feature file version {version}")
    if dim != DESCRIPTOR_DIM:
        raise MalformedFile(f"descriptor dimension {dim} != {DESCRIPTOR_DIM}", offset=16)
    body = len(data) - hsize
    rsize = _FEATURE_RECORD.itemsize
    if count > body // rsize:
        whole = body // rsize
        raise MalformedFile(f"truncated: header declares {count} records, found {whole}",
                            offset=hsize + whole * rsize)
    if body != count * rsize:
        raise MalformedFile("trailing bytes after feature records", offset=hsize + count * rsize)
    rec = np.frombuffer(data, dtype=_FEATURE_RECORD, count=count, offset=hsize)
    finite = (np.isfinite(rec["u"]) & np.isfinite(rec["v"]) & np.isfinite(rec["score"])
              & np.isfinite(rec["desc"]).all(axis=1))
    if not finite.all():
        bad = int(np.argmin(finite))
        raise MalformedFile(f"non-finite value in record {bad}", offset=hsize + bad * rsize)
    try:
        return FeatureSet(
            np.column_stack([rec["u"], rec["v"]]).astype(np.float64),
            rec["score"].astype(np.float64),
            rec["desc"].astype(np.float64),
            frame_id=frame_id,
            timestamp=stamp,
        )
    except ValueError as exc:
        raise MalformedFile(f"invalid feature content: {exc}", offset=hsize) from exc


def write_features(path, fs: FeatureSet) -> None:
    Path(path).write_bytes(features_to_bytes(fs))


def read_features(path, frame_id: int = 0) -> FeatureSet:
    return features_from_bytes(Path(path).read_bytes(), frame_id)


# ---------------------------------------------------------------------------
# Vocabulary


def vocabulary_to_bytes(tree: VocabularyTree) -> bytes:
    nodes = np.zeros(tree.n_nodes, dtype=_VOCAB_NODE)
    parents = tree.parents.astype(np.int64)
    nodes["parent"] = np.where(parents == NO_PARENT, U64_MAX, parents.astype(np.uint64))
    nodes["leaf"] = tree.is_leaf
    words = tree.word_ids
    nodes["word"] = np.where(words == NO_WORD, U64_MAX, words.astype(np.uint64))
    nodes["weight"] = tree.weights
    nodes["centroid"] = tree.centroids
    header = _VOCAB_HEADER.pack(VOCAB_MAGIC, VERSION, tree.k, tree.depth, DESCRIPTOR_DIM, tree.n_nodes)
    return header + nodes.tobytes()


def vocabulary_from_bytes(data: bytes) -> VocabularyTree:
    hsize = _VOCAB_HEADER.size
    if len(data) < hsize:
        raise MalformedFile("truncated vocabulary header", offset=len(data))
    magic, version, k, depth, dim, count = _VOCAB_HEADER.unpack_from(data)
    if magic != VOCAB_MAGIC:
        raise MalformedFile(f"bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise UnsupportedVersion(f"vocabulary file version {version}")
    if dim != DESCRIPTOR_DIM:
        raise MalformedFile(f"descriptor dimension {dim} != {DESCRIPTOR_DIM}", offset=16)
    body = len(data) - hsize
    nsize = _VOCAB_NODE.itemsize
    if count > body // nsize:
        whole = body // nsize
        raise MalformedFile(f"truncated: header declares {count} nodes, found {whole}",
                            offset=hsize + whole * nsize)
    if body != count * nsize:
        raise MalformedFile("trailing bytes after vocabulary nodes", offset=hsize + count * nsize)
    if count == 0:
        raise MalformedFile("vocabulary has no root node", offset=hsize)
    nodes = np.frombuffer(data, dtype=_VOCAB_NODE, count=count, offset=hsize)
    raw_parent = nodes["parent"]
    raw_word = nodes["word"]
    if np.any((raw_parent != U64_MAX) & (raw_parent >= count)):
        raise MalformedFile("parent index out of range", offset=hsize)
    if np.any((raw_word != U64_MAX) & (raw_word >= count)):
        raise MalformedFile("word id out of range", offset=hsize)
    parents = np.where(raw_parent == U64_MAX, NO_PARENT, raw_parent.astype(np.int64))
    words = np.where(raw_word == U64_MAX, NO_WORD, raw_word.astype(np.int64))
    weights = nodes["weight"].astype(np.float64)
    if not np.all(np.isfinite(weights)) or np.any(weights < 0):
        raise MalformedFile("invalid word weight", offset=hsize)
    if np.any(nodes["leaf"] > 1):
        raise MalformedFile("leaf flag must be 0 or 1", offset=hsize)
    try:
        tree = VocabularyTree(k, depth, parents, nodes["leaf"].astype(bool), words, weights,
                              nodes["centroid"].copy())
        tree.check_invariants()
    except (ValueError, AssertionError) as exc:
        raise MalformedFile(f"inconsistent vocabulary tree: {exc}", offset=hsize) from exc
    return tree


def write_vocabulary(path, tree: VocabularyTree) -> None:
    Path(path).write_bytes(vocabulary_to_bytes(tree))


def read_vocabulary(path) -> VocabularyTree:
    return vocabulary_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Trajectories


def write_trajectory_tum(path, traj: Trajectory) -> None:
    lines = ["# timestamp tx ty tz qx qy qz qw"]
    for t, p, q in zip(traj.timestamps, traj.positions, traj.quaternions):
        vals = [t, *p, q[1], q[2], q[3], q[0]]
        lines.append(" ".join(repr(float(v)) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def parse_trajectory_tum(text: str) -> Trajectory:
    stamps, pos, quat = [], [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 8:
            raise MalformedFile(f"expected 8 fields, got {len(parts)}", line=lineno)
        try:
            v = [float(x) for x in parts]
        except ValueError as exc:
            raise MalformedFile(f"non-numeric field: {exc}", line=lineno) from exc
        stamps.append(v[0])
        pos.append(v[1:4])
        quat.append([v[7], v[4], v[5], v[6]])
    return _build_trajectory(stamps, pos, quat)


def read_trajectory_tum(path) -> Trajectory:
    return parse_trajectory_tum(Path(path).read_text())


def ns_to_seconds(ns) -> float:
    return float(Decimal(int(ns)) / Decimal(10**9))


def parse_trajectory_euroc_csv(text: str) -> Trajectory:
    """EuRoC ground truth: timestamp[ns], p_xyz, q_wxyz, then ignored columns."""
    stamps, pos, quat = [], [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) < 8:
            raise MalformedFile(f"expected >= 8 columns, got {len(parts)}", line=lineno)
        try:
            if not parts[0].isdigit():
                raise ValueError(f"timestamp {parts[0]!r} is not an integer nanosecond count")
            stamp = ns_to_seconds(parts[0])
            v = [float(x) for x in parts[1:8]]
        except (ValueError, InvalidOperation) as exc:
            if lineno == 1:
                continue  # unprefixed header line
            raise MalformedFile(str(exc), line=lineno) from exc
        stamps.append(stamp)
        pos.append(v[0:3])
        quat.append(v[3:7])
    return _build_trajectory(stamps, pos, quat)


def read_trajectory_euroc_csv(path) -> Trajectory:
    return parse_trajectory_euroc_csv(Path(path).read_text())


def read_trajectory(path) -> Trajectory:
    """TUM text, or EuRoC CSV when the data lines are comma separated."""
    text = Path(path).read_text()
    for line in text.splitlines():
        s = line.strip()
        if s and not s.startswith("#"):
            if "," in s and len(s.split(",")) >= 8:
                return parse_trajectory_euroc_csv(text)
            break
    return parse_trajectory_tum(text)


def _build_trajectory(stamps, pos, quat) -> Trajectory:
    try:
        return Trajectory(np.array(stamps, dtype=float), np.array(pos, dtype=float).reshape(-1, 3),
                          np.array(quat, dtype=float).reshape(-1, 4))
    except ValueError as exc:
        raise MalformedFile(f"invalid trajectory: {exc}") from exc


# ---------------------------------------------------------------------------
# Per-sequence feature directories


def feature_filename(timestamp_ns: int) -> str:
    return f"{int(timestamp_ns)}.svft"


def write_feature_sequence(directory, frames) -> Path:
    """Write one ``<timestamp-ns>.svft`` per frame plus ``index.csv``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    rows = []
    for fs in frames:
        ns = int(round(Decimal(repr(float(fs.timestamp))) * 10**9))
        name = feature_filename(ns)
        write_features(d / name, fs)
        rows.append((ns, name))
    index = d / "index.csv"
    with index.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp_ns", "path"])
        w.writerows(rows)
    return index


def read_feature_index(path) -> list[tuple[int, Path]]:
    path = Path(path)
    base = path.parent
    out = []
    with path.open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or row[0].startswith("#") or row[0] == "timestamp_ns":
                continue
            if len(row) != 2 or not row[0].strip().isdigit():
                raise MalformedFile("expected 'timestamp_ns,path'", line=lineno)
            p = Path(row[1].strip())
            out.append((int(row[0]), p if p.is_absolute() else base / p))
    return out


def read_feature_sequence(path) -> list[FeatureSet]:
    """Frames listed by an index CSV (or a directory containing ``index.csv``)."""
    p = Path(path)
    if p.is_dir():
        p = p / "index.csv"
    return [read_features(f, frame_id=i) for i, (_, f) in enumerate(read_feature_index(p))]


# ---------------------------------------------------------------------------
# key=value configuration


def parse_config(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise MalformedFile("expected key=value", line=lineno)
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def read_config(path) -> dict[str, str]:
    return parse_config(Path(path).read_text())


def write_config(path, values: dict) -> None:
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in values.items()))


__all__ = [
    "MalformedFile",
    "SlamKitError",
    "UnsupportedVersion",
    "features_from_bytes",
    "features_to_bytes",
    "parse_config",
    "parse_trajectory_euroc_csv",
    "parse_trajectory_tum",
    "read_config",
    "read_feature_index",
    "read_feature_sequence",
    "read_features",
    "read_trajectory",
    "read_trajectory_euroc_csv",
    "read_trajectory_tum",
    "read_vocabulary",
    "vocabulary_from_bytes",
    "vocabulary_to_bytes",
    "write_config",
    "write_feature_sequence",
    "write_features",
    "write_trajectory_tum",
    "write_vocabulary",
]
