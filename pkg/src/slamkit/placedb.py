"""Keyframe database with an inverted index for loop-candidate retrieval."""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import io
from .geometry import PoseSE3
from .matching import FeatureSet
from .vocab import BowVector, score

DEFAULT_MIN_GAP = 30


@dataclass(frozen=True, eq=False)
class KeyframeRecord:
    bow: BowVector
    features: FeatureSet | None = None
    pose: PoseSE3 | None = None
    timestamp: float = 0.0
    id: int | None = None


class InvertedIndex:
    """word id -> [(keyframe id, weight), ...] sorted by keyframe id."""

    def __init__(self):
        self._lists: dict[int, list[tuple[int, float]]] = {}

    def add(self, kf_id: int, bow: BowVector) -> None:
        for w, v in zip(bow.words.tolist(), bow.weights.tolist()):
            self._lists.setdefault(w, []).append((kf_id, v))

    def postings(self, word: int) -> list[tuple[int, float]]:
        return self._lists.get(word, [])

    def as_dict(self) -> dict[int, list[tuple[int, float]]]:
        return {w: list(p) for w, p in sorted(self._lists.items())}


class KeyframeDatabase:
    """Append-only keyframe store.

    Single writer, many readers: ``add`` calls are serialized internally;
    queries must not overlap an insertion.
    """

    def __init__(self, min_gap: int = DEFAULT_MIN_GAP, alpha: float | None = None):
        self.min_gap = min_gap
        self.alpha = alpha
        self.records: list[KeyframeRecord] = []
        self.index = InvertedIndex()
        self._lock = threading.Lock()

    def __len__(self):
        return len(self.records)

    def __getitem__(self, kf_id: int) -> KeyframeRecord:
        return self.records[kf_id]

    def add(self, record: KeyframeRecord) -> int:
        if record.id is not None:
            raise ValueError("record already carries an id")
        with self._lock:
            kf_id = len(self.records)
            self.records.append(replace(record, id=kf_id))
            self.index.add(kf_id, record.bow)
        return kf_id

    def query(self, bow: BowVector, top_n: int = 5, min_gap: int | None = None,
              current_id: int | None = None) -> list[tuple[int, float]]:
        """Best-scoring keyframes older than ``current_id - min_gap``.

        Only keyframes sharing at least one word are scored; ranking is by
        score descending, then older id first.
        """
        gap = self.min_gap if min_gap is None else min_gap
        current = len(self.records) if current_id is None else current_id
        limit = current - gap
        candidates = set()
        for w in bow.words.tolist():
            for kf_id, _ in self.index.postings(w):
                if kf_id >= limit:
                    break
                candidates.add(kf_id)
        scored = [(kf, score(bow, self.records[kf].bow)) for kf in candidates]
        if self.alpha is not None:
            recent = [score(bow, self.records[i].bow)
                      for i in range(max(0, limit), min(current, len(self.records)))]
            if recent and max(recent) > 0:
                floor = self.alpha * max(recent)
                scored = [(kf, s) for kf, s in scored if s >= floor]
        scored.sort(key=lambda x: (-x[1], x[0]))
        return scored[:top_n]

    # -- persistence ---------------------------------------------------------

    def dump(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        meta = {"min_gap": self.min_gap, "alpha": self.alpha, "records": []}
        for r in self.records:
            entry = {
                "id": r.id,
                "timestamp": r.timestamp,
                "words": r.bow.words.tolist(),
                "weights": r.bow.weights.tolist(),
                "pose": None if r.pose is None else [*r.pose.translation.tolist(), *r.pose.rotation.tolist()],
                "features": None,
            }
            if r.features is not None:
                name = f"kf_{r.id:06d}.svft"
                io.write_features(d / name, r.features)
                entry["features"] = name
            meta["records"].append(entry)
        (d / "database.json").write_text(json.dumps(meta, indent=1))

    @classmethod
    def load(cls, directory) -> KeyframeDatabase:
        d = Path(directory)
        meta = json.loads((d / "database.json").read_text())
        db = cls(meta["min_gap"], meta["alpha"])
        for e in meta["records"]:
            pose = None
            if e["pose"] is not None:
                pose = PoseSE3(e["pose"][3:], e["pose"][:3], e["timestamp"])
            feats = io.read_features(d / e["features"], frame_id=e["id"]) if e["features"] else None
            bow = BowVector(np.array(e["words"], dtype=np.int64), np.array(e["weights"]))
            db.add(KeyframeRecord(bow, feats, pose, e["timestamp"]))
        return db


def add_keyframe(db: KeyframeDatabase, record: KeyframeRecord) -> int:
    return db.add(record)


def query(db: KeyframeDatabase, bow: BowVector, top_n: int = 5, min_gap: int = DEFAULT_MIN_GAP):
    return db.query(bow, top_n, min_gap)
