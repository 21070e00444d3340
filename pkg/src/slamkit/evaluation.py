"""Trajectory accuracy metrics: ATE, RPE, error distributions, improvement reports."""

from __future__ import annotations

import csv
import io as _io
import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateGeometry,
    InsufficientLength,
    InsufficientSamples,
    NonPositiveBaseline,
    NoOverlap,
)
from .geometry import PoseSE3, Trajectory, so3_log

DEFAULT_MAX_DIFF = 0.02


def associate(est: Trajectory, ref: Trajectory, max_diff: float = DEFAULT_MAX_DIFF) -> list[tuple[int, int]]:
    """One-to-one pairs by greedy nearest timestamp, closest pairs first.

    Returned sorted by estimate index. Ties in time difference go to the
    lower estimate index, then the lower reference index.
    """
    if len(est) == 0 or len(ref) == 0:
        raise NoOverlap("empty trajectory")
    ts_e, ts_r = est.timestamps, ref.timestamps
    cand = []
    for i, t in enumerate(ts_e):
        lo = np.searchsorted(ts_r, t - max_diff, side="left")
        hi = np.searchsorted(ts_r, t + max_diff, side="right")
        for j in range(lo, hi):
            d = abs(t - ts_r[j])
            if d <= max_diff:
                cand.append((d, i, j))
    cand.sort()
    used_e, used_r, pairs = set(), set(), []
    for _, i, j in cand:
        if i not in used_e and j not in used_r:
            used_e.add(i)
            used_r.add(j)
            pairs.append((i, j))
    if not pairs:
        raise NoOverlap(f"no timestamps within {max_diff} s")
    pairs.sort()
    return pairs


@dataclass(frozen=True)
class SimilarityTransform:
    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def apply(self, pts) -> np.ndarray:
        return self.scale * np.asarray(pts, dtype=float) @ self.rotation.T + self.translation

    def apply_pose(self, p: PoseSE3) -> PoseSE3:
        return PoseSE3.from_rt(self.rotation @ p.R, self.apply(p.translation), p.timestamp)

    @classmethod
    def identity(cls) -> SimilarityTransform:
        return cls(np.eye(3), np.zeros(3), 1.0)


def umeyama_align(source, target, with_scale: bool = False) -> SimilarityTransform:
    """Least-squares ``S`` with ``target ~ s R source + t``."""
    X = np.asarray(source, dtype=float).reshape(-1, 3)
    Y = np.asarray(target, dtype=float).reshape(-1, 3)
    if len(X) != len(Y):
        raise ValueError("point sets differ in length")
    if len(X) < 3:
        raise DegenerateGeometry("need at least 3 point pairs")
    mx, my = X.mean(0), Y.mean(0)
    Xc, Yc = X - mx, Y - my
    sx = np.linalg.svd(Xc, compute_uv=False)
    sy = np.linalg.svd(Yc, compute_uv=False)
    scale_ref = max(sx[0], sy[0], 1e-300)
    if sx[1] <= 1e-10 * scale_ref or sy[1] <= 1e-10 * scale_ref:
        raise DegenerateGeometry("points are collinear")
    if np.array_equal(X, Y):
        return SimilarityTransform.identity()
    C = Yc.T @ Xc / len(X)
    U, D, Vt = np.linalg.svd(C)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = 1.0
    if with_scale:
        var = np.mean(np.sum(Xc**2, axis=1))
        s = float(np.trace(np.diag(D) @ S) / var)
    t = my - s * R @ mx
    return SimilarityTransform(R, t, s)


@dataclass(frozen=True, eq=False)
class AteResult:
    rmse: float
    mean: float
    median: float
    min: float
    max: float
    errors: np.ndarray
    timestamps: np.ndarray
    transform: SimilarityTransform

    def summary(self) -> dict:
        return {k: getattr(self, k) for k in ("rmse", "mean", "median", "min", "max")}


def _stats(errors):
    return (
        float(math.sqrt(np.mean(errors**2))),
        float(np.mean(errors)),
        float(np.median(errors)),
        float(np.min(errors)),
        float(np.max(errors)),
    )


def ate(est: Trajectory, ref: Trajectory, align: bool = True, with_scale: bool = False,
        max_diff: float = DEFAULT_MAX_DIFF) -> AteResult:
    """Per-pose translation error after optional alignment of ``est`` onto ``ref``."""
    pairs = np.array(associate(est, ref, max_diff))
    P = est.positions[pairs[:, 0]]
    Q = ref.positions[pairs[:, 1]]
    S = umeyama_align(P, Q, with_scale) if align else SimilarityTransform.identity()
    # trans(ref^-1 S(est)) = R_ref^T (S(p) - q); the rotation does not change the norm
    errors = np.linalg.norm(S.apply(P) - Q, axis=1) if align else np.linalg.norm(P - Q, axis=1)
    return AteResult(*_stats(errors), errors, ref.timestamps[pairs[:, 1]], S)


@dataclass(frozen=True, eq=False)
class RpeResult:
    trans_rmse: float
    rot_rmse: float
    delta: int
    trans_errors: np.ndarray
    rot_errors: np.ndarray

    @property
    def rot_rmse_deg(self) -> float:
        return math.degrees(self.rot_rmse)

    def summary(self) -> dict:
        return {"rpe_t": self.trans_rmse, "rpe_r": self.rot_rmse, "rpe_r_deg": self.rot_rmse_deg,
                "delta": self.delta}


def rpe(est: Trajectory, ref: Trajectory, delta: int = 1, max_diff: float = DEFAULT_MAX_DIFF) -> RpeResult:
    """Relative pose error over ``delta`` associated frames."""
    if delta < 1:
        raise ValueError("delta must be >= 1")
    pairs = np.array(associate(est, ref, max_diff))
    if len(pairs) < delta + 1:
        raise InsufficientLength(f"need at least {delta + 1} associated poses, have {len(pairs)}")
    Re, te = est.rotations()[pairs[:, 0]], est.positions[pairs[:, 0]]
    Rr, tr = ref.rotations()[pairs[:, 1]], ref.positions[pairs[:, 1]]

    def rel(R, t):
        Rd = np.einsum("nji,njk->nik", R[:-delta], R[delta:])
        td = np.einsum("nji,nj->ni", R[:-delta], t[delta:] - t[:-delta])
        return Rd, td

    Rde, tde = rel(Re, te)
    Rdr, tdr = rel(Rr, tr)
    # E = (ref_rel)^-1 est_rel
    RE = np.einsum("nji,njk->nik", Rdr, Rde)
    tE = np.einsum("nji,nj->ni", Rdr, tde - tdr)
    terr = np.linalg.norm(tE, axis=1)
    rerr = np.array([np.linalg.norm(so3_log(R)) for R in RE])
    return RpeResult(float(math.sqrt(np.mean(terr**2))), float(math.sqrt(np.mean(rerr**2))), delta, terr, rerr)


# ---------------------------------------------------------------------------
# Reports


def improvement_report(baseline, improved) -> float | None:
    """Percent reduction of ``improved`` relative to ``baseline``.

    ``None`` for either value marks a failed run and yields ``None``.
    """
    if baseline is None or improved is None:
        return None
    if not baseline > 0:
        raise NonPositiveBaseline(f"baseline must be positive, got {baseline}")
    return 100.0 * (baseline - improved) / baseline


def parse_metric(text: str) -> float | None:
    """Table cell to value: ``failed``/``x``/``-`` and a literal 0 mark a failed run."""
    s = text.strip().lower()
    if s in ("failed", "fail", "x", "-", "nan", ""):
        return None
    v = float(s)
    return None if v == 0.0 else v


def format_percent(p: float | None) -> str:
    return "failed" if p is None else f"{p:.1f}%"


@dataclass(frozen=True, eq=False)
class ErrorDistribution:
    mean: float
    sigma: float
    counts: np.ndarray
    edges: np.ndarray
    n: int

    def density(self) -> np.ndarray:
        width = np.diff(self.edges)
        return self.counts / (self.n * width)

    def gaussian_pdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.sigma == 0:
            return np.where(x == self.mean, np.inf, 0.0)
        z = (x - self.mean) / self.sigma
        return np.exp(-0.5 * z * z) / (self.sigma * math.sqrt(2 * math.pi))

    def to_csv(self) -> str:
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "count", "density", "gaussian_pdf"])
        centers = 0.5 * (self.edges[:-1] + self.edges[1:])
        pdf = self.gaussian_pdf(centers)
        for lo, hi, c, d, g in zip(self.edges[:-1], self.edges[1:], self.counts, self.density(), pdf):
            w.writerow([repr(float(lo)), repr(float(hi)), int(c), repr(float(d)), repr(float(g))])
        return buf.getvalue()


def error_distribution(series, bins: int = 50) -> ErrorDistribution:
    """Histogram and maximum-likelihood Gaussian fit (population sigma)."""
    x = np.asarray(series, dtype=float).reshape(-1)
    if len(x) < 10:
        raise InsufficientSamples(f"need at least 10 samples, have {len(x)}")
    counts, edges = np.histogram(x, bins=bins)
    return ErrorDistribution(float(x.mean()), float(x.std(ddof=0)), counts, edges, len(x))


def errors_to_csv(timestamps, errors) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["timestamp", "error"])
    for t, e in zip(timestamps, errors):
        w.writerow([repr(float(t)), repr(float(e))])
    return buf.getvalue()
