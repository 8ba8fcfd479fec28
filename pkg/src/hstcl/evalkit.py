"""Offline labelling, tolerance F1, segment covering and threshold search.

All indices are 0-based. A change point is the first index of the new
segment, so points ``{50}`` over ``T = 100`` split ``[0, 100)`` into
``[0, 50)`` and ``[50, 100)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np


class InfeasibleError(ValueError):
    pass


# ---------------------------------------------------------------------------
# segmentations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Segmentation:
    points: tuple[int, ...]
    T: int

    def __post_init__(self):
        pts = tuple(int(p) for p in self.points)
        if any(b <= a for a, b in zip(pts[:-1], pts[1:])):
            raise ValueError("change points must be strictly increasing")
        if pts and (pts[0] <= 0 or pts[-1] >= self.T):
            raise ValueError(f"change points must lie in (0, {self.T})")
        object.__setattr__(self, "points", pts)

    @classmethod
    def from_points(cls, points: Sequence[int], T: int) -> "Segmentation":
        """Clips to (0, T) and deduplicates; raw detector output may touch the ends."""
        pts = sorted({int(p) for p in points if 0 < int(p) < T})
        return cls(tuple(pts), T)

    def segments(self) -> list[tuple[int, int]]:
        bounds = [0, *self.points, self.T]
        return list(zip(bounds[:-1], bounds[1:]))


def jaccard(a: tuple[int, int], b: tuple[int, int]) -> float:
    inter = max(0, min(a[1], b[1]) - max(a[0], b[0]))
    union = max(a[1], b[1]) - min(a[0], b[0])
    return inter / union if union > 0 else 0.0


def covering(truth: Segmentation, detected: Segmentation) -> float:
    if truth.T != detected.T:
        raise ValueError("segmentations must cover the same horizon")
    det = detected.segments()
    total = 0.0
    for seg in truth.segments():
        total += (seg[1] - seg[0]) * max(jaccard(seg, d) for d in det)
    return total / truth.T


# ---------------------------------------------------------------------------
# F1 with tolerance
# ---------------------------------------------------------------------------

@dataclass
class F1Result:
    tp: int
    fp: int
    precision: float
    recall: float
    f1: float


def f1_at_tolerance(truth: Sequence[int], detected: Sequence[int], theta: float) -> F1Result:
    """A truth point is hit if any detection lies within ``theta``; a detection is a
    false positive if no truth point lies within ``theta``.

    With no truth points recall (and so F1) is NaN.
    """
    t = np.asarray(sorted(truth), dtype=np.float64)
    d = np.asarray(sorted(detected), dtype=np.float64)
    if t.size and d.size:
        close = np.abs(t[:, None] - d[None, :]) <= theta
        tp = int(close.any(axis=1).sum())
        fp = int((~close.any(axis=0)).sum())
    else:
        tp, fp = 0, int(d.size)
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    if t.size == 0:
        return F1Result(tp, fp, precision, math.nan, math.nan)
    recall = tp / t.size
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return F1Result(tp, fp, precision, recall, f1)


# ---------------------------------------------------------------------------
# offline labeller
# ---------------------------------------------------------------------------

def segment_costs(series: np.ndarray) -> np.ndarray:
    """``C[i, j]`` = squared deviation of ``series[i:j]`` from its mean (inf unless j > i)."""
    x = np.asarray(series, dtype=np.float64)
    x = x - x.mean()
    T = x.size
    s1 = np.concatenate([[0.0], np.cumsum(x)])
    s2 = np.concatenate([[0.0], np.cumsum(x * x)])
    n = np.arange(T + 1)[None, :] - np.arange(T + 1)[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        d1 = s1[None, :] - s1[:, None]
        cost = (s2[None, :] - s2[:, None]) - d1 * d1 / n
    cost = np.where(n > 0, np.maximum(cost, 0.0), np.inf)
    return cost


def label_offline(series: Sequence[float], K: int) -> list[int]:
    """Exact least-squares segmentation with exactly ``K`` breakpoints."""
    x = np.asarray(series, dtype=np.float64)
    T = x.size
    if K < 0:
        raise InfeasibleError("K must be non-negative")
    if K >= T:
        raise InfeasibleError(f"cannot place {K} breakpoints in a series of length {T}")
    if K == 0:
        return []
    C = segment_costs(x)
    best = C[0].copy()  # best[j]: one segment covering [0, j)
    back = []
    for _ in range(K):
        total = best[:, None] + C  # [i, j]: prefix ends at i, new segment [i, j)
        arg = np.argmin(total, axis=0)
        best = total[arg, np.arange(T + 1)]
        back.append(arg)
    points = []
    j = T
    for arg in reversed(back):
        j = int(arg[j])
        points.append(j)
    return sorted(points)


# ---------------------------------------------------------------------------
# reports and threshold search
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    tp: int
    fp: int
    precision: float
    recall: float
    f1: float
    covering: float
    theta: float
    c: float
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(truth: Sequence[int], detected: Sequence[int], T: int, theta: float,
             c: float = math.nan, metadata: dict | None = None) -> MetricsReport:
    f = f1_at_tolerance(truth, detected, theta)
    cov = covering(Segmentation.from_points(truth, T), Segmentation.from_points(detected, T))
    return MetricsReport(f.tp, f.fp, f.precision, f.recall, f.f1, cov, theta, c,
                         dict(metadata or {}))


def threshold_candidates(scores: Sequence[np.ndarray]) -> np.ndarray:
    allv = np.concatenate([np.asarray(s, dtype=np.float64).ravel() for s in scores])
    qs = np.quantile(allv, np.arange(1, 100) / 100.0)
    return np.unique(np.concatenate([[allv.min(), allv.max()], qs]))


def search_threshold(score_series: Sequence[np.ndarray], truths: Sequence[Sequence[int]],
                     theta: float, detector: Callable | None = None) -> float:
    """Candidate ``c`` with the best mean F1 over the runs; ties go to the larger ``c``."""
    if not score_series:
        raise ValueError("need at least one validation run")
    if detector is None:
        from .system_model import detect_change_points as detector
    best_c, best_f1 = None, -1.0
    for c in threshold_candidates(score_series)[::-1]:
        f1s = [f1_at_tolerance(t, detector(s, c), theta).f1 for s, t in zip(score_series, truths)]
        f1s = [0.0 if math.isnan(v) else v for v in f1s]
        m = float(np.mean(f1s))
        if m > best_f1:
            best_c, best_f1 = float(c), m
    return best_c
