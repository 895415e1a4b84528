"""Frame scores -> scored segments -> NMS -> AP/mAP over IoU thresholds.

Segments are integer frame intervals ``[start, end)``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

IOU_GRID = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)
DEFAULT_THRESHOLDS = tuple(round(0.1 * k, 1) for k in range(1, 10))
DEFAULT_NMS_IOU = 0.5


@dataclass(frozen=True, order=True)
class Segment:
    start: int
    end: int

    def __post_init__(self):
        if not (0 <= self.start < self.end):
            raise ValueError(f"invalid segment [{self.start}, {self.end})")

    @property
    def length(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class ScoredSegment:
    segment: Segment
    score: float

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError("segment score must be finite")


@dataclass
class EvalItem:
    predictions: list[ScoredSegment]
    ground_truth: list[Segment]
    query: str | int | None = None

    def __post_init__(self):
        if len(set(self.ground_truth)) != len(self.ground_truth):
            raise ValueError("ground-truth segments must be pairwise distinct")


def runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Maximal runs of True as ``(start, end)`` pairs."""
    m = np.concatenate([[False], np.asarray(mask, dtype=bool), [False]])
    d = np.diff(m.astype(np.int8))
    starts = np.flatnonzero(d == 1)
    ends = np.flatnonzero(d == -1)
    return list(zip(starts.tolist(), ends.tolist()))


def scores_to_segments(s, thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> list[ScoredSegment]:
    """Candidates from every threshold: maximal runs with ``s_t >= theta``,
    each scored by its mean activation."""
    if len(thresholds) == 0:
        raise ValueError("need at least one threshold")
    s = np.asarray(s, dtype=np.float64)
    out = []
    for th in thresholds:
        for a, b in runs(s >= th):
            out.append(ScoredSegment(Segment(a, b), float(s[a:b].mean())))
    return out


def labels_to_segments(labels) -> list[Segment]:
    return [Segment(a, b) for a, b in runs(np.asarray(labels) > 0.5)]


def segments_to_labels(segments: Sequence[Segment], L: int) -> np.ndarray:
    y = np.zeros(L)
    for seg in segments:
        y[seg.start : seg.end] = 1.0
    return y


def iou(a: Segment, b: Segment) -> float:
    inter = max(0, min(a.end, b.end) - max(a.start, b.start))
    union = a.length + b.length - inter
    return inter / union


def _rank_key(c: ScoredSegment):
    return (-c.score, c.segment.start, c.segment.length)


def nms(candidates: Sequence[ScoredSegment], iou_threshold: float = DEFAULT_NMS_IOU) -> list[ScoredSegment]:
    """Greedy suppression: keep a candidate iff IoU with every kept one is below the threshold."""
    kept: list[ScoredSegment] = []
    for c in sorted(candidates, key=_rank_key):
        if all(iou(c.segment, k.segment) < iou_threshold for k in kept):
            kept.append(c)
    return kept


def average_precision(items: Sequence[EvalItem], iou_threshold: float) -> float:
    """Interpolation-free detection AP over pooled predictions.

    Predictions from all items are ranked together by score; each is matched
    to the unmatched ground truth of its own item with the highest IoU (at
    least ``iou_threshold``), consuming it.
    """
    total_gt = sum(len(it.ground_truth) for it in items)
    if total_gt == 0:
        raise ValueError("average precision needs at least one ground-truth segment")
    pooled = [
        (p, k) for k, it in enumerate(items) for p in it.predictions
    ]
    pooled.sort(key=lambda pk: (_rank_key(pk[0]), pk[1]))
    used = [np.zeros(len(it.ground_truth), dtype=bool) for it in items]
    tp = 0
    ap = 0.0
    for rank, (p, k) in enumerate(pooled, start=1):
        best, best_j = -1.0, -1
        for j, g in enumerate(items[k].ground_truth):
            if used[k][j]:
                continue
            v = iou(p.segment, g)
            if v >= iou_threshold and v > best:
                best, best_j = v, j
        if best_j >= 0:
            used[k][best_j] = True
            tp += 1
            ap += tp / rank
    return ap / total_gt


@dataclass
class MapTable:
    per_threshold: dict[float, float]
    per_query: list[dict] = field(default_factory=list)

    @property
    def average(self) -> float:
        return float(np.mean(list(self.per_threshold.values())))

    def as_dict(self) -> dict:
        out = {f"{t:.1f}": v for t, v in self.per_threshold.items()}
        out["avg"] = self.average
        return {"map": out, "per_query": self.per_query}

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.as_dict(), indent=2))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "mAP"])
            for t, v in self.per_threshold.items():
                w.writerow([f"{t:.1f}", f"{v:.6f}"])
            w.writerow(["avg", f"{self.average:.6f}"])


def map_suite(items: Sequence[EvalItem], thresholds: Sequence[float] = IOU_GRID) -> MapTable:
    """mAP (in percent) at each IoU threshold.

    Items sharing a ``query`` form one query set; AP is computed per query set
    and averaged. Items with ``query=None`` form a single set.
    """
    if len(items) == 0:
        raise ValueError("map_suite needs at least one item")
    groups: dict = {}
    for it in items:
        groups.setdefault(it.query, []).append(it)
    groups = {k: v for k, v in groups.items() if sum(len(i.ground_truth) for i in v) > 0}
    per_thr = {}
    per_query = []
    for th in thresholds:
        aps = {k: average_precision(v, th) for k, v in groups.items()}
        per_thr[float(th)] = 100.0 * float(np.mean(list(aps.values())))
        for k, v in aps.items():
            per_query.append({"query": k, "iou": float(th), "ap": 100.0 * v})
    return MapTable(per_thr, per_query)


def ground(s, thresholds=DEFAULT_THRESHOLDS, nms_iou=DEFAULT_NMS_IOU) -> list[ScoredSegment]:
    """Full inference path: threshold sweep then NMS."""
    return nms(scores_to_segments(s, thresholds), nms_iou)
