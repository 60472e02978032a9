"""Detection and event metrics: P/R/F1, PR curves, AP/mAP, agreement and hint rates.

Degenerate-denominator conventions (recorded in every report under
``CONVENTIONS``):

* a ratio whose denominator is zero is 0, except that ``tp = fp = fn = 0``
  yields precision = recall = F1 = 1;
* agreement between two empty tracks is 1;
* AP uses the all-points precision envelope.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import BoundingBox, Detection, match_detections

CONVENTIONS = {
    "zero_denominator": "ratio = 0 when its denominator is 0; tp=fp=fn=0 gives P=R=F1=1",
    "ap_interpolation": "all-points precision envelope",
    "agreement_empty": "two empty tracks agree with rate 1",
    "threshold_compare": ">= (inclusive)",
}

COCO_IOU_THRESHOLDS = tuple(float(t) for t in np.round(np.linspace(0.5, 0.95, 10), 2))


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @classmethod
    def from_labels(cls, y_true, y_pred) -> "ConfusionCounts":
        t = np.asarray(y_true, dtype=bool)
        p = np.asarray(y_pred, dtype=bool)
        return cls(int(np.sum(t & p)), int(np.sum(~t & p)), int(np.sum(t & ~p)), int(np.sum(~t & ~p)))


def prf(counts: ConfusionCounts) -> tuple[float, float, float]:
    """Precision, recall and F1 with the module's zero-denominator conventions."""
    tp, fp, fn = counts.tp, counts.fp, counts.fn
    if tp == fp == fn == 0:
        return 1.0, 1.0, 1.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return precision, recall, f1_score(precision, recall)


def f1_score(precision: float, recall: float) -> float:
    """Harmonic mean of precision and recall (0 when both are 0)."""
    s = precision + recall
    return 2.0 * precision * recall / s if s > 0 else 0.0


@dataclass
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    thresholds: np.ndarray

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("threshold,recall,precision\n")
            for t, r, p in zip(self.thresholds, self.recall, self.precision):
                fh.write(f"{t!r},{r!r},{p!r}\n")


def _ranked(scores, is_tp):
    scores = np.asarray(scores, dtype=np.float64)
    flags = np.asarray(is_tp, dtype=bool)
    if scores.shape != flags.shape:
        raise ValueError("scores and flags must align")
    order = np.argsort(-scores, kind="stable")
    return scores[order], flags[order]


def pr_curve(scores, is_tp, n_positives: int) -> PRCurve:
    """Precision/recall after each prediction in descending score order."""
    if n_positives < 1:
        raise ValueError("a PR curve needs at least one positive")
    s, f = _ranked(scores, is_tp)
    tp = np.cumsum(f)
    fp = np.cumsum(~f)
    precision = tp / np.maximum(tp + fp, 1)
    return PRCurve(tp / n_positives, precision, s)


def average_precision(scores, is_tp, n_positives: int) -> float:
    """Area under the all-points-interpolated precision/recall step curve."""
    if n_positives < 1:
        raise ValueError("average precision is undefined without positives")
    if len(np.atleast_1d(scores)) == 0:
        return 0.0
    curve = pr_curve(scores, is_tp, n_positives)
    envelope = np.maximum.accumulate(curve.precision[::-1])[::-1]
    recall = np.concatenate([[0.0], curve.recall])
    return float(np.sum(np.diff(recall) * envelope))


def map_over_classes(aps: Sequence[float]) -> float:
    aps = np.asarray(list(aps), dtype=np.float64)
    if aps.size == 0:
        raise ValueError("need at least one class AP")
    return float(aps.mean())


def split_map(aps: Sequence[float]) -> float:
    """Mean AP across split-trained models."""
    return map_over_classes(aps)


@dataclass
class IoUSweep:
    map_50_95: float
    map_50: float
    per_threshold: dict


def map_over_iou(
    images: Iterable[tuple[Sequence[Detection], Sequence[BoundingBox]]],
    thresholds: Sequence[float] = COCO_IOU_THRESHOLDS,
) -> IoUSweep:
    """AP at each IoU threshold over a set of images, averaged across thresholds.

    ``images`` yields ``(detections, ground_truth_boxes)`` pairs; detections
    from all images are pooled before ranking.
    """
    images = list(images)
    n_pos = sum(len(g) for _, g in images)
    per = {}
    for t in thresholds:
        scores, flags = [], []
        for dets, gts in images:
            m = match_detections(dets, gts, t)
            scores.extend(m.scores.tolist())
            flags.extend(m.is_tp.tolist())
        per[float(t)] = average_precision(scores, flags, n_pos) if n_pos else 0.0
    vals = list(per.values())
    return IoUSweep(float(np.mean(vals)), per.get(0.5, vals[0]), per)


# -- intervals ------------------------------------------------------------------


def merge_intervals(intervals: Iterable[tuple[float, float]]) -> list[tuple[float, float]]:
    """Union of closed intervals as a sorted list of disjoint spans."""
    out: list[list[float]] = []
    for s, e in sorted((float(s), float(e)) for s, e in intervals):
        if e < s:
            raise ValueError(f"interval end {e} precedes start {s}")
        if out and s <= out[-1][1]:
            out[-1][1] = max(out[-1][1], e)
        else:
            out.append([s, e])
    return [(s, e) for s, e in out]


def _measure(spans) -> float:
    return float(sum(e - s for s, e in spans))


def _intersection_measure(a, b) -> float:
    i = j = 0
    total = 0.0
    while i < len(a) and j < len(b):
        lo = max(a[i][0], b[j][0])
        hi = min(a[i][1], b[j][1])
        if hi > lo:
            total += hi - lo
        if a[i][1] < b[j][1]:
            i += 1
        else:
            j += 1
    return total


def _spans(track) -> list[tuple[float, float]]:
    out = []
    for iv in track:
        if hasattr(iv, "start"):
            out.append((iv.start, iv.end))
        else:
            out.append((iv[0], iv[1]))
    return out


def agreement_rate(t1, t2) -> float:
    """Inter-rater agreement: measure of the intersection over measure of the union."""
    a = merge_intervals(_spans(t1))
    b = merge_intervals(_spans(t2))
    inter = _intersection_measure(a, b)
    union = _measure(a) + _measure(b) - inter
    if union == 0:
        return 1.0
    return inter / union


def agreement_totals(t1, t2) -> tuple[float, float]:
    """``(intersection, union)`` durations, for pooling across videos."""
    a = merge_intervals(_spans(t1))
    b = merge_intervals(_spans(t2))
    inter = _intersection_measure(a, b)
    return inter, _measure(a) + _measure(b) - inter


def _overlap(a, b) -> float:
    return min(a[1], b[1]) - max(a[0], b[0])


@dataclass
class HintRates:
    system: float
    experts: float
    n_system: int
    n_experts: int
    n_union: int
    n_shared: int


def hint_rate(system, experts, match_tolerance: float = 0.0) -> HintRates:
    """Fraction of the unified event set found by each source.

    Two events are the same seizure when ``overlap + tolerance > 0``; the
    pairing is a maximum one-to-one matching so each event counts once.
    """
    a, b = _spans(system), _spans(experts)
    shared = 0
    if a and b:
        same = np.array([[_overlap(x, y) + match_tolerance > 0 for y in b] for x in a])
        if same.any():
            rows, cols = linear_sum_assignment(same, maximize=True)
            shared = int(same[rows, cols].sum())
    union = len(a) + len(b) - shared
    if union == 0:
        return HintRates(1.0, 1.0, 0, 0, 0, 0)
    return HintRates(len(a) / union, len(b) / union, len(a), len(b), union, shared)


def match_events(predicted, annotated) -> ConfusionCounts:
    """One-to-one greedy matching by overlap length (ties: earlier prediction, then annotation)."""
    p, g = _spans(predicted), _spans(annotated)
    pairs = []
    for i, x in enumerate(p):
        for j, y in enumerate(g):
            ov = _overlap(x, y)
            if ov > 0:
                pairs.append((-ov, i, j))
    pairs.sort()
    used_p, used_g = set(), set()
    for _, i, j in pairs:
        if i not in used_p and j not in used_g:
            used_p.add(i)
            used_g.add(j)
    tp = len(used_p)
    return ConfusionCounts(tp=tp, fp=len(p) - tp, fn=len(g) - tp)


@dataclass
class EvaluationReport:
    """Serializable bundle of metrics with the conventions used to compute them."""

    precision: float
    recall: float
    f1: float
    counts: ConfusionCounts
    ap: Optional[float] = None
    extra: Optional[dict] = None

    @classmethod
    def from_predictions(cls, y_true, scores, threshold: float = 0.5, extra=None) -> "EvaluationReport":
        y_true = np.asarray(y_true, dtype=bool)
        scores = np.asarray(scores, dtype=np.float64)
        counts = ConfusionCounts.from_labels(y_true, scores >= threshold)
        p, r, f = prf(counts)
        ap = average_precision(scores, y_true, int(y_true.sum())) if y_true.any() else None
        return cls(p, r, f, counts, ap, extra)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conventions"] = CONVENTIONS
        return d
