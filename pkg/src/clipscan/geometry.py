"""Bounding-box algebra: IoU, CIoU loss, greedy NMS and detection matching.

Boxes are stored in center form ``(cx, cy, w, h)`` in pixel units. Corner form
``(x1, y1, x2, y2)`` is available through :meth:`BoundingBox.corners` and
:meth:`BoundingBox.from_corners`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DEFAULT_NMS_IOU = 0.45


@dataclass(frozen=True)
class BoundingBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box width and height must be positive, got w={self.w}, h={self.h}")

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "BoundingBox":
        return cls((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)

    @property
    def corners(self) -> tuple[float, float, float, float]:
        hw, hh = self.w / 2.0, self.h / 2.0
        return (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)

    @property
    def area(self) -> float:
        return self.w * self.h

    def translate(self, dx: float, dy: float) -> "BoundingBox":
        return BoundingBox(self.cx + dx, self.cy + dy, self.w, self.h)


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    score: float = 1.0
    class_id: int = 0

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score must lie in [0, 1], got {self.score}")


def _intersection(a: BoundingBox, b: BoundingBox) -> float:
    ax1, ay1, ax2, ay2 = a.corners
    bx1, by1, bx2, by2 = b.corners
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes; 0 when they are disjoint."""
    if a == b:
        return 1.0
    inter = _intersection(a, b)
    union = a.area + b.area - inter
    return inter / union


def aspect_penalty(pred: BoundingBox, gt: BoundingBox) -> float:
    """Aspect-ratio consistency term ``(4/pi^2) (atan(w_gt/h_gt) - atan(w/h))^2``."""
    d = math.atan(gt.w / gt.h) - math.atan(pred.w / pred.h)
    return 4.0 / math.pi**2 * d * d


def ciou_loss(pred: BoundingBox, gt: BoundingBox, alpha_mode: str = "standard") -> float:
    """Complete-IoU regression loss.

    ``1 - IoU + rho^2 / c^2 + alpha * v`` where ``rho`` is the distance between
    box centers, ``c`` the diagonal of the smallest enclosing box, ``v`` the
    aspect-ratio penalty and ``alpha = v / ((1 - IoU) + v)``.
    """
    if alpha_mode != "standard":
        raise ValueError(f"unsupported alpha_mode {alpha_mode!r}")
    overlap = iou(pred, gt)
    px1, py1, px2, py2 = pred.corners
    gx1, gy1, gx2, gy2 = gt.corners
    cw = max(px2, gx2) - min(px1, gx1)
    ch = max(py2, gy2) - min(py1, gy1)
    c2 = cw * cw + ch * ch
    rho2 = (pred.cx - gt.cx) ** 2 + (pred.cy - gt.cy) ** 2
    v = aspect_penalty(pred, gt)
    # alpha is 0/0 for identical boxes; the term vanishes there.
    alpha = v / ((1.0 - overlap) + v) if v > 0 else 0.0
    return 1.0 - overlap + rho2 / c2 + alpha * v


def _score_order(dets: Sequence[Detection]) -> list[int]:
    # Stable: equal scores keep insertion order.
    return sorted(range(len(dets)), key=lambda i: -dets[i].score)


def nms(dets: Sequence[Detection], iou_threshold: float = DEFAULT_NMS_IOU) -> list[Detection]:
    """Greedy non-maximum suppression.

    Survivors are returned sorted by descending score. A detection is dropped
    when its IoU with an already kept, higher-ranked detection exceeds
    ``iou_threshold``.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError("iou_threshold must lie in (0, 1)")
    order = _score_order(dets)
    alive = np.ones(len(order), dtype=bool)
    keep = []
    for rank, i in enumerate(order):
        if not alive[rank]:
            continue
        keep.append(dets[i])
        for later in range(rank + 1, len(order)):
            if alive[later] and iou(dets[i].box, dets[order[later]].box) > iou_threshold:
                alive[later] = False
    return keep


@dataclass
class MatchResult:
    """Outcome of matching detections against ground truth.

    ``is_tp`` and ``gt_index`` are aligned with the input detection order;
    ``gt_index`` is -1 for false positives.
    """

    is_tp: np.ndarray
    gt_index: np.ndarray
    n_gt: int
    scores: np.ndarray = field(repr=False)

    @property
    def tp(self) -> int:
        return int(self.is_tp.sum())

    @property
    def fp(self) -> int:
        return int(len(self.is_tp) - self.is_tp.sum())

    @property
    def fn(self) -> int:
        return self.n_gt - self.tp


def match_detections(
    dets: Sequence[Detection], gts: Sequence[BoundingBox], iou_threshold: float = 0.5
) -> MatchResult:
    """Greedy score-ordered matching; each ground truth is claimed at most once.

    A detection is a true positive when the best still-unmatched ground truth
    overlaps it with IoU >= ``iou_threshold``.
    """
    is_tp = np.zeros(len(dets), dtype=bool)
    gt_index = np.full(len(dets), -1, dtype=int)
    taken = [False] * len(gts)
    for i in _score_order(dets):
        best_j, best_iou = -1, -1.0
        for j, gt in enumerate(gts):
            if taken[j]:
                continue
            o = iou(dets[i].box, gt)
            if o > best_iou:
                best_j, best_iou = j, o
        if best_j >= 0 and best_iou >= iou_threshold:
            taken[best_j] = True
            is_tp[i] = True
            gt_index[i] = best_j
    scores = np.array([d.score for d in dets], dtype=float)
    return MatchResult(is_tp=is_tp, gt_index=gt_index, n_gt=len(gts), scores=scores)
