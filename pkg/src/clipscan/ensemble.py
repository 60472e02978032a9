"""Split-model ensembling, viewpoint placement and clip-level decisions."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from ._validation import check_positive_int, check_prob_matrix, check_probability

SEIZURE = "seizure"
NON_SEIZURE = "non_seizure"
SEIZURE_CLASS = 1
TABLE3_THRESHOLDS = (0.2, 0.5, 0.8)


def combine(probs, weights: Optional[Sequence[float]] = None, mode: str = "simple") -> np.ndarray:
    """Average member probability vectors.

    ``probs`` has shape ``(K, C)`` or ``(K, N, C)`` (members first). ``simple``
    takes the arithmetic mean, ``weighted`` computes ``sum w_i p_i / sum w_i``.
    """
    P = np.asarray(probs, dtype=np.float64)
    if P.ndim not in (2, 3) or len(P) == 0:
        raise ValueError("combine expects member-major scores shaped (K, C) or (K, N, C)")
    check_prob_matrix(P.reshape(-1, P.shape[-1]))
    if mode == "simple":
        out = P.mean(axis=0)
    elif mode == "weighted":
        if weights is None:
            raise ValueError("weighted mode needs member weights")
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (len(P),) or np.any(w < 0):
            raise ValueError("need one non-negative weight per member")
        if not w.sum() > 0:
            raise ValueError("weighted ensemble needs a positive weight sum")
        out = np.tensordot(w, P, axes=1) / w.sum()
    else:
        raise ValueError(f"unknown ensemble mode {mode!r}")
    return out / out.sum(axis=-1, keepdims=True)


def viewpoints_for_window(start: int, end: int, n: int = 10, clip_len: int = 64) -> np.ndarray:
    """``n`` clip start frames spread uniformly over ``[start, end - clip_len]``.

    ``end`` is exclusive. Positions are floored to integers. Windows shorter
    than ``clip_len`` put every start at ``start`` (the clip then loops).
    """
    check_positive_int(n, "n")
    if end <= start:
        raise ValueError(f"empty window [{start}, {end})")
    span = max(end - clip_len - start, 0)
    if n == 1:
        return np.array([start], dtype=np.int64)
    i = np.arange(n, dtype=np.int64)
    return start + (i * span) // (n - 1)


@dataclass(frozen=True)
class DecisionPolicy:
    threshold: float = 0.5
    viewpoint_agg: str = "mean"
    k: Optional[int] = None

    def __post_init__(self):
        check_probability(self.threshold, "threshold")
        if self.viewpoint_agg not in ("mean", "k_of_n"):
            raise ValueError("viewpoint_agg must be 'mean' or 'k_of_n'")
        if self.viewpoint_agg == "k_of_n" and (self.k is None or self.k < 1):
            raise ValueError("k_of_n aggregation needs k >= 1")


@dataclass
class ClipDecision:
    seizure_prob: float
    label: str
    viewpoint_probs: list = field(default_factory=list)

    @property
    def is_seizure(self) -> bool:
        return self.label == SEIZURE


def decide_clip(viewpoint_probs, policy: DecisionPolicy = DecisionPolicy()) -> ClipDecision:
    """Clip-level label from per-viewpoint seizure probabilities (thresholds inclusive)."""
    p = np.asarray(viewpoint_probs, dtype=np.float64).reshape(-1)
    if p.size == 0:
        raise ValueError("need at least one viewpoint probability")
    if policy.viewpoint_agg == "mean":
        prob = float(p.mean())
        fired = prob >= policy.threshold
    else:
        if policy.k > p.size:
            raise ValueError(f"k={policy.k} exceeds {p.size} viewpoints")
        hits = int(np.count_nonzero(p >= policy.threshold))
        prob = hits / p.size
        fired = hits >= policy.k
    return ClipDecision(prob, SEIZURE if fired else NON_SEIZURE, [float(x) for x in p])


class SplitEnsembleClassifier(ClassifierMixin, BaseEstimator):
    """Average the class probabilities of already-trained member classifiers.

    Members are any objects with ``predict_proba``. ``weights`` default to the
    members' ``validation_score_`` attribute in weighted mode.
    """

    def __init__(self, members=(), mode="simple", weights=None, threshold=0.5):
        self.members = members
        self.mode = mode
        self.weights = weights
        self.threshold = threshold

    def fit(self, X=None, y=None):
        if len(self.members) < 1:
            raise ValueError("an ensemble needs at least one member")
        check_probability(self.threshold, "threshold")
        if self.mode == "weighted":
            w = self.weights
            if w is None:
                w = [getattr(m, "validation_score_", 1.0) for m in self.members]
            self.weights_ = np.asarray(w, dtype=np.float64)
            if not self.weights_.sum() > 0:
                raise ValueError("weighted ensemble needs a positive weight sum")
        else:
            self.weights_ = np.ones(len(self.members))
        self.classes_ = np.arange(2)
        return self

    def member_proba(self, X) -> np.ndarray:
        """Per-member probabilities, shape ``(K, N, C)``."""
        return np.stack([np.asarray(m.predict_proba(X), dtype=np.float64) for m in self.members])

    def predict_proba(self, X) -> np.ndarray:
        if not hasattr(self, "weights_"):
            self.fit()
        return combine(self.member_proba(X), self.weights_, self.mode)

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, SEIZURE_CLASS] >= self.threshold).astype(int)
