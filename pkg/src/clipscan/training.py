"""Training-sample generation and the per-split training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .ensemble import DecisionPolicy, decide_clip, viewpoints_for_window
from .evaluation import ConfusionCounts, prf
from .frames import FrameSequence
from .model.toy import ToyClipClassifier, backward_and_step
from .sampler import CropPolicy, NormalizationSpec, augment_train, build_inference_clip, middle_frame, sample_clip

log = logging.getLogger(__name__)


@dataclass
class LabeledItem:
    """A recording (or window of one) with a clip-level label and seizure spans in frames."""

    seq: FrameSequence
    label: int
    spans: list = field(default_factory=list)
    detector: Optional[Callable] = None
    item_id: str = ""
    subject: str = ""

    def roi(self, frame_index: int):
        if self.detector is None:
            return None
        return self.detector(frame_index).box

    def candidate_starts(self, clip_len: int) -> tuple[int, int]:
        """Half-open range of clip starts consistent with the label, avoiding wrap-around."""
        n = len(self.seq)
        if self.label == 1 and self.spans:
            s, e = max(self.spans, key=lambda se: se[1] - se[0])
        else:
            s, e = 0, n
        hi = e - clip_len + 1
        return (s, hi) if hi > s else (s, s + 1)


def sample_training_clip(item: LabeledItem, policy: CropPolicy, norm: NormalizationSpec, clip_len, size, seed):
    rng = np.random.default_rng(seed)
    lo, hi = item.candidate_starts(clip_len)
    start = int(rng.integers(lo, hi))
    idx = sample_clip(item.seq, start, clip_len)
    frames = item.seq.get_frames(idx)
    roi = item.roi(int(idx[clip_len // 2])) if policy.mode == "od_crop" else None
    return augment_train(frames, policy, norm, seed=[*np.atleast_1d(seed).tolist(), 1], size=size, roi=roi,
                         source_id=item.seq.source_id, start_frame=start)


def epoch_plan(items: Sequence[LabeledItem], seed: int, epoch: int, balance: bool = True) -> np.ndarray:
    """Item indices for one epoch; class-balanced sampling draws both classes equally often."""
    rng = np.random.default_rng([int(seed), int(epoch), 7])
    n = len(items)
    if not balance:
        return rng.permutation(n)
    labels = np.array([it.label for it in items])
    classes = np.unique(labels)
    per = int(np.ceil(n / len(classes)))
    picks = []
    for c in classes:
        members = np.flatnonzero(labels == c)
        if len(members) >= per:
            picks.append(rng.permutation(members)[:per])
        else:
            picks.append(rng.choice(members, size=per, replace=True))
    return rng.permutation(np.concatenate(picks))


def train_epochs(
    model: ToyClipClassifier,
    items: Sequence[LabeledItem],
    policy: CropPolicy,
    norm: NormalizationSpec,
    epochs: int,
    balance: bool = True,
    on_epoch: Optional[Callable[[int, float], None]] = None,
) -> ToyClipClassifier:
    """Continue training ``model`` for ``epochs`` more epochs.

    Sampling is keyed on ``(model.seed, epoch number)``, so resuming from a
    checkpoint follows the same trajectory as an uninterrupted run.
    """
    model._ensure_initialized()
    cfg = model.train_config
    T, S = model.clip_len, model.size
    for _ in range(epochs):
        epoch = model.epochs_done_
        plan = epoch_plan(items, model.seed, epoch, balance)
        losses = []
        for lo in range(0, len(plan), cfg.batch_size):
            batch = plan[lo : lo + cfg.batch_size]
            clips = np.stack(
                [
                    sample_training_clip(items[i], policy, norm, T, S, [int(model.seed), epoch, lo + k]).data
                    for k, i in enumerate(batch)
                ]
            )
            labels = np.array([items[i].label for i in batch])
            losses.append(backward_and_step(model, clips, labels, cfg))
        model.epochs_done_ += 1
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        log.info("epoch %d mean loss %.5f", epoch, mean_loss)
        if on_epoch is not None:
            on_epoch(epoch, mean_loss)
    return model


def item_viewpoint_clips(item: LabeledItem, mode: str, norm, clip_len, size, n_viewpoints=10) -> np.ndarray:
    """Inference clips at ``n_viewpoints`` uniformly spaced starts across the whole item."""
    starts = viewpoints_for_window(0, len(item.seq), n_viewpoints, clip_len)
    clips = []
    for s in starts:
        roi = item.roi(middle_frame(int(s), clip_len, len(item.seq))) if mode == "od_crop" else None
        clips.append(build_inference_clip(item.seq, int(s), roi, mode, norm, clip_len, size).data)
    return np.stack(clips)


def viewpoint_seizure_probs(model, items, mode, norm, clip_len, size, n_viewpoints=10) -> np.ndarray:
    """``(len(items), n_viewpoints)`` seizure probabilities from one model."""
    out = np.empty((len(items), n_viewpoints))
    for k, it in enumerate(items):
        out[k] = model.predict_proba(item_viewpoint_clips(it, mode, norm, clip_len, size, n_viewpoints))[:, 1]
    return out


def item_f1(model, items, mode, norm, clip_len, size, n_viewpoints=10, policy=DecisionPolicy()) -> float:
    probs = viewpoint_seizure_probs(model, items, mode, norm, clip_len, size, n_viewpoints)
    pred = [decide_clip(p, policy).is_seizure for p in probs]
    counts = ConfusionCounts.from_labels([it.label == 1 for it in items], pred)
    return prf(counts)[2]


def record_detector(rec: dict, seq: FrameSequence, base_dir, kind: str = "oracle", center_sigma=0.0, scale_sigma=0.0, seed=0):
    """ROI provider for a manifest record: ground truth (optionally noisy) or none."""
    import json
    from pathlib import Path

    from .synthdata import OracleDetector, SyntheticRecording

    if kind == "none":
        return None
    if isinstance(seq, SyntheticRecording):
        return OracleDetector(seq, center_sigma, scale_sigma, seed)
    if "truth" in rec:
        truth = json.loads((Path(base_dir) / rec["truth"]).read_text(encoding="utf-8"))
        if "boxes" in truth:
            return OracleDetector(truth, center_sigma, scale_sigma, seed)
    return None


def manifest_items(manifest, records=None, detector: str = "oracle", center_sigma=0.0, scale_sigma=0.0, seed=0) -> list[LabeledItem]:
    """One labelled item per manifest record (clip-level label, seizure spans in frames)."""
    from .ingest import ManifestError, load_recording, record_label

    out = []
    for rec in manifest.records if records is None else records:
        if "label" not in rec and "intervals" not in rec:
            raise ManifestError(f"record {rec['id']} has no label or intervals")
        seq = load_recording(rec, manifest.base_dir)
        fps = seq.fps
        spans = [
            (int(round(iv["start"] * fps)), int(round(iv["end"] * fps)))
            for iv in rec.get("intervals", [])
            if iv.get("label", "seizure") == "seizure"
        ]
        det = record_detector(rec, seq, manifest.base_dir, detector, center_sigma, scale_sigma, seed)
        out.append(LabeledItem(seq, int(record_label(rec) == "seizure"), spans, det, rec["id"], rec.get("subject", "")))
    return out
