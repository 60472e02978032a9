"""Clip sampling: temporal looping, centre/OD cropping, augmentation, resize, normalization.

Pixel intensities are scaled to [0, 1] before normalization, so
:class:`NormalizationSpec` constants live on that scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .frames import ArraySequence, FrameSequence, SliceSequence
from .geometry import BoundingBox

__all__ = [
    "ArraySequence",
    "ClipBuilder",
    "ClipProvenance",
    "ClipSample",
    "CropPolicy",
    "DEFAULT_SCALES",
    "FrameSequence",
    "NormalizationSpec",
    "POSITIONS",
    "SliceSequence",
    "augment_train",
    "build_inference_clip",
    "centre_crop",
    "centre_crop_rect",
    "flip_clip",
    "od_crop",
    "od_crop_rect",
    "sample_clip",
]

CLIP_LEN = 64
CLIP_SIZE = 112
POSITIONS = ("c", "tl", "tr", "bl", "br")
DEFAULT_SCALES = (1.0, 0.84, 0.71, 0.59, 0.5)
CROP_MODES = ("centre", "od_crop")


@dataclass(frozen=True)
class NormalizationSpec:
    mean: tuple[float, float, float]
    var: tuple[float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "mean", tuple(float(m) for m in self.mean))
        object.__setattr__(self, "var", tuple(float(v) for v in self.var))
        if len(self.mean) != 3 or len(self.var) != 3:
            raise ValueError("mean and var need one value per RGB channel")
        if any(not v > 0 for v in self.var):
            raise ValueError("normalization variances must be positive")

    def apply(self, frames: np.ndarray) -> np.ndarray:
        """Normalize ``(..., 3)`` intensities already scaled to [0, 1]."""
        return (frames - np.asarray(self.mean)) / np.asarray(self.var)

    @classmethod
    def from_frames(cls, frames: np.ndarray) -> "NormalizationSpec":
        x = np.asarray(frames, dtype=np.float64).reshape(-1, 3) / 255.0
        return cls(tuple(x.mean(axis=0)), tuple(x.var(axis=0)))


@dataclass(frozen=True)
class CropPolicy:
    mode: str = "centre"
    positions: tuple[str, ...] = POSITIONS
    scales: tuple[float, ...] = DEFAULT_SCALES

    def __post_init__(self):
        object.__setattr__(self, "positions", tuple(self.positions))
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        if self.mode not in CROP_MODES:
            raise ValueError(f"crop mode must be one of {CROP_MODES}, got {self.mode!r}")
        if not self.positions or any(p not in POSITIONS for p in self.positions):
            raise ValueError(f"positions must be a nonempty subset of {POSITIONS}")
        if not self.scales or any(not 0.0 < s <= 1.0 for s in self.scales):
            raise ValueError("scales must be nonempty with every value in (0, 1]")


@dataclass(frozen=True)
class ClipProvenance:
    source_id: str
    start_frame: int
    crop: tuple[int, int, int]  # x0, y0, side
    flip: bool = False
    scale: float = 1.0
    position: str = "c"
    mode: str = "centre"
    warning: Optional[str] = None


@dataclass
class ClipSample:
    """A ``3 x T x S x S`` float32 tensor plus where it came from."""

    data: np.ndarray
    provenance: ClipProvenance = field(default=None)

    @property
    def shape(self):
        return self.data.shape


def sample_clip(seq, start: int, length: int = CLIP_LEN) -> np.ndarray:
    """Frame indices ``start, start+1, ...`` wrapping cyclically until ``length`` are produced."""
    n = seq if isinstance(seq, (int, np.integer)) else len(seq)
    if n <= 0:
        raise ValueError("cannot sample a clip from an empty sequence")
    if not 0 <= start < n:
        raise ValueError(f"start {start} outside [0, {n})")
    if length < 1:
        raise ValueError("clip length must be at least 1")
    return (start + np.arange(length, dtype=np.int64)) % n


def _floor_half(x: float) -> int:
    return int(math.floor(x + 0.5))


def centre_crop_rect(height: int, width: int) -> tuple[int, int, int]:
    side = min(height, width)
    return ((width - side) // 2, (height - side) // 2, side)


def od_crop_rect(height: int, width: int, roi: BoundingBox) -> tuple[int, int, int]:
    """Square of side ``min(H, W)`` centred on the ROI, clamped inside the frame."""
    if not (0 <= roi.cx <= width and 0 <= roi.cy <= height):
        raise ValueError(f"ROI center ({roi.cx}, {roi.cy}) lies outside the {width}x{height} frame")
    side = min(height, width)
    x0 = min(max(int(math.floor(roi.cx - side / 2.0)), 0), width - side)
    y0 = min(max(int(math.floor(roi.cy - side / 2.0)), 0), height - side)
    return (x0, y0, side)


def _cut(frame: np.ndarray, rect) -> np.ndarray:
    x0, y0, side = rect
    return frame[..., y0 : y0 + side, x0 : x0 + side, :]


def centre_crop(frame: np.ndarray) -> np.ndarray:
    return _cut(frame, centre_crop_rect(*frame.shape[-3:-1]))


def od_crop(frame: np.ndarray, roi: BoundingBox) -> np.ndarray:
    return _cut(frame, od_crop_rect(*frame.shape[-3:-1], roi))


def _axis_weights(n_in: int, n_out: int):
    # Half-pixel centers, edge-clamped.
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_square(frames: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of ``(..., side, side, C)`` frames to ``size x size`` (float64)."""
    x = np.asarray(frames, dtype=np.float64)
    h, w = x.shape[-3], x.shape[-2]
    i0, i1, wy = _axis_weights(h, size)
    a, b = x[..., i0, :, :], x[..., i1, :, :]
    x = a + wy[:, None, None] * (b - a)
    j0, j1, wx = _axis_weights(w, size)
    a, b = x[..., :, j0, :], x[..., :, j1, :]
    return a + wx[:, None] * (b - a)


def _to_tensor(frames: np.ndarray, rect, size: int, norm: NormalizationSpec, flip: bool) -> np.ndarray:
    crop = _cut(frames, rect)
    x = resize_square(crop.astype(np.float64) / 255.0, size)
    x = norm.apply(x)
    if flip:
        x = x[:, :, ::-1, :]
    return np.ascontiguousarray(x.transpose(3, 0, 1, 2), dtype=np.float32)


def flip_clip(clip: ClipSample) -> ClipSample:
    data = np.ascontiguousarray(clip.data[..., ::-1])
    prov = clip.provenance
    if prov is not None:
        prov = replace(prov, flip=not prov.flip)
    return ClipSample(data, prov)


def _position_rect(base, side: int, position: str) -> tuple[int, int, int]:
    bx, by, bw, bh = base
    offsets = {
        "c": ((bw - side) // 2, (bh - side) // 2),
        "tl": (0, 0),
        "tr": (bw - side, 0),
        "bl": (0, bh - side),
        "br": (bw - side, bh - side),
    }
    dx, dy = offsets[position]
    return (bx + dx, by + dy, side)


def augment_train(
    frames: np.ndarray,
    policy: CropPolicy,
    norm: NormalizationSpec,
    seed,
    size: int = CLIP_SIZE,
    roi: Optional[BoundingBox] = None,
    source_id: str = "",
    start_frame: int = 0,
) -> ClipSample:
    """Training-time spatial augmentation of a ``(T, H, W, 3)`` frame window.

    Draws a position, then a scale, then a flip (p = 0.5) from ``seed``. In
    ``centre`` mode positions are taken relative to the whole frame; in
    ``od_crop`` mode relative to the ROI-centred square.
    """
    frames = np.asarray(frames)
    if frames.ndim != 4 or len(frames) == 0:
        raise ValueError("augment_train needs a nonempty (T, H, W, 3) window")
    rng = np.random.default_rng(seed)
    position = policy.positions[int(rng.integers(len(policy.positions)))]
    scale = policy.scales[int(rng.integers(len(policy.scales)))]
    flip = bool(rng.random() < 0.5)

    h, w = frames.shape[1:3]
    warning = None
    if policy.mode == "od_crop" and roi is not None:
        x0, y0, s = od_crop_rect(h, w, roi)
        base = (x0, y0, s, s)
    else:
        if policy.mode == "od_crop":
            warning = "od_crop requested without ROI; used full frame"
        base = (0, 0, w, h)
    side = max(1, _floor_half(scale * min(base[2], base[3])))
    rect = _position_rect(base, side, position)
    data = _to_tensor(frames, rect, size, norm, flip)
    prov = ClipProvenance(source_id, start_frame, rect, flip, scale, position, policy.mode, warning)
    return ClipSample(data, prov)


def build_inference_clip(
    seq: FrameSequence,
    start: int,
    roi: Optional[BoundingBox] = None,
    mode: str = "centre",
    norm: NormalizationSpec = None,
    clip_len: int = CLIP_LEN,
    size: int = CLIP_SIZE,
) -> ClipSample:
    """Deterministic inference clip: looped indices, one crop for all frames, no flip."""
    if norm is None:
        raise ValueError("normalization constants are required")
    if mode not in CROP_MODES:
        raise ValueError(f"crop mode must be one of {CROP_MODES}, got {mode!r}")
    idx = sample_clip(seq, start, clip_len)
    frames = seq.get_frames(idx)
    h, w = frames.shape[1:3]
    warning = None
    if mode == "od_crop" and roi is not None:
        rect = od_crop_rect(h, w, roi)
    else:
        if mode == "od_crop":
            warning = "od_crop requested without ROI; fell back to centre crop"
        rect = centre_crop_rect(h, w)
    data = _to_tensor(frames, rect, size, norm, flip=False)
    prov = ClipProvenance(seq.source_id, int(start), rect, False, 1.0, "c", mode, warning)
    return ClipSample(data, prov)


def middle_frame(start: int, clip_len: int, n_frames: int) -> int:
    """Index of the frame an OD-crop ROI is taken from for a clip starting at ``start``."""
    return int(sample_clip(n_frames, start, clip_len)[clip_len // 2])


class ClipBuilder(BaseEstimator, TransformerMixin):
    """Turn ``(sequence, start, roi)`` requests into a stacked clip array.

    Stateless apart from its parameters; ``fit`` only validates them.
    """

    def __init__(self, mean=(0.5, 0.5, 0.5), var=(1.0, 1.0, 1.0), mode="centre", clip_len=CLIP_LEN, size=CLIP_SIZE):
        self.mean = mean
        self.var = var
        self.mode = mode
        self.clip_len = clip_len
        self.size = size

    def fit(self, X=None, y=None):
        self.norm_ = NormalizationSpec(self.mean, self.var)
        if self.mode not in CROP_MODES:
            raise ValueError(f"mode must be one of {CROP_MODES}")
        return self

    def transform(self, X: Sequence) -> np.ndarray:
        norm = NormalizationSpec(self.mean, self.var)
        clips = [
            build_inference_clip(seq, start, roi, self.mode, norm, self.clip_len, self.size).data
            for seq, start, roi in X
        ]
        return np.stack(clips) if clips else np.zeros((0, 3, self.clip_len, self.size, self.size), np.float32)
