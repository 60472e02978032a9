"""Random-access frame sources shared by the sampler, ingest and synthetic corpus."""

from __future__ import annotations

import numpy as np


class FrameSequence:
    """Ordered RGB frames (uint8, H x W x 3) with a frame rate.

    Subclasses implement :meth:`_read`, which receives sorted unique indices.
    """

    source_id: str = ""
    fps: float = 1.0
    height: int = 0
    width: int = 0

    def __len__(self) -> int:
        raise NotImplementedError

    @property
    def duration(self) -> float:
        return len(self) / self.fps

    def _read(self, indices: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def get_frames(self, indices) -> np.ndarray:
        """Return frames at ``indices`` stacked as ``(k, H, W, 3)`` uint8."""
        idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        n = len(self)
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise IndexError(f"frame index out of range for {n}-frame sequence {self.source_id!r}")
        uniq, inverse = np.unique(idx, return_inverse=True)
        return self._read(uniq)[inverse]

    def __getitem__(self, i: int) -> np.ndarray:
        return self.get_frames([i])[0]


class ArraySequence(FrameSequence):
    """Frames held in memory as a ``(n, H, W, 3)`` uint8 array."""

    def __init__(self, frames, fps: float, source_id: str = "array"):
        frames = np.asarray(frames)
        if frames.ndim != 4 or frames.shape[-1] != 3:
            raise ValueError(f"expected (n, H, W, 3) frames, got shape {frames.shape}")
        if fps <= 0:
            raise ValueError("fps must be positive")
        self.frames = frames.astype(np.uint8, copy=False)
        self.fps = float(fps)
        self.source_id = source_id
        self.height, self.width = frames.shape[1:3]

    def __len__(self):
        return len(self.frames)

    def _read(self, indices):
        return self.frames[indices]


class SliceSequence(FrameSequence):
    """A contiguous view ``[start, stop)`` of another sequence."""

    def __init__(self, base: FrameSequence, start: int, stop: int, source_id: str | None = None):
        if not 0 <= start < stop <= len(base):
            raise ValueError(f"invalid slice [{start}, {stop}) of {len(base)} frames")
        self.base = base
        self.start = start
        self.stop = stop
        self.fps = base.fps
        self.height, self.width = base.height, base.width
        self.source_id = source_id or f"{base.source_id}[{start}:{stop}]"

    def __len__(self):
        return self.stop - self.start

    def _read(self, indices):
        return self.base.get_frames(indices + self.start)
