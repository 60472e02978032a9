"""Deterministic synthetic corpus: an ellipse "animal" in a textured cage.

The agent walks smoothly except during scheduled events, where it holds its
position and shakes with zero-mean sinusoidal jitter. Jitter events are the
positive ("seizure") class. Frames render on demand from the seed, so long
recordings never have to exist on disk.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .events import EventInterval
from .frames import FrameSequence
from .geometry import BoundingBox, Detection

JITTER = "jitter"
SEIZURE = "seizure"


@dataclass(frozen=True)
class ScheduledEvent:
    start: float
    duration: float
    regime: str = JITTER

    @property
    def end(self) -> float:
        return self.start + self.duration


@dataclass
class CorpusSpec:
    width: int = 64
    height: int = 48
    fps: float = 10.0
    duration: float = 60.0
    n_recordings: int = 1
    events: list = field(default_factory=list)
    recording_events: Optional[list] = None
    recording_durations: Optional[list] = None
    start_times: Optional[list] = None
    jitter_amplitude: float = 4.0
    jitter_frequency: float = 3.0
    locomotion_speed: float = 8.0
    agent_size: tuple = (12.0, 8.0)
    x_range: tuple = (0.0, 1.0)
    y_range: tuple = (0.0, 1.0)
    illumination_drift: float = 0.05
    subjects: Optional[list] = None
    seed: int = 0
    write_frames: bool = True

    def __post_init__(self):
        self.events = [e if isinstance(e, ScheduledEvent) else ScheduledEvent(**e) for e in self.events]
        if self.recording_events is not None:
            self.recording_events = [
                [e if isinstance(e, ScheduledEvent) else ScheduledEvent(**e) for e in evs]
                for evs in self.recording_events
            ]
        self.agent_size = tuple(float(v) for v in self.agent_size)
        self.x_range = tuple(float(v) for v in self.x_range)
        self.y_range = tuple(float(v) for v in self.y_range)
        self.validate()

    def validate(self) -> None:
        if self.width < 8 or self.height < 8 or self.fps <= 0 or self.n_recordings < 0:
            raise ValueError("invalid resolution, fps or recording count")
        if self.jitter_amplitude <= 0 or self.jitter_frequency <= 0 or self.locomotion_speed <= 0:
            raise ValueError("jitter amplitude/frequency and locomotion speed must be positive")
        for name in ("recording_events", "recording_durations", "start_times", "subjects"):
            v = getattr(self, name)
            if v is not None and len(v) != self.n_recordings:
                raise ValueError(f"{name} needs one entry per recording")
        for i in range(self.n_recordings):
            evs = sorted(self.events_for(i), key=lambda e: e.start)
            dur = self.duration_for(i)
            for e in evs:
                if e.regime != JITTER:
                    raise ValueError(f"unknown regime {e.regime!r}")
                if e.start < 0 or e.duration <= 0 or e.end > dur + 1e-9:
                    raise ValueError(f"event {e} outside recording {i} of {dur}s")
            for a, b in zip(evs, evs[1:]):
                if b.start < a.end:
                    raise ValueError(f"overlapping events in recording {i}")
        aw, ah = self.agent_size
        if aw + 2 * self.jitter_amplitude >= self.width or ah + 2 * self.jitter_amplitude >= self.height:
            raise ValueError("agent plus jitter does not fit in the frame")

    def events_for(self, i: int) -> list:
        return list(self.recording_events[i]) if self.recording_events is not None else list(self.events)

    def duration_for(self, i: int) -> float:
        return float(self.recording_durations[i]) if self.recording_durations is not None else float(self.duration)

    def start_time_for(self, i: int) -> float:
        return float(self.start_times[i]) if self.start_times is not None else 0.0

    def subject_for(self, i: int) -> str:
        return str(self.subjects[i]) if self.subjects is not None else f"subject_{i:04d}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["agent_size"] = list(self.agent_size)
        d["x_range"] = list(self.x_range)
        d["y_range"] = list(self.y_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        known = set(cls.__dataclass_fields__)
        d = {k: v for k, v in d.items() if not k.startswith("_")}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown corpus spec keys: {sorted(unknown)}")
        return cls(**d)


def minute_corpus_spec(n_seizure: int, n_non_seizure: int, seed: int = 0, **kwargs) -> CorpusSpec:
    """One-minute recordings, ``n_seizure`` of which are a full-minute jitter event.

    Seizure recordings are spread evenly through the index range.
    """
    n = n_seizure + n_non_seizure
    duration = float(kwargs.pop("duration", 60.0))
    positive = set()
    if n_seizure:
        positive = {int(k * n / n_seizure) for k in range(n_seizure)}
    schedule = [[ScheduledEvent(0.0, duration)] if i in positive else [] for i in range(n)]
    return CorpusSpec(n_recordings=n, duration=duration, recording_events=schedule, seed=seed, **kwargs)


def _smooth_noise(rng, h, w, cell=8):
    gh, gw = h // cell + 2, w // cell + 2
    grid = rng.random((gh, gw))
    ys = np.linspace(0, gh - 1.001, h)
    xs = np.linspace(0, gw - 1.001, w)
    y0, x0 = ys.astype(int), xs.astype(int)
    fy, fx = ys - y0, xs - x0
    a = grid[y0][:, x0] * (1 - fx) + grid[y0][:, x0 + 1] * fx
    b = grid[y0 + 1][:, x0] * (1 - fx) + grid[y0 + 1][:, x0 + 1] * fx
    return a * (1 - fy)[:, None] + b * fy[:, None]


class SyntheticRecording(FrameSequence):
    """One recording of a corpus, rendered lazily and deterministically."""

    BODY = np.array([45.0, 40.0, 38.0])

    def __init__(self, spec: CorpusSpec, index: int):
        if not 0 <= index < spec.n_recordings:
            raise IndexError(f"recording {index} outside corpus of {spec.n_recordings}")
        self.spec = spec
        self.index = index
        self.fps = float(spec.fps)
        self.width, self.height = int(spec.width), int(spec.height)
        self.source_id = f"rec_{index:04d}"
        self.n_frames = int(round(spec.duration_for(index) * self.fps))
        rng = np.random.default_rng([int(spec.seed), int(index)])
        self._background = self._make_background(rng)
        self._illum_phase = rng.uniform(0, 2 * math.pi)
        self.events = sorted(spec.events_for(index), key=lambda e: e.start)
        self.centers, self.jitter_mask = self._trajectory(rng)

    def __len__(self):
        return self.n_frames

    # -- generation ------------------------------------------------------
    def _make_background(self, rng):
        h, w = self.height, self.width
        tex = 0.75 * _smooth_noise(rng, h, w, 8) + 0.25 * rng.random((h, w))
        base = np.array([170.0, 160.0, 140.0])
        bg = base[None, None, :] * (0.85 + 0.3 * tex[..., None])
        # cage bars
        bars = (np.arange(w) % 16) < 2
        bg[:, bars, :] *= 0.7
        bg[h - 4 :, :, :] *= 0.8
        return bg

    def frame_spans(self):
        """``(start_frame, end_frame)`` of each event, end exclusive."""
        return [(int(round(e.start * self.fps)), int(round(e.end * self.fps))) for e in self.events]

    def _bounds(self):
        aw, ah = self.spec.agent_size
        m = self.spec.jitter_amplitude + 1.0
        lo_x = max(aw / 2 + m, self.spec.x_range[0] * self.width)
        hi_x = min(self.width - aw / 2 - m, self.spec.x_range[1] * self.width)
        lo_y = max(ah / 2 + m, self.spec.y_range[0] * self.height)
        hi_y = min(self.height - ah / 2 - m, self.spec.y_range[1] * self.height)
        if hi_x < lo_x or hi_y < lo_y:
            raise ValueError("allowed agent region is empty")
        return lo_x, hi_x, lo_y, hi_y

    def _trajectory(self, rng):
        n = self.n_frames
        dt = 1.0 / self.fps
        lo_x, hi_x, lo_y, hi_y = self._bounds()
        jitter = np.zeros(n, dtype=bool)
        for s, e in self.frame_spans():
            jitter[s:e] = True
        steps = rng.normal(0.0, 1.2 * math.sqrt(dt), n)
        speed = self.spec.locomotion_speed * (0.6 + 0.8 * rng.random(n))
        x, y = rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y)
        heading = rng.uniform(0, 2 * math.pi)
        base = np.empty((n, 2))
        dheading = steps.tolist()
        stride = (speed * dt).tolist()
        moving = (~jitter).tolist()
        for k in range(n):
            if moving[k]:
                heading += dheading[k]
                nx = x + stride[k] * math.cos(heading)
                ny = y + stride[k] * math.sin(heading)
                if not lo_x <= nx <= hi_x:
                    heading = math.pi - heading
                    nx = min(max(nx, lo_x), hi_x)
                if not lo_y <= ny <= hi_y:
                    heading = -heading
                    ny = min(max(ny, lo_y), hi_y)
                x, y = nx, ny
            base[k, 0] = x
            base[k, 1] = y
        centers = base.copy()
        amp, f = self.spec.jitter_amplitude, self.spec.jitter_frequency
        t = np.arange(n) * dt
        for s, e in self.frame_spans():
            ph = rng.uniform(0, 2 * math.pi, 2)
            tt = t[s:e]
            centers[s:e, 0] += amp * np.sin(2 * math.pi * f * tt + ph[0])
            centers[s:e, 1] += 0.6 * amp * np.sin(2 * math.pi * 1.3 * f * tt + ph[1])
        return centers, jitter

    # -- ground truth ----------------------------------------------------
    def box(self, i: int) -> BoundingBox:
        if not 0 <= i < self.n_frames:
            raise IndexError(f"frame {i} outside recording of {self.n_frames} frames")
        aw, ah = self.spec.agent_size
        cx, cy = self.centers[i]
        return BoundingBox(float(cx), float(cy), aw, ah)

    def event_intervals(self) -> list[EventInterval]:
        return [
            EventInterval(s / self.fps, e / self.fps, SEIZURE, 1.0, "truth", self.source_id)
            for s, e in self.frame_spans()
        ]

    def truth(self) -> dict:
        return {
            "source_id": self.source_id,
            "fps": self.fps,
            "n_frames": self.n_frames,
            "width": self.width,
            "height": self.height,
            "boxes": [[float(cx), float(cy), *self.spec.agent_size] for cx, cy in self.centers],
            "events": [
                {"start": e.start, "end": e.end, "label": e.label, "start_frame": s, "end_frame": f}
                for e, (s, f) in zip(self.event_intervals(), self.frame_spans())
            ],
        }

    def displacement(self) -> tuple[float, float]:
        """Mean inter-frame center displacement during (jitter, locomotion) frames."""
        d = np.linalg.norm(np.diff(self.centers, axis=0), axis=1)
        j = self.jitter_mask[1:] & self.jitter_mask[:-1]
        loc = ~self.jitter_mask[1:] & ~self.jitter_mask[:-1]
        return (float(d[j].mean()) if j.any() else float("nan"), float(d[loc].mean()) if loc.any() else float("nan"))

    # -- rendering -------------------------------------------------------
    def render(self, i: int) -> np.ndarray:
        t = i / self.fps
        gain = 1.0 + self.spec.illumination_drift * math.sin(2 * math.pi * t / 40.0 + self._illum_phase)
        img = self._background * gain
        aw, ah = self.spec.agent_size
        a, b = aw / 2.0, ah / 2.0
        cx, cy = self.centers[i]
        x0, x1 = max(int(cx - a) - 1, 0), min(int(cx + a) + 2, self.width)
        y0, y1 = max(int(cy - b) - 1, 0), min(int(cy + b) + 2, self.height)
        ys = np.arange(y0, y1)[:, None] + 0.5
        xs = np.arange(x0, x1)[None, :] + 0.5
        r = np.sqrt(((xs - cx) / a) ** 2 + ((ys - cy) / b) ** 2)
        alpha = np.clip((1.0 - r) * min(a, b) + 0.5, 0.0, 1.0)[..., None]
        patch = img[y0:y1, x0:x1]
        img[y0:y1, x0:x1] = patch * (1 - alpha) + self.BODY * alpha
        return np.clip(np.rint(img), 0, 255).astype(np.uint8)

    def _read(self, indices):
        out = np.empty((len(indices), self.height, self.width, 3), dtype=np.uint8)
        for k, i in enumerate(indices):
            out[k] = self.render(int(i))
        return out


class Corpus:
    """All recordings described by one :class:`CorpusSpec`."""

    def __init__(self, spec: CorpusSpec):
        self.spec = spec
        self._cache: dict[int, SyntheticRecording] = {}

    def __len__(self):
        return self.spec.n_recordings

    def __getitem__(self, i: int) -> SyntheticRecording:
        if i not in self._cache:
            self._cache[i] = SyntheticRecording(self.spec, i)
        return self._cache[i]

    def __iter__(self):
        return (self[i] for i in range(len(self)))


class OracleDetector:
    """Ground-truth ROI provider, optionally perturbed.

    Noise is drawn per frame from ``(seed, frame)`` so repeated calls agree.
    ``center_sigma`` is in pixels per axis; ``scale_sigma`` multiplies width
    and height by ``1 + N(0, scale_sigma)``.
    """

    def __init__(self, truth, center_sigma: float = 0.0, scale_sigma: float = 0.0, seed: int = 0):
        if isinstance(truth, SyntheticRecording):
            self._boxes = np.column_stack([truth.centers, np.tile(truth.spec.agent_size, (len(truth), 1))])
            self.frame_size = (truth.width, truth.height)
        else:
            self._boxes = np.asarray(truth["boxes"], dtype=np.float64).reshape(-1, 4)
            self.frame_size = (truth.get("width"), truth.get("height"))
        self.center_sigma = center_sigma
        self.scale_sigma = scale_sigma
        self.seed = seed

    def __len__(self):
        return len(self._boxes)

    def detect(self, frame_index: int, frame=None) -> Detection:
        if not 0 <= frame_index < len(self._boxes):
            raise IndexError(f"frame {frame_index} outside ground truth of {len(self._boxes)} frames")
        cx, cy, w, h = self._boxes[frame_index]
        if self.center_sigma > 0 or self.scale_sigma > 0:
            rng = np.random.default_rng([int(self.seed), int(frame_index)])
            dx, dy = rng.normal(0.0, self.center_sigma, 2) if self.center_sigma > 0 else (0.0, 0.0)
            sw, sh = rng.normal(0.0, self.scale_sigma, 2) if self.scale_sigma > 0 else (0.0, 0.0)
            cx, cy = cx + dx, cy + dy
            w, h = w * max(1 + sw, 0.05), h * max(1 + sh, 0.05)
            fw, fh = self.frame_size
            if fw is not None:
                cx = min(max(cx, 0.0), float(fw))
                cy = min(max(cy, 0.0), float(fh))
        return Detection(BoundingBox(float(cx), float(cy), float(w), float(h)), 1.0, 0)

    __call__ = detect


def oracle_detector(frame_index: int, truth, center_sigma=0.0, scale_sigma=0.0, seed=0) -> Detection:
    return OracleDetector(truth, center_sigma, scale_sigma, seed).detect(frame_index)


def corpus_norm(corpus: Corpus, samples_per_recording: int = 8) -> dict:
    """Per-channel mean and variance of [0, 1] intensities over a fixed frame subsample."""
    total = np.zeros(3)
    total_sq = np.zeros(3)
    count = 0
    for rec in corpus:
        idx = np.linspace(0, len(rec) - 1, min(samples_per_recording, len(rec))).astype(int)
        x = rec.get_frames(idx).reshape(-1, 3).astype(np.float64) / 255.0
        total += x.sum(axis=0)
        total_sq += (x * x).sum(axis=0)
        count += len(x)
    mean = total / count
    var = total_sq / count - mean**2
    return {"mean": [float(v) for v in mean], "var": [float(v) for v in var]}


def generate(spec: CorpusSpec, out_dir, jobs: int = 1, metadata: Optional[dict] = None) -> Path:
    """Write a corpus: PNG frames (optional), ``truth.json`` per recording, manifest and norms.

    ``metadata`` (e.g. tool version and config hash) is embedded in every
    file written: a ``_meta`` key in JSON, a header line in the manifest and
    a text chunk in each PNG.
    """
    from concurrent.futures import ThreadPoolExecutor

    from PIL import Image
    from PIL.PngImagePlugin import PngInfo

    meta = dict(metadata or {})
    pnginfo = None
    if meta:
        pnginfo = PngInfo()
        pnginfo.add_text("clipscan", json.dumps(meta, sort_keys=True))

    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"corpus output path {out} is not writable: {exc}") from exc
    spec_doc = spec.to_dict()
    if meta:
        spec_doc["_meta"] = meta
    (out / "corpus_spec.json").write_text(json.dumps(spec_doc, indent=1, sort_keys=True) + "\n")
    corpus = Corpus(spec)

    def write_one(i: int) -> dict:
        rec = corpus[i]
        rdir = out / rec.source_id
        rdir.mkdir(exist_ok=True)
        if spec.write_frames:
            for k in range(len(rec)):
                Image.fromarray(rec.render(k)).save(rdir / f"frame_{k:06d}.png", compress_level=1, pnginfo=pnginfo)
        truth = rec.truth()
        if not spec.write_frames:
            # boxes re-render from the spec; long recordings would make this file huge
            del truth["boxes"]
        if meta:
            truth["_meta"] = meta
        (rdir / "truth.json").write_text(json.dumps(truth) + "\n")
        intervals = [{"start": e.start, "end": e.end, "label": e.label} for e in rec.event_intervals()]
        return {
            "id": rec.source_id,
            "path": rec.source_id if spec.write_frames else "corpus_spec.json",
            "format": "png" if spec.write_frames else "synthetic",
            "synthetic_index": i,
            "fps": rec.fps,
            "n_frames": len(rec),
            "duration": len(rec) / rec.fps,
            "width": rec.width,
            "height": rec.height,
            "intervals": intervals,
            "label": SEIZURE if intervals else "non_seizure",
            "split": "none",
            "subject": spec.subject_for(i),
            "start_time": spec.start_time_for(i),
            "truth": f"{rec.source_id}/truth.json",
        }

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        records = list(pool.map(write_one, range(len(corpus))))
    with open(out / "manifest.jsonl", "w", encoding="utf-8") as fh:
        if meta:
            fh.write(json.dumps({"_meta": meta}, sort_keys=True) + "\n")
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    norm = corpus_norm(corpus)
    if meta:
        norm["_meta"] = meta
    (out / "norm.json").write_text(json.dumps(norm, indent=1, sort_keys=True) + "\n")
    return out


def spec_from_doc(doc: dict) -> CorpusSpec:
    """A :class:`CorpusSpec` from a config mapping.

    ``{"minute_corpus": {"n_seizure": a, "n_non_seizure": b, ...}}`` and
    ``{"phase_corpus": {"phase_counts": [...], ...}}`` are shorthands for
    :func:`minute_corpus_spec` and :func:`phase_corpus_spec`.
    """
    doc = {k: v for k, v in doc.items() if not k.startswith("_")}
    shorthand = [k for k in ("minute_corpus", "phase_corpus") if k in doc]
    if not shorthand:
        return CorpusSpec.from_dict(doc)
    if len(shorthand) > 1 or set(doc) - {shorthand[0], "seed"}:
        raise ValueError(f"{shorthand[0]} combines only with a top-level seed")
    kw = dict(doc[shorthand[0]])
    seed = kw.pop("seed", doc.get("seed", 0))
    fields = set(CorpusSpec.__dataclass_fields__)
    try:
        if shorthand[0] == "minute_corpus":
            args = (kw.pop("n_seizure"), kw.pop("n_non_seizure"))
            build = minute_corpus_spec
        else:
            args = (kw.pop("phase_counts"),)
            build = phase_corpus_spec
            fields |= {"days_per_phase", "window_len", "gap_windows", "day_offset"}
    except KeyError as exc:
        raise ValueError(f"{shorthand[0]} lacks {exc}") from None
    unknown = set(kw) - fields
    if unknown:
        raise ValueError(f"unknown corpus spec keys: {sorted(unknown)}")
    return build(*args, seed=seed, **kw)


def phase_corpus_spec(
    phase_counts: Sequence[int],
    days_per_phase: int = 7,
    window_len: float = 60.0,
    gap_windows: int = 2,
    day_offset: float = 3600.0,
    seed: int = 0,
    **kwargs,
) -> CorpusSpec:
    """One recording per day with a known number of window-aligned events.

    Phase ``p`` spreads ``phase_counts[p]`` events as evenly as possible over
    its ``days_per_phase`` days. Each event lasts one window and is separated
    from the next by ``gap_windows`` event-free windows, so window-level
    segmentation with ``gap_merge < gap_windows`` recovers the counts exactly.
    Recording ``d`` starts ``day_offset`` seconds into day ``d``.
    """
    if gap_windows < 1:
        raise ValueError("events need at least one clear window between them")
    per_day = []
    for count in phase_counts:
        base, extra = divmod(int(count), days_per_phase)
        per_day.extend(base + (1 if d < extra else 0) for d in range(days_per_phase))
    schedules, durations, starts = [], [], []
    for d, n in enumerate(per_day):
        # gap, event, gap, event, ..., gap
        n_windows = n * (gap_windows + 1) + gap_windows
        schedules.append([ScheduledEvent((gap_windows + k * (gap_windows + 1)) * window_len, window_len) for k in range(n)])
        durations.append(n_windows * window_len)
        starts.append(d * 86400.0 + day_offset)
    return CorpusSpec(
        n_recordings=len(per_day), recording_events=schedules, recording_durations=durations, start_times=starts,
        duration=max(durations), seed=seed, **kwargs,
    )
