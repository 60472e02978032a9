"""Long-recording scanning: windowing, per-window decisions, event segmentation, reports."""

from __future__ import annotations

import csv
import io
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .ensemble import SEIZURE_CLASS, ClipDecision, DecisionPolicy, decide_clip, viewpoints_for_window
from .events import EventInterval
from .frames import FrameSequence
from .model.protocol import BackendError
from .sampler import NormalizationSpec, build_inference_clip, middle_frame

log = logging.getLogger(__name__)

DAY = 86400.0
WEEK = 7 * DAY


@dataclass(frozen=True)
class ScanConfig:
    window_len: float = 60.0
    stride: float = 60.0
    viewpoints: int = 10
    gap_merge: int = 1
    min_event: int = 1
    policy: DecisionPolicy = DecisionPolicy()
    crop: str = "centre"
    clip_len: int = 64
    size: int = 112

    def __post_init__(self):
        if not self.window_len > 0 or not self.stride > 0:
            raise ValueError("window_len and stride must be positive")
        if self.stride > 2 * self.window_len:
            raise ValueError("stride may be at most twice the window length")
        if self.viewpoints < 1 or self.gap_merge < 0 or self.min_event < 0:
            raise ValueError("viewpoints must be >= 1; gap_merge and min_event >= 0")
        if self.crop not in ("centre", "od_crop"):
            raise ValueError(f"unknown crop mode {self.crop!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["policy"] = asdict(self.policy)
        return d


@dataclass(frozen=True)
class Window:
    index: int
    start_frame: int
    end_frame: int  # exclusive
    start_s: float
    end_s: float


def tile_windows(n_frames: int, fps: float, window_len: float, stride: float) -> list[Window]:
    """Windows starting every ``stride`` seconds that fit entirely inside the recording."""
    wf = int(round(window_len * fps))
    sf = int(round(stride * fps))
    if wf < 1 or sf < 1:
        raise ValueError("window and stride must each span at least one frame")
    out = []
    k = 0
    while k * sf + wf <= n_frames:
        s = k * sf
        out.append(Window(k, s, s + wf, s / fps, (s + wf) / fps))
        k += 1
    return out


@dataclass
class WindowResult:
    window: Window
    decision: Optional[ClipDecision]
    error: Optional[str] = None

    @property
    def failed(self) -> bool:
        return self.decision is None

    @property
    def positive(self) -> bool:
        return self.decision is not None and self.decision.is_seizure


@dataclass
class ScanResult:
    source_id: str
    fps: float
    n_frames: int
    results: list
    config: ScanConfig
    time_offset: float = 0.0
    frames_read: int = 0
    stage_seconds: dict = field(default_factory=dict)
    wall_seconds: float = 0.0

    @property
    def n_failed(self) -> int:
        return sum(r.failed for r in self.results)

    @property
    def duration(self) -> float:
        return self.n_frames / self.fps if self.fps else 0.0

    def decisions(self) -> list:
        return [r.decision for r in self.results]


def _window_scores(seq, window: Window, ensemble, cfg: ScanConfig, norm, detector):
    t0 = time.perf_counter()
    starts = viewpoints_for_window(window.start_frame, window.end_frame, cfg.viewpoints, cfg.clip_len)
    clips = []
    for s in starts:
        roi = None
        if cfg.crop == "od_crop" and detector is not None:
            roi = detector(middle_frame(int(s), cfg.clip_len, len(seq))).box
        clips.append(build_inference_clip(seq, int(s), roi, cfg.crop, norm, cfg.clip_len, cfg.size).data)
    batch = np.stack(clips)
    t1 = time.perf_counter()
    try:
        probs = np.asarray(ensemble.predict_proba(batch), dtype=np.float64)[:, SEIZURE_CLASS]
        result = WindowResult(window, decide_clip(probs, cfg.policy))
    except (BackendError, OSError) as exc:
        log.warning("window %d of %s failed: %s", window.index, seq.source_id, exc)
        result = WindowResult(window, None, f"{type(exc).__name__}: {exc}")
    t2 = time.perf_counter()
    return result, len(starts) * cfg.clip_len, t1 - t0, t2 - t1


def scan(
    seq: FrameSequence,
    ensemble,
    cfg: ScanConfig,
    norm: NormalizationSpec,
    detector: Optional[Callable] = None,
    jobs: int = 1,
    time_offset: float = 0.0,
) -> ScanResult:
    """Classify every window of ``seq`` with ``ensemble`` (anything with ``predict_proba``).

    Windows are processed by up to ``jobs`` threads in bounded chunks and
    reduced in window order, so the result does not depend on ``jobs``.
    """
    if len(seq) == 0:
        raise ValueError("cannot scan an empty recording")
    windows = tile_windows(len(seq), seq.fps, cfg.window_len, cfg.stride)
    t_start = time.perf_counter()
    results, frames_read, t_clip, t_infer = [], 0, 0.0, 0.0

    def work(w):
        return _window_scores(seq, w, ensemble, cfg, norm, detector)

    if jobs <= 1:
        outputs = map(work, windows)
        for res, nf, a, b in outputs:
            results.append(res)
            frames_read += nf
            t_clip += a
            t_infer += b
    else:
        chunk = 4 * jobs
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            for lo in range(0, len(windows), chunk):
                for res, nf, a, b in pool.map(work, windows[lo : lo + chunk]):
                    results.append(res)
                    frames_read += nf
                    t_clip += a
                    t_infer += b
    wall = time.perf_counter() - t_start
    return ScanResult(
        seq.source_id, float(seq.fps), len(seq), results, cfg, time_offset, frames_read,
        {"clip_build": t_clip, "inference": t_infer}, wall,
    )


def segment_events(results: Sequence[WindowResult], cfg: ScanConfig, source_id: str = "", time_offset: float = 0.0) -> list[EventInterval]:
    """Merge positive windows into events.

    Runs of positives separated by at most ``gap_merge`` non-positive windows
    are joined; events with fewer than ``min_event`` positive windows are
    dropped. Failed windows count as non-positive.
    """
    groups: list[list[WindowResult]] = []
    last_index = None
    for r in results:
        if not r.positive:
            continue
        if last_index is not None and r.window.index - last_index - 1 <= cfg.gap_merge:
            groups[-1].append(r)
        else:
            groups.append([r])
        last_index = r.window.index
    events = []
    for g in groups:
        if len(g) < cfg.min_event:
            continue
        conf = max(r.decision.seizure_prob for r in g)
        events.append(
            EventInterval(g[0].window.start_s + time_offset, g[-1].window.end_s + time_offset, "seizure",
                          min(max(conf, 0.0), 1.0), "model", source_id)
        )
    return events


def scan_events(result: ScanResult) -> list[EventInterval]:
    return segment_events(result.results, result.config, result.source_id, result.time_offset)


# -- reports -------------------------------------------------------------------------


@dataclass(frozen=True)
class Phase:
    name: str
    start: float  # seconds, inclusive
    end: float  # seconds, exclusive


@dataclass
class PhaseReport:
    phases: list
    unassigned: int
    per_day: dict
    per_week: dict
    total: int
    processing_seconds: float = 0.0

    def counts(self) -> tuple:
        return tuple(p["count"] for p in self.phases)

    def to_dict(self) -> dict:
        return asdict(self)


def phase_report(events: Sequence[EventInterval], phases: Sequence[Phase], processing_seconds: float = 0.0) -> PhaseReport:
    """Count events per phase by start time (start-inclusive, end-exclusive)."""
    phases = list(phases)
    for a, b in zip(phases, phases[1:]):
        if b.start < a.end:
            raise ValueError(f"phases {a.name!r} and {b.name!r} overlap or are out of order")
    for p in phases:
        if p.end < p.start:
            raise ValueError(f"phase {p.name!r} ends before it starts")
    counts = [0] * len(phases)
    unassigned = 0
    per_day: dict[int, int] = {}
    per_week: dict[int, int] = {}
    for e in events:
        for k, p in enumerate(phases):
            if p.start <= e.start < p.end:
                counts[k] += 1
                break
        else:
            unassigned += 1
        d = int(e.start // DAY)
        per_day[d] = per_day.get(d, 0) + 1
        w = int(e.start // WEEK)
        per_week[w] = per_week.get(w, 0) + 1
    rows = [{"name": p.name, "start": p.start, "end": p.end, "count": c} for p, c in zip(phases, counts)]
    return PhaseReport(rows, unassigned, dict(sorted(per_day.items())), dict(sorted(per_week.items())),
                       len(events), processing_seconds)


@dataclass
class ThroughputReport:
    processing_seconds: float
    video_seconds: float
    frames: int
    frames_read: int
    frames_per_second: float
    realtime_factor: float
    stage_seconds: dict
    baseline_seconds: Optional[float] = None
    speedup: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


def speedup(baseline_seconds: float, measured_seconds: float) -> float:
    if measured_seconds <= 0:
        raise ValueError("measured time must be positive")
    return baseline_seconds / measured_seconds


def throughput_report(runs, baseline_seconds: Optional[float] = None, measured_seconds: Optional[float] = None) -> ThroughputReport:
    """Wall-clock accounting for one or more scans.

    ``measured_seconds`` overrides the scans' own wall time, which lets the
    speedup arithmetic be checked against externally reported timings.
    """
    if isinstance(runs, ScanResult):
        runs = [runs]
    runs = list(runs)
    wall = sum(r.wall_seconds for r in runs) if measured_seconds is None else float(measured_seconds)
    frames = sum(r.n_frames for r in runs)
    video = sum(r.duration for r in runs)
    stages: dict[str, float] = {}
    for r in runs:
        for k, v in r.stage_seconds.items():
            stages[k] = stages.get(k, 0.0) + v
    fps = frames / wall if wall > 0 and frames else 0.0
    rt = video / wall if wall > 0 and video else 0.0
    sp = speedup(baseline_seconds, wall) if baseline_seconds is not None and wall > 0 else None
    return ThroughputReport(wall, video, int(frames), sum(r.frames_read for r in runs), fps, rt, stages, baseline_seconds, sp)


TRACE_HEADER = ("source_id", "window", "start_s", "end_s", "seizure_prob", "label", "status")


def trace_csv(runs) -> str:
    """Per-window probability trace, one row per window."""
    if isinstance(runs, ScanResult):
        runs = [runs]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_HEADER)
    for run in runs:
        for r in run.results:
            win = r.window
            row = [run.source_id, win.index, repr(win.start_s + run.time_offset), repr(win.end_s + run.time_offset)]
            if r.failed:
                row += ["", "", "failed"]
            else:
                row += [repr(float(r.decision.seizure_prob)), r.decision.label, "ok"]
            w.writerow(row)
    return buf.getvalue()
