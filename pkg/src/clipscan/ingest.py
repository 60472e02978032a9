"""Recording ingestion and dataset manifests.

A manifest is a JSON-lines file, one recording per line::

    {"id": ..., "path": ..., "format": "png" | "raw" | "synthetic", "fps": ...,
     "duration": ..., "intervals": [{"start": s, "end": e, "label": ...}],
     "split": "train" | "val" | "test" | "none", "subject": ...}

Relative paths resolve against the manifest's directory.
"""

from __future__ import annotations

import json
import shlex
import subprocess
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .frames import FrameSequence

SPLITS = ("train", "val", "test", "none")
DEFAULT_PROPORTIONS = (0.01, 0.05, 0.10, 0.20, 0.50, 0.80)


class IngestError(Exception):
    """Base class for recording and manifest problems."""


class MissingSidecarError(IngestError):
    pass


class FrameDimensionError(IngestError):
    pass


class TruncatedStreamError(IngestError):
    def __init__(self, frame_index: int, message: str):
        super().__init__(message)
        self.frame_index = frame_index


class ManifestError(IngestError):
    pass


# -- frame sources ----------------------------------------------------------------


class PngDirectory(FrameSequence):
    """``frame_*.png`` files in filename order, read on demand."""

    def __init__(self, path, fps: float, source_id: str = "", cache_size: int = 256):
        from PIL import Image

        self._Image = Image
        self.path = Path(path)
        if not self.path.is_dir():
            raise IngestError(f"frame directory {self.path} does not exist")
        self.files = sorted(p for p in self.path.iterdir() if p.suffix.lower() == ".png")
        if not self.files:
            raise IngestError(f"no PNG frames in {self.path}")
        self.fps = float(fps)
        self.source_id = source_id or self.path.name
        self._shape = None
        first = self._load(0)
        self.height, self.width = self._shape = first.shape[:2]
        self._cache: OrderedDict[int, np.ndarray] = OrderedDict({0: first})
        self._cache_size = cache_size

    def __len__(self):
        return len(self.files)

    def _load(self, i: int) -> np.ndarray:
        with self._Image.open(self.files[i]) as im:
            arr = np.asarray(im.convert("RGB"))
        shape = getattr(self, "_shape", None)
        if shape is not None and arr.shape[:2] != shape:
            raise FrameDimensionError(f"{self.files[i].name} is {arr.shape[1]}x{arr.shape[0]}, expected {self.width}x{self.height}")
        return arr

    def _read(self, indices):
        out = np.empty((len(indices), self.height, self.width, 3), dtype=np.uint8)
        for k, i in enumerate(indices):
            i = int(i)
            if i in self._cache:
                self._cache.move_to_end(i)
            else:
                self._cache[i] = self._load(i)
                if len(self._cache) > self._cache_size:
                    self._cache.popitem(last=False)
            out[k] = self._cache[i]
        return out


def read_sidecar(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise MissingSidecarError(f"missing sidecar {path}")
    meta = json.loads(path.read_text(encoding="utf-8"))
    for key in ("width", "height", "fps", "frame_count"):
        if key not in meta:
            raise MissingSidecarError(f"sidecar {path} lacks {key!r}")
    return meta


class RawStreamRecording(FrameSequence):
    """Raw RGB24 frames from a file, optionally piped through a decoder command.

    ``decoder`` is a command template with an ``{input}`` placeholder whose
    process writes raw frames to stdout. Frames stream forward through a
    bounded buffer; reading behind the buffer restarts the stream.
    """

    def __init__(self, path, sidecar=None, decoder: Optional[str] = None, source_id: str = "", buffer_frames: int = 2048):
        self.path = Path(path)
        sidecar = Path(sidecar) if sidecar is not None else self.path.parent / "meta.json"
        meta = read_sidecar(sidecar)
        self.width, self.height = int(meta["width"]), int(meta["height"])
        self.fps = float(meta["fps"])
        self.frame_count = int(meta["frame_count"])
        self.decoder = decoder
        self.source_id = source_id or self.path.stem
        self.buffer_frames = buffer_frames
        self._frame_bytes = self.width * self.height * 3
        self._stream = None
        self._proc = None
        self._next = 0
        self._buffer: OrderedDict[int, np.ndarray] = OrderedDict()

    def __len__(self):
        return self.frame_count

    def _open(self):
        self._close()
        if self.decoder:
            argv = [a.replace("{input}", str(self.path)) for a in shlex.split(self.decoder)]
            self._proc = subprocess.Popen(argv, stdout=subprocess.PIPE)
            self._stream = self._proc.stdout
        else:
            self._stream = open(self.path, "rb")
        self._next = 0
        self._buffer.clear()

    def _close(self):
        if self._stream is not None:
            self._stream.close()
            self._stream = None
        if self._proc is not None:
            self._proc.wait()
            self._proc = None

    def _read_one(self) -> np.ndarray:
        i = self._next
        chunks, got = [], 0
        while got < self._frame_bytes:
            chunk = self._stream.read(self._frame_bytes - got)
            if not chunk:
                break
            chunks.append(chunk)
            got += len(chunk)
        if got == 0:
            raise TruncatedStreamError(i, f"stream {self.source_id!r} ended before frame {i} of {self.frame_count}")
        if got < self._frame_bytes:
            raise TruncatedStreamError(i, f"stream {self.source_id!r} truncated inside frame {i} ({got} of {self._frame_bytes} bytes)")
        self._next += 1
        return np.frombuffer(b"".join(chunks), dtype=np.uint8).reshape(self.height, self.width, 3)

    def iter_frames(self) -> Iterator[np.ndarray]:
        """Yield every frame in order, checking the count against the sidecar."""
        self._open()
        try:
            for _ in range(self.frame_count):
                yield self._read_one()
            if self._stream.read(1):
                raise FrameDimensionError(f"stream {self.source_id!r} has more than {self.frame_count} frames")
        finally:
            self._close()

    def _read(self, indices):
        if self._stream is None or (len(indices) and int(indices[0]) < self._next and int(indices[0]) not in self._buffer):
            self._open()
        out = np.empty((len(indices), self.height, self.width, 3), dtype=np.uint8)
        for k, i in enumerate(indices):
            i = int(i)
            if i not in self._buffer:
                if i < self._next:
                    self._open()
                while self._next <= i:
                    j = self._next
                    self._buffer[j] = self._read_one()
                    if len(self._buffer) > self.buffer_frames:
                        self._buffer.popitem(last=False)
            out[k] = self._buffer[i]
        return out

    def __del__(self):
        try:
            self._close()
        except Exception:
            pass


# -- manifests ---------------------------------------------------------------------


REQUIRED = ("id", "path", "fps", "duration")


def validate_record(rec: dict, base_dir: Optional[Path] = None, check_paths: bool = True) -> dict:
    for key in REQUIRED:
        if key not in rec:
            raise ManifestError(f"manifest record lacks {key!r}: {rec}")
    if rec.get("split", "none") not in SPLITS:
        raise ManifestError(f"record {rec['id']}: unknown split {rec['split']!r}")
    dur = float(rec["duration"])
    for iv in rec.get("intervals", []):
        if not 0 <= iv["start"] <= iv["end"] <= dur + 1e-9:
            raise ManifestError(f"record {rec['id']}: interval {iv} outside duration {dur}")
    if check_paths and base_dir is not None and not (base_dir / rec["path"]).exists():
        raise ManifestError(f"record {rec['id']}: path {rec['path']} does not exist")
    return rec


def record_label(rec: dict) -> str:
    if "label" in rec:
        return rec["label"]
    return "seizure" if any(iv.get("label", "seizure") == "seizure" for iv in rec.get("intervals", [])) else "non_seizure"


@dataclass
class Manifest:
    """Records plus the directory their relative paths resolve against.

    An optional leading ``{"_meta": {...}}`` line carries provenance
    (tool version, config hash) and is kept in ``meta``.
    """

    records: list
    base_dir: Path = field(default_factory=Path)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.base_dir = Path(self.base_dir)
        ids = [r["id"] for r in self.records]
        if len(set(ids)) != len(ids):
            raise ManifestError("manifest ids must be unique")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @classmethod
    def load(cls, path, check_paths: bool = True) -> "Manifest":
        path = Path(path)
        if not path.is_file():
            raise ManifestError(f"manifest {path} does not exist")
        records, meta = [], {}
        for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if line.strip():
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ManifestError(f"{path}:{n}: {exc}") from None
                if not isinstance(obj, dict):
                    raise ManifestError(f"{path}:{n}: expected a JSON object")
                if "_meta" in obj and len(obj) == 1:
                    meta = obj["_meta"]
                else:
                    records.append(obj)
        m = cls(records, path.parent, meta)
        for r in m.records:
            validate_record(r, m.base_dir, check_paths)
        return m

    def _lines(self, records) -> str:
        head = json.dumps({"_meta": self.meta}, sort_keys=True) + "\n" if self.meta else ""
        return head + "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)

    def dumps(self) -> str:
        return self._lines(self.records)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        out = []
        for r in self.records:
            r = dict(r)
            p = Path(r["path"])
            if not p.is_absolute():
                # keep paths valid relative to the new location
                r["path"] = _relpath(self.base_dir / p, path.parent)
            for key in ("truth", "meta"):
                if key in r and not Path(r[key]).is_absolute():
                    r[key] = _relpath(self.base_dir / r[key], path.parent)
            out.append(r)
        path.write_text(self._lines(out), encoding="utf-8")
        return path

    def subset(self, split: str) -> "Manifest":
        return Manifest([r for r in self.records if r.get("split") == split], self.base_dir, dict(self.meta))

    def resolve(self, rec: dict, key: str = "path") -> Path:
        return self.base_dir / rec[key]


def _relpath(target: Path, start: Path) -> str:
    import os

    return os.path.relpath(Path(target).resolve(), Path(start).resolve())


def load_recording(rec: dict, base_dir=".", decoder: Optional[str] = None) -> FrameSequence:
    """Open the recording a manifest record points at."""
    base_dir = Path(base_dir)
    fmt = rec.get("format", "png")
    path = base_dir / rec["path"]
    if fmt == "png":
        seq = PngDirectory(path, rec["fps"], rec["id"])
    elif fmt == "raw":
        sidecar = base_dir / rec["meta"] if "meta" in rec else None
        seq = RawStreamRecording(path, sidecar, rec.get("decoder", decoder), rec["id"])
    elif fmt == "synthetic":
        from .synthdata import CorpusSpec, SyntheticRecording

        spec = CorpusSpec.from_dict(json.loads(path.read_text(encoding="utf-8")))
        seq = SyntheticRecording(spec, int(rec["synthetic_index"]))
        seq.source_id = rec["id"]
    else:
        raise IngestError(f"unknown recording format {fmt!r}")
    if "width" in rec and (seq.width, seq.height) != (rec["width"], rec["height"]):
        raise FrameDimensionError(
            f"record {rec['id']}: frames are {seq.width}x{seq.height}, manifest says {rec['width']}x{rec['height']}"
        )
    return seq


# -- splits ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitPlan:
    seed: int = 0
    train_ratio: float = 0.8
    val_ratio: float = 0.2
    proportions: tuple = DEFAULT_PROPORTIONS
    n_splits: int = 3
    by_subject: bool = False

    def __post_init__(self):
        object.__setattr__(self, "proportions", tuple(sorted(float(p) for p in self.proportions)))
        if self.train_ratio < 0 or self.val_ratio < 0 or self.train_ratio + self.val_ratio > 1 + 1e-12:
            raise ValueError("split ratios must be non-negative and sum to at most 1")
        if any(not 0 < p <= 1 for p in self.proportions):
            raise ValueError("proportions must lie in (0, 1]")
        if any(p > self.train_ratio + 1e-12 for p in self.proportions):
            raise ValueError("a proportion subset cannot exceed the training ratio")
        if self.n_splits < 1:
            raise ValueError("n_splits must be positive")


def _largest_remainder(total: int, sizes: Sequence[int]) -> list[int]:
    """Split ``total`` across groups proportionally to ``sizes`` (Hamilton rounding)."""
    n = sum(sizes)
    if n == 0:
        return [0] * len(sizes)
    quotas = [total * s / n for s in sizes]
    alloc = [int(np.floor(q)) for q in quotas]
    order = sorted(range(len(sizes)), key=lambda i: (-(quotas[i] - alloc[i]), i))
    for i in order[: total - sum(alloc)]:
        alloc[i] += 1
    return [min(a, s) for a, s in zip(alloc, sizes)]


def make_splits(manifest: Manifest, plan: SplitPlan) -> list[Manifest]:
    """``n_splits`` label-stratified train/val partitions with nested proportion subsets.

    Each returned record carries ``split`` and ``subsets`` (the proportions
    whose subset contains it). Subsets are per-class prefixes of the shuffled
    training order, so smaller subsets are contained in larger ones.
    """
    records = list(manifest.records)
    n = len(records)
    labels = [record_label(r) for r in records]
    classes = sorted(set(labels))
    out = []
    for k in range(plan.n_splits):
        rng = np.random.default_rng([int(plan.seed), k])
        assign = ["none"] * n
        train_order: dict[str, list[int]] = {}
        if plan.by_subject:
            subjects = sorted({r.get("subject", r["id"]) for r in records})
            perm = [subjects[i] for i in rng.permutation(len(subjects))]
            n_train = int(round(plan.train_ratio * len(subjects)))
            n_val = int(round(plan.val_ratio * len(subjects)))
            role = {s: "train" for s in perm[:n_train]}
            role.update({s: "val" for s in perm[n_train : n_train + n_val]})
            for i, r in enumerate(records):
                assign[i] = role.get(r.get("subject", r["id"]), "none")
            for c in classes:
                members = [i for i in rng.permutation(n).tolist() if labels[i] == c and assign[i] == "train"]
                train_order[c] = members
        else:
            members = {c: [i for i in range(n) if labels[i] == c] for c in classes}
            sizes = [len(members[c]) for c in classes]
            n_tr = _largest_remainder(int(round(plan.train_ratio * n)), sizes)
            n_va = _largest_remainder(int(round(plan.val_ratio * n)), sizes)
            for c, a, b in zip(classes, n_tr, n_va):
                perm = [members[c][i] for i in rng.permutation(len(members[c]))]
                b = min(b, len(perm) - a)
                for i in perm[:a]:
                    assign[i] = "train"
                for i in perm[a : a + b]:
                    assign[i] = "val"
                train_order[c] = perm[:a]
        subsets = [[] for _ in range(n)]
        sizes = [len(members) for members in train_order.values()]
        class_totals = [labels.count(c) for c in train_order]
        for p in plan.proportions:
            want = _largest_remainder(int(round(p * n)), class_totals)
            for c, w, have in zip(train_order, want, sizes):
                if w < 1:
                    raise ValueError(f"proportion {p} leaves class {c!r} without items in split {k}")
                for i in train_order[c][: min(w, have)]:
                    subsets[i].append(p)
        recs = []
        for i, r in enumerate(records):
            r = dict(r)
            r["split"] = assign[i]
            r["subsets"] = subsets[i]
            r["split_index"] = k
            recs.append(r)
        out.append(Manifest(recs, manifest.base_dir, dict(manifest.meta)))
    return out
