"""Time intervals used for annotations, ground truth and scanner output."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

CSV_HEADER = ("source_id", "start_s", "end_s", "label", "confidence")


@dataclass(frozen=True)
class EventInterval:
    start: float
    end: float
    label: str = "seizure"
    confidence: float = 1.0
    source: str = "model"
    source_id: str = ""

    def __post_init__(self):
        if self.end < self.start:
            raise ValueError(f"event end {self.end} precedes start {self.start}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence}")

    @property
    def duration(self) -> float:
        return self.end - self.start

    def shifted(self, offset: float) -> "EventInterval":
        return EventInterval(self.start + offset, self.end + offset, self.label, self.confidence, self.source, self.source_id)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EventInterval":
        return cls(
            float(d["start"]),
            float(d["end"]),
            d.get("label", "seizure"),
            float(d.get("confidence", 1.0)),
            d.get("source", "annotator"),
            d.get("source_id", ""),
        )


def events_to_csv(events: Iterable[EventInterval]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for e in events:
        w.writerow([e.source_id, repr(float(e.start)), repr(float(e.end)), e.label, repr(float(e.confidence))])
    return buf.getvalue()


def events_from_csv(text: str) -> list[EventInterval]:
    rows = list(csv.DictReader(io.StringIO(text)))
    return [
        EventInterval(float(r["start_s"]), float(r["end_s"]), r["label"], float(r["confidence"]), "model", r["source_id"])
        for r in rows
    ]


def write_events(events, csv_path, json_path=None) -> None:
    events = list(events)
    Path(csv_path).write_text(events_to_csv(events), encoding="utf-8")
    if json_path is not None:
        Path(json_path).write_text(json.dumps([e.to_dict() for e in events], indent=1) + "\n", encoding="utf-8")
