"""Run configuration schema, hashing and seed derivation."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from . import __version__


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class NormConfig(_Strict):
    mean: tuple[float, float, float]
    var: tuple[float, float, float]


class CropConfig(_Strict):
    mode: Literal["centre", "od_crop"] = "centre"
    positions: tuple[str, ...] = ("c", "tl", "tr", "bl", "br")
    scales: tuple[float, ...] = (1.0, 0.84, 0.71, 0.59, 0.5)


class ClipConfig(_Strict):
    clip_len: int = Field(64, ge=1)
    size: int = Field(112, ge=4)


class DetectorConfig(_Strict):
    kind: Literal["oracle", "none"] = "oracle"
    center_sigma: float = Field(0.0, ge=0)
    scale_sigma: float = Field(0.0, ge=0)


class PolicyConfig(_Strict):
    threshold: float = Field(0.5, ge=0, le=1)
    viewpoint_agg: Literal["mean", "k_of_n"] = "mean"
    k: Optional[int] = None


class MemberConfig(_Strict):
    """One ensemble member: a toy-model file or a backend endpoint."""

    model: Optional[str] = None
    command: Optional[list[str]] = None
    host: Optional[str] = None
    port: Optional[int] = None
    timeout: float = 30.0
    weight: Optional[float] = Field(None, ge=0)

    @model_validator(mode="after")
    def _one_source(self):
        given = sum(x is not None for x in (self.model, self.command, self.host))
        if given != 1:
            raise ValueError("a member needs exactly one of model, command or host")
        if self.host is not None and self.port is None:
            raise ValueError("a host member needs a port")
        return self


class SplitPlanConfig(_Strict):
    seed: Optional[int] = None
    train_ratio: float = Field(0.8, ge=0, le=1)
    val_ratio: float = Field(0.2, ge=0, le=1)
    proportions: tuple[float, ...] = (0.01, 0.05, 0.10, 0.20, 0.50, 0.80)
    n_splits: int = Field(3, ge=1)
    by_subject: bool = False


class TrainSection(_Strict):
    splits: list[str] = []
    learning_rate: float = Field(0.1, ge=0)
    weight_decay: float = Field(1e-5, ge=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    batch_size: int = Field(8, ge=1)
    epochs: int = Field(1, ge=0)
    dtype: Literal["float32", "float64"] = "float64"
    proportion: Optional[float] = Field(None, gt=0, le=1)
    balance: bool = True
    resume: list[str] = []
    validate_every: int = Field(1, ge=0)


class EvalDataset(_Strict):
    manifest: str
    split: Optional[str] = None


class EvalSection(_Strict):
    datasets: dict[str, EvalDataset] = {}
    thresholds: tuple[float, ...] = (0.2, 0.5, 0.8)
    crops: tuple[Literal["centre", "od_crop"], ...] = ("centre", "od_crop")


class PhaseConfig(_Strict):
    name: str
    start: float
    end: float
    unit: Literal["s", "h", "day"] = "day"

    def seconds(self) -> tuple[float, float]:
        f = {"s": 1.0, "h": 3600.0, "day": 86400.0}[self.unit]
        return self.start * f, self.end * f


class ScanSection(_Strict):
    recordings: Optional[str] = None
    window_len: float = Field(60.0, gt=0)
    stride: float = Field(60.0, gt=0)
    viewpoints: int = Field(10, ge=1)
    gap_merge: int = Field(1, ge=0)
    min_event: int = Field(1, ge=0)
    phases: list[PhaseConfig] = []
    baseline_seconds: Optional[float] = Field(None, gt=0)
    trace: bool = True


class AgreementSection(_Strict):
    tracks: list[str] = []
    label: str = "seizure"


class RunConfig(_Strict):
    seed: int = Field(0, ge=0)
    out: str = "runs"
    jobs: Optional[int] = Field(None, ge=1)
    synth: Optional[dict] = None
    manifest: Optional[str] = None
    norm: Union[NormConfig, str, None] = None
    crop: CropConfig = CropConfig()
    inference_crop: Literal["centre", "od_crop"] = "centre"
    clip: ClipConfig = ClipConfig()
    detector: DetectorConfig = DetectorConfig()
    members: list[MemberConfig] = []
    ensemble: Literal["simple", "weighted"] = "simple"
    policy: PolicyConfig = PolicyConfig()
    split_plan: SplitPlanConfig = SplitPlanConfig()
    train: TrainSection = TrainSection()
    eval: EvalSection = EvalSection()
    scan: ScanSection = ScanSection()
    agreement: AgreementSection = AgreementSection()

    @field_validator("synth")
    @classmethod
    def _synth_spec(cls, v):
        if v is not None:
            from .synthdata import spec_from_doc

            spec_from_doc(dict(v))
        return v


def load_config_file(path) -> dict:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() in (".yaml", ".yml"):
        import yaml

        doc = yaml.safe_load(text)
    else:
        doc = json.loads(text)
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ValueError(f"config {path} must be a mapping")
    return doc


def resolve_paths(doc: dict, base: Path) -> dict:
    """Make the path-valued fields of a raw config document absolute relative to ``base``."""

    def fix(p):
        return p if p is None or Path(p).is_absolute() else str((base / p).resolve())

    doc = json.loads(json.dumps(doc))
    for key in ("manifest",):
        if key in doc:
            doc[key] = fix(doc[key])
    if isinstance(doc.get("norm"), str):
        doc["norm"] = fix(doc["norm"])
    for m in doc.get("members", []):
        if "model" in m:
            m["model"] = fix(m["model"])
    tr = doc.get("train", {})
    for key in ("splits", "resume"):
        if key in tr:
            tr[key] = [fix(p) for p in tr[key]]
    for ds in doc.get("eval", {}).get("datasets", {}).values():
        if "manifest" in ds:
            ds["manifest"] = fix(ds["manifest"])
    if "recordings" in doc.get("scan", {}):
        doc["scan"]["recordings"] = fix(doc["scan"]["recordings"])
    ag = doc.get("agreement", {})
    if "tracks" in ag:
        ag["tracks"] = [fix(p) for p in ag["tracks"]]
    return doc


def config_hash(cfg: RunConfig, command: str) -> str:
    """Digest of everything that influences a command's outputs (not ``out`` or ``jobs``)."""
    doc = cfg.model_dump(mode="json", exclude={"out", "jobs"})
    blob = json.dumps({"command": command, "config": doc, "version": __version__}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def derive_seed(seed: int, tag: str) -> int:
    """Child seed for one purpose: first 8 bytes of ``sha256("<seed>/<tag>")``, masked to 31 bits."""
    digest = hashlib.sha256(f"{int(seed)}/{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFF
