"""``clipscan`` command line: synth, split, train, eval, scan, agreement, serve-toy.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 backend or
transport error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from pydantic import ValidationError

from . import __version__
from .config import RunConfig, config_hash, derive_seed, load_config_file, resolve_paths
from .ensemble import SEIZURE_CLASS, DecisionPolicy, combine, decide_clip
from .evaluation import CONVENTIONS, ConfusionCounts, agreement_totals, average_precision, pr_curve, prf
from .events import EventInterval, events_from_csv, events_to_csv
from .ingest import IngestError, Manifest, ManifestError, SplitPlan, load_recording, make_splits
from .model.protocol import BackendError

log = logging.getLogger("clipscan")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_BACKEND = 0, 1, 2, 3
CROP_FLAGS = {"centre": "centre", "od": "od_crop"}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- run bookkeeping -----------------------------------------------------------------


@dataclass
class Run:
    """Output directory and provenance for one command invocation."""

    command: str
    cfg: RunConfig
    digest: str
    dir: Path

    @property
    def meta(self) -> dict:
        return {"tool": "clipscan", "version": __version__, "command": self.command, "config_hash": self.digest}

    def write_json(self, name: str, obj) -> Path:
        if isinstance(obj, dict):
            obj = {"_meta": self.meta, **obj}
        else:
            obj = {"_meta": self.meta, "data": obj}
        path = self.dir / name
        path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return path

    def write_csv(self, name: str, text: str) -> Path:
        head = f"# clipscan {__version__} command={self.command} config_hash={self.digest}\n"
        path = self.dir / name
        path.write_text(head + text, encoding="utf-8")
        return path


def open_run(command: str, cfg: RunConfig) -> Run:
    digest = config_hash(cfg, command)
    run_dir = Path(cfg.out) / f"{command}-{digest[:12]}"
    run_dir.mkdir(parents=True, exist_ok=True)
    run = Run(command, cfg, digest, run_dir)
    run.write_json("config.json", cfg.model_dump(mode="json"))
    return run


def read_csv_text(path) -> str:
    """CSV content with leading provenance comment lines removed."""
    lines = Path(path).read_text(encoding="utf-8").splitlines(keepends=True)
    return "".join(l for l in lines if not l.startswith("#"))


# -- shared pieces -------------------------------------------------------------------


def load_norm(cfg: RunConfig):
    from .sampler import NormalizationSpec

    if cfg.norm is None:
        raise UsageError("normalization constants (norm) are required for this command")
    if isinstance(cfg.norm, str):
        d = json.loads(Path(cfg.norm).read_text(encoding="utf-8"))
        return NormalizationSpec(tuple(d["mean"]), tuple(d["var"]))
    return NormalizationSpec(tuple(cfg.norm.mean), tuple(cfg.norm.var))


def decision_policy(cfg: RunConfig, threshold: Optional[float] = None) -> DecisionPolicy:
    p = cfg.policy
    return DecisionPolicy(p.threshold if threshold is None else threshold, p.viewpoint_agg, p.k)


def build_members(cfg: RunConfig) -> tuple[list, np.ndarray]:
    """Ensemble members and their weights (member weight, else stored validation F1, else 1)."""
    from .model import BackendClassifier, load_model

    if not cfg.members:
        raise UsageError("no ensemble members configured")
    members, weights = [], []
    for m in cfg.members:
        if m.model is not None:
            model = load_model(m.model)
            if (model.clip_len, model.size) != (cfg.clip.clip_len, cfg.clip.size):
                raise DataError(
                    f"model {m.model} expects clips {model.clip_len}x{model.size}, config has "
                    f"{cfg.clip.clip_len}x{cfg.clip.size}"
                )
            w = m.weight if m.weight is not None else model.metadata_.get("validation_f1", 1.0)
            model.validation_score_ = w
            members.append(model)
        else:
            members.append(BackendClassifier(m.command, m.host, m.port, m.timeout).fit())
            w = m.weight if m.weight is not None else 1.0
        weights.append(float(w))
    return members, np.asarray(weights)


def close_members(members) -> None:
    for m in members:
        if hasattr(m, "close"):
            m.close()


# -- synth -----------------------------------------------------------------------------


def cmd_synth(cfg: RunConfig, jobs: int) -> Run:
    from .synthdata import generate, spec_from_doc

    if cfg.synth is None:
        raise UsageError("synth needs a 'synth' corpus specification in the config")
    doc = dict(cfg.synth)
    if "minute_corpus" not in doc or "seed" not in doc["minute_corpus"]:
        doc.setdefault("seed", derive_seed(cfg.seed, "synth"))
    spec = spec_from_doc(doc)
    run = open_run("synth", cfg)
    generate(spec, run.dir, jobs, run.meta)
    return run


# -- split -----------------------------------------------------------------------------


def cmd_split(cfg: RunConfig, jobs: int) -> Run:
    if cfg.manifest is None:
        raise UsageError("split needs 'manifest'")
    manifest = Manifest.load(cfg.manifest)
    sp = cfg.split_plan
    plan = SplitPlan(
        sp.seed if sp.seed is not None else derive_seed(cfg.seed, "split"),
        sp.train_ratio, sp.val_ratio, sp.proportions, sp.n_splits, sp.by_subject,
    )
    run = open_run("split", cfg)
    summary = []
    for k, m in enumerate(make_splits(manifest, plan)):
        m.meta = run.meta
        m.save(run.dir / f"split_{k}.jsonl")
        counts = {}
        for r in m.records:
            key = f"{r['split']}/{r.get('label', 'seizure' if r.get('intervals') else 'non_seizure')}"
            counts[key] = counts.get(key, 0) + 1
        summary.append({"split": k, "counts": dict(sorted(counts.items()))})
    run.write_json("split_summary.json", {"plan": plan.__dict__ | {"proportions": list(plan.proportions)}, "splits": summary})
    return run


# -- train -----------------------------------------------------------------------------


def _items(manifest, records, cfg: RunConfig):
    from .training import manifest_items

    d = cfg.detector
    return manifest_items(manifest, records, d.kind, d.center_sigma, d.scale_sigma, derive_seed(cfg.seed, "detector"))


def cmd_train(cfg: RunConfig, jobs: int) -> Run:
    from .model import ToyClipClassifier, TrainingDivergedError, load_model, save_model
    from .sampler import CropPolicy
    from .training import item_f1, train_epochs

    tr = cfg.train
    if not tr.splits:
        raise UsageError("train needs train.splits (split manifests)")
    if tr.resume and len(tr.resume) != len(tr.splits):
        raise UsageError("train.resume needs one model file per split")
    norm = load_norm(cfg)
    policy = CropPolicy(cfg.crop.mode, tuple(cfg.crop.positions), tuple(cfg.crop.scales))
    run = open_run("train", cfg)
    logs, timing = [], {}
    for k, split_path in enumerate(tr.splits):
        manifest = Manifest.load(split_path)
        train_recs = [r for r in manifest.records if r.get("split") == "train"]
        if tr.proportion is not None:
            train_recs = [r for r in train_recs if any(abs(p - tr.proportion) < 1e-9 for p in r.get("subsets", []))]
        if not train_recs:
            raise DataError(f"split {split_path} has no training records")
        val_recs = [r for r in manifest.records if r.get("split") == "val"]
        train_items = _items(manifest, train_recs, cfg)
        val_items = _items(manifest, val_recs, cfg) if val_recs else []
        if tr.resume:
            model = load_model(tr.resume[k])
        else:
            model = ToyClipClassifier(
                n_classes=2, clip_len=cfg.clip.clip_len, size=cfg.clip.size, seed=derive_seed(cfg.seed, f"train/split{k}"),
                learning_rate=tr.learning_rate, weight_decay=tr.weight_decay, momentum=tr.momentum,
                batch_size=tr.batch_size, epochs=tr.epochs, dtype=tr.dtype,
            ).initialize()
        entries = []

        def validate():
            return item_f1(model, val_items, cfg.crop.mode, norm, cfg.clip.clip_len, cfg.clip.size, cfg.scan.viewpoints)

        def on_epoch(epoch, loss):
            entry = {"epoch": epoch, "loss": loss}
            last = model.epochs_done_ >= tr.epochs
            if val_items and tr.validate_every and (model.epochs_done_ % tr.validate_every == 0 or last):
                entry["val_f1"] = validate()
            entries.append(entry)
            log.info("split %d epoch %d loss %.5f %s", k, epoch, loss, entry.get("val_f1", ""))

        t0 = time.perf_counter()
        remaining = max(tr.epochs - model.epochs_done_, 0)
        try:
            train_epochs(model, train_items, policy, norm, remaining, tr.balance, on_epoch)
        except TrainingDivergedError as exc:
            raise TrainingDivergedError(f"split {k}: {exc}") from exc
        val_f1 = entries[-1].get("val_f1") if entries and "val_f1" in entries[-1] else (validate() if val_items else None)
        timing[f"split{k}_seconds"] = time.perf_counter() - t0
        meta = {
            "_meta": run.meta,
            "split_index": k,
            "split_manifest": Path(split_path).name,
            "n_train": len(train_items),
            "n_val": len(val_items),
            "validation_f1": val_f1,
            "crop": cfg.crop.mode,
        }
        save_model(model, run.dir / f"model_split{k}.json", meta)
        logs.append({"split": k, "epochs": entries, "validation_f1": val_f1, "n_train": len(train_items), "n_val": len(val_items)})
    run.write_json("train_log.json", {"splits": logs})
    (run.dir / "timing.json").write_text(json.dumps(timing, indent=1, sort_keys=True) + "\n")
    return run


# -- eval ------------------------------------------------------------------------------


def member_viewpoint_probs(members, items, crop: str, norm, cfg: RunConfig) -> np.ndarray:
    """Seizure probability per member, item and viewpoint: ``(K, N, V)``."""
    from .training import item_viewpoint_clips

    V = cfg.scan.viewpoints
    out = np.empty((len(members), len(items), V))
    for n, it in enumerate(items):
        clips = item_viewpoint_clips(it, crop, norm, cfg.clip.clip_len, cfg.clip.size, V)
        for k, m in enumerate(members):
            out[k, n] = np.asarray(m.predict_proba(clips))[:, SEIZURE_CLASS]
    return out


def ensemble_viewpoint_probs(P: np.ndarray, weights, mode: str) -> np.ndarray:
    K, N, V = P.shape
    two = np.stack([1.0 - P, P], axis=-1).reshape(K, N * V, 2)
    return combine(two, weights if mode == "weighted" else None, mode)[:, SEIZURE_CLASS].reshape(N, V)


def _score_rows(probs_nv: np.ndarray, labels: np.ndarray, policy: DecisionPolicy) -> dict:
    decisions = [decide_clip(p, policy) for p in probs_nv]
    pred = np.array([d.is_seizure for d in decisions])
    scores = np.array([d.seizure_prob for d in decisions])
    counts = ConfusionCounts.from_labels(labels, pred)
    p, r, f = prf(counts)
    ap = average_precision(scores, labels, int(labels.sum())) if labels.any() else None
    return {"precision": p, "recall": r, "f1": f, "ap": ap, "tp": counts.tp, "fp": counts.fp, "fn": counts.fn, "tn": counts.tn}


def _rows_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow(["" if row.get(c) is None else (repr(row[c]) if isinstance(row[c], float) else row[c]) for c in columns])
    return buf.getvalue()


TABLE2_COLUMNS = ("dataset", "crop", "model", "recall", "precision", "f1", "ap", "tp", "fp", "fn", "tn")
TABLE3_COLUMNS = ("dataset", "subject", "threshold", "recall", "precision", "f1", "tp", "fp", "fn", "tn")


def evaluate_dataset(tag: str, items, members, weights, norm, cfg: RunConfig) -> dict:
    labels = np.array([it.label == 1 for it in items])
    policy = decision_policy(cfg)
    table2, curves, per_crop = [], {}, {}
    for crop in cfg.eval.crops:
        P = member_viewpoint_probs(members, items, crop, norm, cfg)
        per_crop[crop] = P
        for k in range(len(members)):
            table2.append({"dataset": tag, "crop": crop, "model": f"split{k + 1}", **_score_rows(P[k], labels, policy)})
        for mode in ("simple", "weighted"):
            E = ensemble_viewpoint_probs(P, weights, mode)
            table2.append({"dataset": tag, "crop": crop, "model": f"{mode}_average", **_score_rows(E, labels, policy)})
            if labels.any():
                scores = np.array([decide_clip(p, policy).seizure_prob for p in E])
                curves[f"{crop}_{mode}"] = pr_curve(scores, labels, int(labels.sum()))
    crop = cfg.inference_crop
    P = per_crop[crop] if crop in per_crop else member_viewpoint_probs(members, items, crop, norm, cfg)
    E = ensemble_viewpoint_probs(P, weights, cfg.ensemble)
    subjects = sorted({it.subject for it in items})
    table3 = []
    for subject in [*subjects, "all"]:
        mask = np.array([subject == "all" or it.subject == subject for it in items])
        for t in cfg.eval.thresholds:
            row = _score_rows(E[mask], labels[mask], decision_policy(cfg, t))
            row.pop("ap")
            table3.append({"dataset": tag, "subject": subject, "threshold": float(t), **row})
    return {"table2": table2, "table3": table3, "curves": curves}


def cmd_eval(cfg: RunConfig, jobs: int) -> Run:
    if not cfg.eval.datasets:
        raise UsageError("eval needs eval.datasets")
    norm = load_norm(cfg)
    members, weights = build_members(cfg)
    run = open_run("eval", cfg)
    try:
        reports = {}
        for tag, ds in sorted(cfg.eval.datasets.items()):
            manifest = Manifest.load(ds.manifest)
            recs = [r for r in manifest.records if ds.split is None or r.get("split") == ds.split]
            if not recs:
                raise DataError(f"dataset {tag!r} selects no records")
            items = _items(manifest, recs, cfg)
            res = evaluate_dataset(tag, items, members, weights, norm, cfg)
            run.write_csv(f"table2_{tag}.csv", _rows_csv(res["table2"], TABLE2_COLUMNS))
            run.write_csv(f"table3_{tag}.csv", _rows_csv(res["table3"], TABLE3_COLUMNS))
            for name, curve in res["curves"].items():
                rows = [{"threshold": float(t), "recall": float(r), "precision": float(p)}
                        for t, r, p in zip(curve.thresholds, curve.recall, curve.precision)]
                run.write_csv(f"pr_{tag}_{name}.csv", _rows_csv(rows, ("threshold", "recall", "precision")))
            reports[tag] = {"n_items": len(items), "table2": res["table2"], "table3": res["table3"]}
        run.write_json("report.json", {
            "datasets": reports,
            "conventions": CONVENTIONS,
            "ensemble_weights": [float(w) for w in weights],
            "policy": cfg.policy.model_dump(),
            "inference_crop": cfg.inference_crop,
        })
    finally:
        close_members(members)
    return run


# -- scan ------------------------------------------------------------------------------


def cmd_scan(cfg: RunConfig, jobs: int) -> tuple[Run, bool]:
    from .ensemble import SplitEnsembleClassifier
    from .scanner import Phase, ScanConfig, phase_report, scan, scan_events, throughput_report, trace_csv
    from .training import record_detector

    sc = cfg.scan
    if sc.recordings is None:
        raise UsageError("scan needs scan.recordings (a manifest)")
    norm = load_norm(cfg)
    manifest = Manifest.load(sc.recordings)
    members, weights = build_members(cfg)
    ens = SplitEnsembleClassifier(members, cfg.ensemble, list(weights), cfg.policy.threshold).fit()
    scfg = ScanConfig(sc.window_len, sc.stride, sc.viewpoints, sc.gap_merge, sc.min_event, decision_policy(cfg),
                      cfg.inference_crop, cfg.clip.clip_len, cfg.clip.size)
    run = open_run("scan", cfg)
    results, events, status = [], [], []
    ok = True
    try:
        for rec in manifest.records:
            try:
                seq = load_recording(rec, manifest.base_dir)
                d = cfg.detector
                det = record_detector(rec, seq, manifest.base_dir, d.kind, d.center_sigma, d.scale_sigma,
                                      derive_seed(cfg.seed, "detector"))
                res = scan(seq, ens, scfg, norm, det, jobs, float(rec.get("start_time", 0.0)))
            except (IngestError, OSError, ValueError) as exc:
                ok = False
                status.append({"id": rec["id"], "status": "error", "error": f"{type(exc).__name__}: {exc}"})
                log.error("recording %s failed: %s", rec["id"], exc)
                continue
            res.source_id = rec["id"]
            evs = scan_events(res)
            events.extend(evs)
            results.append(res)
            status.append({"id": rec["id"], "status": "ok", "windows": len(res.results), "failed_windows": res.n_failed,
                           "events": len(evs)})
    finally:
        close_members(members)
    events.sort(key=lambda e: (e.start, e.source_id))
    run.write_csv("events.csv", events_to_csv(events))
    run.write_json("events.json", {"events": [e.to_dict() for e in events]})
    if sc.trace:
        run.write_csv("trace.csv", trace_csv(results))
    phases = [Phase(p.name, *p.seconds()) for p in sc.phases]
    report = phase_report(events, phases)
    rep = report.to_dict()
    rep.pop("processing_seconds")
    rep["scan_config"] = scfg.to_dict()
    run.write_json("phase_report.json", rep)
    tp = throughput_report(results, sc.baseline_seconds)
    run.write_json("scan_status.json", {
        "recordings": status,
        "frames": tp.frames,
        "frames_read": tp.frames_read,
        "video_seconds": tp.video_seconds,
        "windows": sum(len(r.results) for r in results),
        "failed_windows": sum(r.n_failed for r in results),
    })
    timing = {k: v for k, v in tp.to_dict().items() if k not in ("frames", "frames_read", "video_seconds")}
    (run.dir / "timing.json").write_text(json.dumps(timing, indent=1, sort_keys=True) + "\n")
    return run, ok


# -- agreement ---------------------------------------------------------------------


def load_track(path, label: str = "seizure") -> tuple[str, dict]:
    """An annotation track as ``(annotator, {video: [(start, end), ...]})``.

    JSON tracks are ``{"annotator": ..., "videos": {video: [{"start", "end", "label"}]}}``;
    CSV tracks use the event-list columns with ``source_id`` as the video.
    """
    path = Path(path)
    videos: dict[str, list] = {}
    if path.suffix.lower() == ".csv":
        name = path.stem
        for e in events_from_csv(read_csv_text(path)):
            if e.label == label:
                videos.setdefault(e.source_id, []).append((e.start, e.end))
    else:
        doc = json.loads(path.read_text(encoding="utf-8"))
        name = str(doc.get("annotator", path.stem))
        for vid, ivs in doc.get("videos", {}).items():
            evs = [EventInterval.from_dict(iv) for iv in ivs]
            videos[vid] = [(e.start, e.end) for e in evs if e.label == label]
    return name, videos


def cmd_agreement(cfg: RunConfig, jobs: int) -> Run:
    paths = cfg.agreement.tracks
    if len(paths) < 2:
        raise UsageError("agreement needs at least two tracks")
    tracks = [load_track(p, cfg.agreement.label) for p in paths]
    vids = set(tracks[0][1])
    for (name, t), p in zip(tracks, paths):
        if set(t) != vids:
            raise DataError(f"track {p} covers videos {sorted(t)}, expected {sorted(vids)}")
    n = len(tracks)
    M = np.ones((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            inter = union = 0.0
            for v in sorted(vids):
                a, b = agreement_totals(tracks[i][1][v], tracks[j][1][v])
                inter += a
                union += b
            M[i, j] = M[j, i] = inter / union if union > 0 else 1.0
    names = [t[0] for t in tracks]
    best = None
    if n >= 2:
        pairs = [(M[i, j], i, j) for i in range(n) for j in range(i + 1, n)]
        val, i, j = max(pairs, key=lambda x: (x[0], -x[1], -x[2]))
        best = {"pair": [names[i], names[j]], "rate": float(val)}
    off = [M[i, j] for i in range(n) for j in range(i + 1, n)]
    run = open_run("agreement", cfg)
    run.write_json("agreement.json", {
        "annotators": names,
        "matrix": M.tolist(),
        "mean_pairwise": float(np.mean(off)),
        "best_pair": best,
        "conventions": {"agreement_empty": CONVENTIONS["agreement_empty"], "pooling": "durations summed over videos"},
    })
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["annotator", *names])
    for name, row in zip(names, M):
        w.writerow([name, *[repr(float(x)) for x in row]])
    run.write_csv("agreement.csv", buf.getvalue())
    return run


# -- serve-toy -----------------------------------------------------------------------


def cmd_serve_toy(args) -> int:
    from .model import ConstantScorer, ToyScorer, load_model, serve, serve_tcp

    if (args.model is None) == (args.constant is None):
        raise UsageError("serve-toy needs exactly one of --model or --constant")
    if args.model is not None:
        scorer = ToyScorer(load_model(args.model))
    else:
        scorer = ConstantScorer([float(x) for x in args.constant.split(",")])
    if args.port is None:
        serve(scorer, sys.stdin.buffer, sys.stdout.buffer)
        return EXIT_OK
    server = serve_tcp(scorer, args.host, args.port)
    print(f"listening on {server.server_address[0]}:{server.server_address[1]}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


# -- entry point ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or YAML run configuration")
    common.add_argument("--seed", type=int, help="top-level seed (overrides config)")
    common.add_argument("--jobs", type=int, help="worker threads (default: available cores)")
    common.add_argument("--threshold", type=float, help="decision threshold")
    common.add_argument("--crop", choices=sorted(CROP_FLAGS), help="crop mode")
    common.add_argument("--ensemble", choices=("simple", "weighted"), help="ensemble averaging")
    common.add_argument("--out", help="base output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="clipscan", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"clipscan {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_ in [
        ("synth", "generate a synthetic corpus"),
        ("split", "make train/val splits with nested proportion subsets"),
        ("train", "train one toy model per split"),
        ("eval", "evaluate an ensemble on labelled clips"),
        ("scan", "scan long recordings into events and phase reports"),
        ("agreement", "pairwise inter-annotator agreement"),
    ]:
        p = sub.add_parser(name, parents=[common], help=help_)
        if name == "split":
            p.add_argument("--by-subject", action="store_true", help="assign whole subjects to train or val")
    p = sub.add_parser("serve-toy", help="serve a toy model or constant scores over the backend protocol")
    p.add_argument("--model", help="toy model file")
    p.add_argument("--constant", help="comma-separated raw scores to return for every clip")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, help="listen on TCP instead of stdio (0 picks a free port)")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def effective_config(args) -> RunConfig:
    doc = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file {path} does not exist")
        doc = resolve_paths(load_config_file(path), path.parent)
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.jobs is not None:
        doc["jobs"] = args.jobs
    if args.out is not None:
        doc["out"] = args.out
    elif "out" in doc and args.config and not Path(doc["out"]).is_absolute():
        doc["out"] = str((Path(args.config).parent / doc["out"]).resolve())
    if args.threshold is not None:
        doc.setdefault("policy", {})["threshold"] = args.threshold
    if args.ensemble is not None:
        doc["ensemble"] = args.ensemble
    if args.crop is not None:
        mode = CROP_FLAGS[args.crop]
        if args.command == "train":
            doc.setdefault("crop", {})["mode"] = mode
        else:
            doc["inference_crop"] = mode
    if getattr(args, "by_subject", False):
        doc.setdefault("split_plan", {})["by_subject"] = True
    return RunConfig.model_validate(doc)


COMMANDS = {"synth": cmd_synth, "split": cmd_split, "train": cmd_train, "eval": cmd_eval, "agreement": cmd_agreement}


def run_command(args) -> int:
    if args.command == "serve-toy":
        return cmd_serve_toy(args)
    cfg = effective_config(args)
    jobs = cfg.jobs or os.cpu_count() or 1
    if args.command == "scan":
        run, ok = cmd_scan(cfg, jobs)
        print(run.dir)
        return EXIT_OK if ok else EXIT_DATA
    run = COMMANDS[args.command](cfg, jobs)
    print(run.dir)
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    from .model import TrainingDivergedError

    try:
        return run_command(args)
    except (UsageError, ValidationError) as exc:
        print(f"clipscan {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BackendError as exc:
        print(f"clipscan {args.command}: backend error ({exc.kind}): {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except TrainingDivergedError as exc:
        print(f"clipscan {args.command}: training diverged: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DataError, IngestError, ManifestError, OSError, ValueError, KeyError) as exc:
        print(f"clipscan {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
