import csv
import io
import json
import shutil
import socket

import numpy as np
import pytest
from helpers import pipeline, run_cli, tree_bytes, write_config

from clipscan.cli import EXIT_BACKEND, EXIT_DATA, EXIT_OK, EXIT_USAGE, evaluate_dataset, read_csv_text
from clipscan.config import RunConfig, config_hash, derive_seed
from clipscan.model import load_model, weights_digest
from clipscan.sampler import NormalizationSpec
from clipscan.synthdata import Corpus, CorpusSpec, OracleDetector, ScheduledEvent, corpus_norm
from clipscan.training import LabeledItem

BASE = {"seed": 11, "clip": {"clip_len": 8, "size": 16}, "jobs": 1}
SYNTH = {"minute_corpus": {"n_seizure": 4, "n_non_seizure": 8, "duration": 6.0, "width": 32, "height": 24}}
PLAN = {"n_splits": 2, "proportions": [0.5]}
TRAIN = {"epochs": 1, "learning_rate": 0.001, "dtype": "float32", "batch_size": 4}
SCAN = {"window_len": 3.0, "stride": 3.0, "viewpoints": 2}


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    return root, pipeline(root, BASE, SYNTH, PLAN, TRAIN, scan=SCAN)


class TestPipeline:
    def test_outputs_exist(self, small_run):
        _, d = small_run
        assert (d["synth"] / "manifest.jsonl").is_file()
        assert {p.name for p in d["split"].glob("split_*.jsonl")} == {"split_0.jsonl", "split_1.jsonl"}
        assert (d["train"] / "model_split1.json").is_file()
        for name in ("table2_val.csv", "table3_val.csv", "report.json"):
            assert (d["eval"] / name).is_file()
        for name in ("events.csv", "trace.csv", "phase_report.json", "scan_status.json", "timing.json"):
            assert (d["scan"] / name).is_file()

    def test_provenance_headers(self, small_run):
        _, d = small_run
        first = (d["eval"] / "table2_val.csv").read_text().splitlines()[0]
        assert first.startswith("# clipscan ") and "config_hash=" in first
        meta = json.loads((d["eval"] / "report.json").read_text())["_meta"]
        assert meta["command"] == "eval" and len(meta["config_hash"]) == 64
        assert json.loads((d["synth"] / "manifest.jsonl").read_text().splitlines()[0])["_meta"]["command"] == "synth"

    def test_table_structure(self, small_run):
        _, d = small_run
        t2 = list(csv.DictReader(io.StringIO(read_csv_text(d["eval"] / "table2_val.csv"))))
        assert {(r["crop"], r["model"]) for r in t2} == {
            (c, m) for c in ("centre", "od_crop") for m in ("split1", "split2", "simple_average", "weighted_average")
        }
        t3 = list(csv.DictReader(io.StringIO(read_csv_text(d["eval"] / "table3_val.csv"))))
        for subject in {r["subject"] for r in t3}:
            assert sorted(float(r["threshold"]) for r in t3 if r["subject"] == subject) == [0.2, 0.5, 0.8]
        assert "all" in {r["subject"] for r in t3}

    def test_trace_rows_equal_windows(self, small_run):
        _, d = small_run
        status = json.loads((d["scan"] / "scan_status.json").read_text())
        rows = read_csv_text(d["scan"] / "trace.csv").strip().splitlines()
        assert len(rows) - 1 == status["windows"] == 12 * 2

    def test_rerun_is_byte_identical(self, small_run, tmp_path):
        root, d = small_run
        first = tree_bytes(root / "runs")
        again = tmp_path / "again"
        shutil.copytree(root / "cfg", again / "cfg")
        shutil.move(str(root / "runs"), str(again / "old_runs"))
        try:
            d2 = pipeline(root, BASE, SYNTH, PLAN, TRAIN, scan=SCAN)
            assert tree_bytes(root / "runs") == first
            assert d2["scan"] == d["scan"]
        finally:
            if not (root / "runs").exists():
                shutil.move(str(again / "old_runs"), str(root / "runs"))

    def test_seed_changes_outputs(self, small_run, tmp_path):
        _, d = small_run
        c = write_config(tmp_path / "s.json", {**BASE, "seed": 12, "out": str(tmp_path / "r"), "synth": SYNTH})
        code, out, _ = run_cli("synth", "--config", c)
        assert code == 0
        assert (out / "rec_0000" / "frame_000000.png").read_bytes() != (d["synth"] / "rec_0000" / "frame_000000.png").read_bytes()


class TestTrain:
    def test_zero_epochs_equals_initialization(self, small_run, tmp_path):
        root, d = small_run
        cfg = json.loads((root / "cfg" / "train.json").read_text())
        cfg["out"] = str(tmp_path)
        cfg["train"]["epochs"] = 0
        code, out, err = run_cli("train", "--config", write_config(tmp_path / "t.json", cfg))
        assert code == 0, err
        from clipscan.model import ToyClipClassifier

        m = load_model(out / "model_split0.json")
        fresh = ToyClipClassifier(clip_len=8, size=16, seed=derive_seed(11, "train/split0"), dtype="float32").initialize()
        assert weights_digest(m) == weights_digest(fresh)

    def test_resume_matches_uninterrupted(self, small_run, tmp_path):
        root, _ = small_run
        cfg = json.loads((root / "cfg" / "train.json").read_text())
        cfg["out"] = str(tmp_path / "full")
        cfg["train"]["epochs"] = 2
        _, full, _ = run_cli("train", "--config", write_config(tmp_path / "full.json", cfg))
        cfg["out"] = str(tmp_path / "half")
        cfg["train"]["epochs"] = 1
        _, half, _ = run_cli("train", "--config", write_config(tmp_path / "half.json", cfg))
        cfg["out"] = str(tmp_path / "resumed")
        cfg["train"]["epochs"] = 2
        cfg["train"]["resume"] = [str(half / f"model_split{k}.json") for k in range(2)]
        code, resumed, err = run_cli("train", "--config", write_config(tmp_path / "res.json", cfg))
        assert code == 0, err
        for k in range(2):
            a, b = load_model(full / f"model_split{k}.json"), load_model(resumed / f"model_split{k}.json")
            assert weights_digest(a) == weights_digest(b)
            assert a.loss_history_ == b.loss_history_

    def test_divergence_is_a_data_error(self, small_run, tmp_path):
        root, _ = small_run
        cfg = json.loads((root / "cfg" / "train.json").read_text())
        cfg["out"] = str(tmp_path)
        cfg["train"]["learning_rate"] = 1e6
        cfg["train"]["epochs"] = 3
        code, _, err = run_cli("train", "--config", write_config(tmp_path / "t.json", cfg))
        assert code == EXIT_DATA and "diverged" in err


class TestExitCodes:
    def test_usage(self, tmp_path):
        assert run_cli("frobnicate")[0] == EXIT_USAGE
        assert run_cli("synth", "--crop", "diagonal")[0] == EXIT_USAGE
        assert run_cli("synth", "--config", tmp_path / "missing.json")[0] == EXIT_USAGE
        assert run_cli("synth", "--out", tmp_path)[0] == EXIT_USAGE  # no corpus spec
        bad = write_config(tmp_path / "bad.json", {"seed": 1, "colour": "red"})
        assert run_cli("synth", "--config", bad)[0] == EXIT_USAGE
        assert run_cli("serve-toy")[0] == EXIT_USAGE

    def test_data_error(self, tmp_path):
        c = write_config(tmp_path / "c.json", {"out": str(tmp_path), "manifest": str(tmp_path / "none.jsonl")})
        code, _, err = run_cli("split", "--config", c)
        assert code == EXIT_DATA and "does not exist" in err

    def test_backend_error(self, small_run, tmp_path):
        _, d = small_run
        with socket.socket() as s:
            s.bind(("127.0.0.1", 0))
            port = s.getsockname()[1]
        c = write_config(tmp_path / "c.json", {
            **BASE, "out": str(tmp_path), "norm": d["norm"], "members": [{"host": "127.0.0.1", "port": port, "timeout": 2}],
            "eval": {"datasets": {"v": {"manifest": str(d["split"] / "split_0.jsonl")}}},
        })
        code, _, err = run_cli("eval", "--config", c)
        assert code == EXIT_BACKEND and "backend error" in err

    def test_scan_recording_failure(self, small_run, tmp_path):
        root, d = small_run
        man = [json.loads(l) for l in (d["synth"] / "manifest.jsonl").read_text().splitlines()[1:3]]
        man[1]["path"] = "rec_0000"
        man[1]["width"] = 99
        (tmp_path / "m.jsonl").write_text("".join(json.dumps(r) + "\n" for r in man))
        shutil.copytree(d["synth"] / "rec_0000", tmp_path / "rec_0000")
        shutil.copytree(d["synth"] / "rec_0001", tmp_path / "rec_0001")
        cfg = json.loads((root / "cfg" / "scan.json").read_text())
        cfg["out"] = str(tmp_path / "out")
        cfg["scan"]["recordings"] = str(tmp_path / "m.jsonl")
        code, out, _ = run_cli("scan", "--config", write_config(tmp_path / "s.json", cfg))
        assert code == EXIT_DATA
        status = json.loads((out / "scan_status.json").read_text())["recordings"]
        assert [s["status"] for s in status] == ["ok", "error"]


class TestFlags:
    def test_flags_override_config(self, tmp_path):
        c = write_config(tmp_path / "c.json", {"seed": 1, "policy": {"threshold": 0.3}})
        from clipscan.cli import build_parser, effective_config

        args = build_parser().parse_args(["eval", "--config", str(c), "--seed", "9", "--threshold", "0.8",
                                          "--crop", "od", "--ensemble", "weighted"])
        cfg = effective_config(args)
        assert (cfg.seed, cfg.policy.threshold, cfg.inference_crop, cfg.ensemble) == (9, 0.8, "od_crop", "weighted")
        args = build_parser().parse_args(["train", "--crop", "od"])
        assert effective_config(args).crop.mode == "od_crop"

    def test_yaml_config(self, tmp_path):
        (tmp_path / "c.yaml").write_text("seed: 4\nsynth:\n  minute_corpus: {n_seizure: 1, n_non_seizure: 1, duration: 1.0, width: 32, height: 24}\n")
        code, out, err = run_cli("synth", "--config", tmp_path / "c.yaml", "--out", tmp_path / "o")
        assert code == 0, err
        assert len((out / "manifest.jsonl").read_text().splitlines()) == 3

    def test_hash_ignores_out_and_jobs(self):
        a = RunConfig(out="x", jobs=1)
        b = RunConfig(out="y", jobs=4)
        assert config_hash(a, "eval") == config_hash(b, "eval") != config_hash(RunConfig(seed=1), "eval")
        assert config_hash(a, "eval") != config_hash(a, "scan")


def write_tracks(tmp_path, tracks):
    paths = []
    for name, videos in tracks.items():
        p = tmp_path / f"{name}.json"
        p.write_text(json.dumps({"annotator": name, "videos": {
            v: [{"start": s, "end": e, "label": "seizure"} for s, e in ivs] for v, ivs in videos.items()
        }}))
        paths.append(str(p))
    return paths


class TestAgreement:
    def test_pooled_matrix(self, tmp_path):
        paths = write_tracks(tmp_path, {
            "a": {"v1": [(0, 10)], "v2": [(0, 4)]},
            "b": {"v1": [(5, 15)], "v2": [(0, 4)]},
            "c": {"v1": [], "v2": []},
        })
        c = write_config(tmp_path / "run.json", {"out": str(tmp_path / "o"), "agreement": {"tracks": paths}})
        code, out, err = run_cli("agreement", "--config", c)
        assert code == 0, err
        rep = json.loads((out / "agreement.json").read_text())
        m = np.array(rep["matrix"])
        # pooled: (5 + 4) / (15 + 4)
        assert m[0, 1] == pytest.approx(9 / 19)
        assert m[0, 2] == 0.0 and np.allclose(np.diag(m), 1.0)
        assert rep["best_pair"]["pair"] == ["a", "b"]

    def test_video_mismatch(self, tmp_path):
        paths = write_tracks(tmp_path, {"a": {"v1": [(0, 1)]}, "b": {"v2": [(0, 1)]}})
        c = write_config(tmp_path / "run.json", {"out": str(tmp_path / "o"), "agreement": {"tracks": paths}})
        assert run_cli("agreement", "--config", c)[0] == EXIT_DATA

    def test_single_track_is_usage_error(self, tmp_path):
        paths = write_tracks(tmp_path, {"a": {"v1": [(0, 1)]}})
        c = write_config(tmp_path / "run.json", {"out": str(tmp_path / "o"), "agreement": {"tracks": paths}})
        assert run_cli("agreement", "--config", c)[0] == EXIT_USAGE


class MotionOracle:
    def predict_proba(self, X):
        e = np.abs(np.diff(np.asarray(X), axis=2)).mean(axis=(1, 2, 3, 4))
        p = 1 / (1 + np.exp(-6 * (e - 1.0)))
        return np.stack([1 - p, p], axis=1)


def test_perfect_model_scores_f1_one():
    spec = CorpusSpec(duration=10.0, n_recordings=6, recording_events=[[ScheduledEvent(0, 10)] if i % 3 == 0 else [] for i in range(6)])
    corpus = Corpus(spec)
    n = corpus_norm(corpus)
    norm = NormalizationSpec(tuple(n["mean"]), tuple(n["var"]))
    items = [LabeledItem(r, int(bool(r.events)), r.frame_spans(), OracleDetector(r), r.source_id, f"s{i % 2}")
             for i, r in enumerate(corpus)]
    cfg = RunConfig(clip={"clip_len": 16, "size": 32}, scan={"viewpoints": 3})
    res = evaluate_dataset("t", items, [MotionOracle(), MotionOracle()], [1.0, 1.0], norm, cfg)
    assert all(r["f1"] == 1.0 for r in res["table2"])
    assert len(res["table3"]) == 3 * 3
