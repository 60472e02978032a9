"""Shared helpers for driving the CLI end to end from tests."""

import contextlib
import io
import json
from pathlib import Path

from clipscan.cli import main


def run_cli(*argv):
    """Run ``clipscan`` in-process; returns (exit code, printed run dir or None, stderr)."""
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        try:
            code = main([str(a) for a in argv])
        except SystemExit as exc:
            code = exc.code
    text = out.getvalue().strip().splitlines()
    return code, (Path(text[-1]) if text else None), err.getvalue()


def write_config(path, doc) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1))
    return path


def tree_bytes(root, exclude=("timing.json",)):
    root = Path(root)
    return {
        p.relative_to(root).as_posix(): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.name not in exclude
    }


def check(code, run_dir, err):
    assert code == 0, err
    return run_dir


def pipeline(root, base, synth, split_plan, train, eval_split="val", scan=None, test_synth=None):
    """synth -> split -> train -> eval -> (scan); returns the run directories.

    ``base`` holds the shared config keys (seed, clip, crop, ...). Each stage
    gets its own config file under ``root/cfg``.
    """
    root = Path(root)
    out = root / "runs"
    dirs = {}
    c = write_config(root / "cfg" / "synth.json", {**base, "out": str(out), "synth": synth})
    dirs["synth"] = check(*run_cli("synth", "--config", c))
    norm = str(dirs["synth"] / "norm.json")
    if test_synth is not None:
        c = write_config(root / "cfg" / "synth_test.json", {**base, "out": str(out / "test"), "synth": test_synth})
        dirs["synth_test"] = check(*run_cli("synth", "--config", c))
    c = write_config(root / "cfg" / "split.json", {
        **base, "out": str(out), "manifest": str(dirs["synth"] / "manifest.jsonl"), "split_plan": split_plan,
    })
    dirs["split"] = check(*run_cli("split", "--config", c))
    n = split_plan.get("n_splits", 3)
    splits = [str(dirs["split"] / f"split_{k}.jsonl") for k in range(n)]
    c = write_config(root / "cfg" / "train.json", {**base, "out": str(out), "norm": norm, "train": {**train, "splits": splits}})
    dirs["train"] = check(*run_cli("train", "--config", c))
    members = [{"model": str(dirs["train"] / f"model_split{k}.json")} for k in range(n)]
    datasets = {"val": {"manifest": splits[0], "split": eval_split}}
    if test_synth is not None:
        datasets = {"test": {"manifest": str(dirs["synth_test"] / "manifest.jsonl")}}
    c = write_config(root / "cfg" / "eval.json", {
        **base, "out": str(out), "norm": norm, "members": members, "eval": {"datasets": datasets},
    })
    dirs["eval"] = check(*run_cli("eval", "--config", c))
    dirs["members"] = members
    dirs["norm"] = norm
    if scan is not None:
        c = write_config(root / "cfg" / "scan.json", {
            **base, "out": str(out), "norm": norm, "members": members,
            "scan": {"recordings": str(dirs["synth"] / "manifest.jsonl"), **scan},
        })
        dirs["scan"] = check(*run_cli("scan", "--config", c))
    return dirs
