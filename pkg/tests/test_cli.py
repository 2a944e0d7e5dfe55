import csv
import json
import subprocess

import numpy as np
import pytest

from gctflow.cli import git_blob_sha1, run
from gctflow.dataio import FlowDataset, parse_timestamp, write_flows
from gctflow.graphs import SegmentGraph

T0 = parse_timestamp("2022-09-01T00:00:00Z")


def flows_file(path, flows):
    write_flows(path, FlowDataset(np.asarray(flows, dtype=float), 300, T0, list(range(flows.shape[1]))))
    return path


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def synth(out, *extra):
    return run(["synth", "--preset", "desk", "--days", "1", "--segments-count", "3", "--seed", "7",
                "--out-dir", str(out), *extra])


def test_synth_twice_byte_identical(tmp_path):
    assert synth(tmp_path / "a") == 0 and synth(tmp_path / "b") == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir() if p.name != "run-manifest.json")
    assert "records.csv" in names and "segments.csv" in names
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()


def test_manifest_replays(tmp_path):
    synth(tmp_path / "a")
    doc = json.loads((tmp_path / "a" / "run-manifest.json").read_text())
    assert doc["config"]["seed"] == 7 and doc["config"]["command"] == "synth"
    argv = [a if a != str(tmp_path / "a") else str(tmp_path / "b") for a in doc["argv"]]
    assert run(argv) == 0
    for p in doc["outputs"]:
        name = p.rsplit("/", 1)[-1]
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_exit_codes(tmp_path, capsys):
    assert run(["bogus"]) == 2
    assert run(["graph", "--no-such-flag"]) == 2
    assert run(["--help"]) == 0
    assert run(["graph", "--segments", str(tmp_path / "missing.csv"), "--out-dir", str(tmp_path)]) == 1
    assert "error" in capsys.readouterr().err


def test_ingest_graph_pipeline_and_hashes(tmp_path):
    synth(tmp_path / "s")
    seg, rec = tmp_path / "s" / "segments.csv", tmp_path / "s" / "records.csv"
    before = git_blob_sha1(rec)
    assert run(["ingest", "--records", str(rec), "--segments", str(seg), "--start", "2022-08-28T00:00:00Z",
                "--end", "2022-08-29T00:00:00Z", "--out-dir", str(tmp_path / "i")]) == 0
    assert git_blob_sha1(rec) == before
    counts = np.loadtxt(tmp_path / "s" / "intensity.csv", delimiter=",", skiprows=1, usecols=(2, 3, 4))
    flows = read_csv(tmp_path / "i" / "flows.csv")
    assert len(flows) == len(counts)
    doc = json.loads((tmp_path / "i" / "run-manifest.json").read_text())
    assert doc["inputs"][str(rec)] == before
    assert run(["graph", "--segments", str(seg), "--out-dir", str(tmp_path / "g")]) == 0
    assert SegmentGraph.from_json(tmp_path / "g" / "graph.json").n_nodes == 3


def test_blob_hash_matches_git(tmp_path):
    p = tmp_path / "x.txt"
    p.write_text("hello\n")
    try:
        want = subprocess.run(["git", "hash-object", str(p)], capture_output=True, text=True,
                              check=True).stdout.strip()
    except (OSError, subprocess.CalledProcessError):
        want = "ce013625030ba8dba906f756967f9e9ca394464a"
    assert git_blob_sha1(p) == want


def test_eval_naive_on_constant_series(tmp_path):
    f = flows_file(tmp_path / "flows.csv", np.full((3, 2, 300), 5.0))
    assert run(["eval", "--baseline", "naive", "--flows", str(f), "--out-dir", str(tmp_path / "e")]) == 0
    rows = read_csv(tmp_path / "e" / "eval_report.csv")
    assert [int(r["horizon"]) for r in rows] == [3, 6, 9, 12]
    assert all(float(r["mae"]) == 0.0 and float(r["rmse"]) == 0.0 for r in rows)


def test_eval_needs_one_source(tmp_path):
    f = flows_file(tmp_path / "flows.csv", np.full((3, 2, 300), 5.0))
    assert run(["eval", "--flows", str(f), "--out-dir", str(tmp_path)]) == 1


def tiny_setup(tmp_path):
    r = np.random.default_rng(0)
    f = flows_file(tmp_path / "flows.csv", r.poisson(6.0, (3, 3, 240)))
    g = tmp_path / "graph.json"
    SegmentGraph.from_adjacency(np.ones((3, 3))).to_json(g)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"channels": 4, "reduced_channels": 2, "skip_channels": 4, "batch_size": 64}))
    return f, g, cfg


def test_experiment_ablation_row_count(tmp_path):
    f, g, cfg = tiny_setup(tmp_path)
    out = tmp_path / "x"
    assert run(["experiment", "ablation", "--seeds", "3", "--flows", str(f), "--graph", str(g),
                "--config", str(cfg), "--epochs", "2", "--out-dir", str(out)]) == 0
    rows = read_csv(out / "ablation.csv")
    assert len(rows) == 4 * 3 * 4
    assert {r["variant"] for r in rows} == {"full", "w/o M", "w/o S", "w/o T"}
    assert {r["seed"] for r in rows} == {"0", "1", "2"}
    assert len(read_csv(out / "ablation_summary.csv")) == 4


def test_train_then_eval_checkpoint(tmp_path):
    f, g, cfg = tiny_setup(tmp_path)
    out = tmp_path / "t"
    assert run(["train", "--flows", str(f), "--graph", str(g), "--config", str(cfg), "--epochs", "2",
                "--ablate", "T", "--out-dir", str(out)]) == 0
    trained = read_csv(out / "test_report.csv")
    assert trained[0]["variant"] == "w/o T"
    assert len((out / "checkpoint" / "history.jsonl").read_text().splitlines()) == 2
    assert run(["eval", "--checkpoint", str(out / "checkpoint"), "--flows", str(f),
                "--out-dir", str(tmp_path / "e")]) == 0
    again = read_csv(tmp_path / "e" / "eval_report.csv")
    assert [r["mae"] for r in again] == [r["mae"] for r in trained]


def test_bad_config_key(tmp_path):
    f, g, _ = tiny_setup(tmp_path)
    bad = tmp_path / "bad.json"
    bad.write_text('{"colour": 1}')
    assert run(["train", "--flows", str(f), "--graph", str(g), "--config", str(bad),
                "--out-dir", str(tmp_path)]) == 1


def test_analyze_commands(tmp_path):
    f = flows_file(tmp_path / "flows.csv", np.random.default_rng(1).poisson(4.0, (3, 3, 288)))
    for kind in ("stats", "pearson", "subtracted"):
        assert run(["analyze", kind, "--flows", str(f), "--out-dir", str(tmp_path / kind)]) == 0
    assert read_csv(tmp_path / "stats" / "stats.csv")[0]["type"] == "V-GCT"
