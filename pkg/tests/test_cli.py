import csv
import io
import json

import pytest

from xmcl.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "gen.json").write_text(json.dumps(dict(pairs_per_category=20, image_dim=12, text_dim=16, latent_dim=4)))
    (root / "train.json").write_text(json.dumps(dict(hidden_dim=64, embed_dim=4, epochs=2)))
    return root


def test_end_to_end(workspace, capsys):
    w = workspace
    code, out, _ = run(capsys, "gen", "--config", str(w / "gen.json"), "--out-dir", str(w / "data"))
    assert code == 0 and len(json.loads(out)["data_hash"]) == 64

    code, out, _ = run(capsys, "train", "--data", str(w / "data"), "--config", str(w / "train.json"),
                       "--out-dir", str(w / "run"))
    assert code == 0
    assert [r["phase"] for r in csv.DictReader(io.StringIO(out))] == ["1", "2", "3"]

    code, out, _ = run(capsys, "index", "--data", str(w / "data"), "--run", str(w / "run"),
                       "--out-dir", str(w / "idx"), "--format", "json")
    assert code == 0 and json.loads(out)[0]["tasks"] == "1 2 3"

    index = str(w / "idx" / "index_no-reindex.xmix")
    code, out, _ = run(capsys, "query", "--data", str(w / "data"), "--run", str(w / "run"), "--index", index,
                       "--query-id", "0", "--k", "4")
    ranks = list(csv.DictReader(io.StringIO(out)))
    assert code == 0 and [r["rank"] for r in ranks] == ["1", "2", "3", "4"]
    dists = [float(r["distance"]) for r in ranks]
    assert dists == sorted(dists)

    code, out, _ = run(capsys, "eval", "--data", str(w / "data"), "--run", str(w / "run"), "--index", index,
                       "--k", "10", "--format", "json")
    rows = json.loads(out)
    assert code == 0 and len(rows) == 2 * (3 + 3 + 1)

    code, out, _ = run(capsys, "diagnose", "--data", str(w / "data"), "--run", str(w / "run"), "--index", index)
    assert code == 0 and len(list(csv.DictReader(io.StringIO(out)))) == 3


def test_grid_writes_tables(workspace, capsys):
    conf = {"train": {"hidden_dim": 64, "embed_dim": 4, "epochs": 1}, "repetitions": 1, "k_values": [10],
            "cells": [{"variant": "ft", "policies": ["no-reindex"]}],
            "synthetic": {"pairs_per_category": 10, "image_dim": 12, "text_dim": 16, "latent_dim": 4}}
    path = workspace / "grid.json"
    path.write_text(json.dumps(conf))
    code, _, _ = run(capsys, "grid", "--config", str(path), "--out-dir", str(workspace / "grid"))
    assert code == 0
    names = sorted(p.name for p in (workspace / "grid").iterdir())
    assert names == ["history.csv", "results.csv", "results.json", "summary.csv"]


def test_errors_exit_with_status_two(workspace, capsys):
    code, _, err = run(capsys, "train", "--data", str(workspace / "missing"), "--out-dir", str(workspace / "x"))
    assert code == 2 and err.startswith("error:")
    bad = workspace / "bad.json"
    bad.write_text(json.dumps({"cells": [{"variant": "SI"}]}))
    code, _, err = run(capsys, "grid", "--config", str(bad), "--out-dir", str(workspace / "y"))
    assert code == 2 and "SI" in err


def test_flags_override_config_file(workspace, capsys, tmp_path):
    code, _, _ = run(capsys, "gen", "--config", str(workspace / "gen.json"), "--out-dir", str(tmp_path / "d"))
    assert code == 0
    code, _, _ = run(capsys, "train", "--data", str(tmp_path / "d"), "--config", str(workspace / "train.json"),
                     "--out-dir", str(tmp_path / "r"), "--epochs", "1", "--regularizer", "MAS",
                     "--lambda3", "0", "--select-best-epoch", "false", "--seed", "4")
    assert code == 0
    cfg = json.loads((tmp_path / "r" / "run.json").read_text())["config"]
    assert (cfg["epochs"], cfg["regularizer"], cfg["reg"]["lambda3"], cfg["select_best_epoch"], cfg["seed"]) == (
        1, "MAS", 0.0, False, 4)
    assert cfg["hidden_dim"] == 64  # from the config file
