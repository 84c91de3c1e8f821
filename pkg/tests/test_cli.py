import csv
import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from hetbot.cli import main, parse_float_range
from hetbot.dataio import DatasetError, RunConfig, load_checkpoint, load_dataset, save_checkpoint
from hetbot.config import TrainConfig
from hetbot import numcore as nc


def write(path: Path, text: str):
    path.write_text(text.strip() + "\n")


@pytest.fixture
def mini(tmp_path):
    d = tmp_path / "mini"
    d.mkdir()
    write(d / "nodes.csv", "id,label\n0,0\n1,1\n2,-1")
    write(d / "edges.csv", "src,dst,relation\n0,1,follower\n1,2,follower")
    write(d / "features_numerical.csv", "id,f0,f1\n0,1.0,2.0\n1,0.5,0.0\n2,3,4")
    return d


def test_minimal_fixture(mini):
    ds = load_dataset(mini)
    assert ds.graph.relations == ("follower",)
    assert ds.graph.num_edges == 2
    assert ds.labels.tolist() == [0, 1, -1]
    assert ds.features.fused().shape == (3, 2)
    assert ds.splits is None


def test_dangling_endpoint_reports_line(mini):
    write(mini / "edges.csv", "src,dst,relation\n0,1,follower\n1,99,follower")
    with pytest.raises(DatasetError, match=r"edges.csv:3: .*99"):
        load_dataset(mini)


def test_duplicates_and_self_loops_dropped_and_counted(mini):
    write(mini / "edges.csv", "src,dst,relation\n0,1,follower\n1,0,follower\n2,2,friend\n0,1,friend")
    ds = load_dataset(mini)
    assert ds.report["dropped_duplicates"] == 1
    assert ds.report["dropped_self_loops"] == 1
    assert ds.graph.edges["friend"].tolist() == [[0, 1]]


def test_parse_errors_name_file_and_line(mini):
    write(mini / "features_numerical.csv", "id,f0,f1\n0,1.0,2.0\n1,abc,0.0\n2,3,4")
    with pytest.raises(DatasetError, match=r"features_numerical.csv:3: non-numeric feature 'abc'"):
        load_dataset(mini)
    write(mini / "features_numerical.csv", "id,f0\n0,1.0\n1,2.0")
    with pytest.raises(DatasetError, match="node count mismatch"):
        load_dataset(mini)
    write(mini / "nodes.csv", "id,label\n0,0\n0,1\n2,0")
    with pytest.raises(DatasetError, match=r"nodes.csv:3: duplicate node id"):
        load_dataset(mini)


def test_undeclared_relation_rejected(mini):
    with pytest.raises(DatasetError, match="undeclared relation 'follower'"):
        load_dataset(mini, relations=["friend"])
    ds = load_dataset(mini, relations=["follower", "friend"])
    assert ds.graph.relations == ("follower", "friend")


def test_split_column(mini):
    write(mini / "nodes.csv", "id,label,split\n0,0,train\n1,1,test\n2,-1,")
    ds = load_dataset(mini)
    assert ds.splits.train.tolist() == [0]
    assert ds.splits.test.tolist() == [1]


def test_run_config_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown config keys"):
        RunConfig.from_dict({"lr": 0.1})
    with pytest.raises(ValueError, match="unknown TrainConfig keys"):
        RunConfig.from_dict({"train": {"learning_rate": 0.1}})
    with pytest.raises(ValueError, match="unknown synth keys"):
        RunConfig.from_dict({"synth": {"nodes": 10}})
    cfg = RunConfig.from_dict({"train": {"hidden": 8, "heads": 2}, "synth": {"n_per_class": 9}})
    assert RunConfig.from_dict(cfg.to_dict()) == cfg


def test_checkpoint_round_trip(tmp_path):
    params = {"a": nc.Parameter(np.random.default_rng(0).normal(size=(3, 2))),
              "b": nc.Parameter(np.zeros((2,)))}
    cfg = TrainConfig(hidden=8, heads=2)
    save_checkpoint(tmp_path / "c.json", params, cfg, {"knn": [(0, 1)]}, {"seed": 3})
    loaded, cfg2, injected, meta = load_checkpoint(tmp_path / "c.json")
    assert cfg2 == cfg and meta == {"seed": 3}
    assert injected["knn"].tolist() == [[0, 1]]
    for k in params:
        assert loaded[k].data.tobytes() == params[k].data.tobytes()
    doc = json.loads((tmp_path / "c.json").read_text())
    assert doc["manifest"] == {"a": [3, 2], "b": [2]}


def test_float_range_parsing():
    assert parse_float_range("0.1:0.9:0.2") == [0.1, 0.3, 0.5, 0.7, 0.9]
    assert parse_float_range("0.2,0.4") == [0.2, 0.4]


# -- end-to-end commands ----------------------------------------------------

def digest(directory: Path) -> dict:
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(directory.iterdir())}


def test_usage_errors_exit_two(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["train", "--bogus"])
    assert exc.value.code == 2
    assert main(["analyze", "--out", str(tmp_path)]) == 2
    assert main(["train", "--config", "no-such-config", "--out", str(tmp_path)]) == 2


def test_data_errors_exit_nonzero(tmp_path, mini):
    write(mini / "edges.csv", "src,dst,relation\n0,7,follower")
    assert main(["analyze", "--data", str(mini), "--out", str(tmp_path / "a")]) == 1


def test_synth_then_analyze_band(tmp_path):
    data = tmp_path / "d"
    assert main(["synth", "--homophily", "0.2", "--seed", "1", "--out", str(data)]) == 0
    assert main(["analyze", "--data", str(data), "--out", str(tmp_path / "a")]) == 0
    doc = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert 0.15 <= doc["edge_homophily"] <= 0.25
    assert doc["schema_version"] == 1
    with open(tmp_path / "a" / "node_homophily_histogram.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4
    ds = load_dataset(data)
    non_isolated = int(np.sum(sum(ds.graph.degree.values()) > 0))
    assert sum(int(r["count"]) for r in rows) == non_isolated


def test_gradcheck_on_toy_config(tmp_path, capsys):
    assert main(["gradcheck", "--config", "toy", "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "summary.json").read_text())
    assert doc["max_rel_err"] <= 1e-4
    assert "PASS" in capsys.readouterr().out


def test_pipeline_is_deterministic_and_never_mutates_inputs(tmp_path):
    data = tmp_path / "d"
    assert main(["synth", "--config", "toy", "--out", str(data)]) == 0
    assert main(["perturb", "--data", str(data), "--target", "0.2", "--out",
                 str(tmp_path / "p")]) == 0
    before = digest(data)
    assert main(["augment", "--config", "toy", "--data", str(data), "--out",
                 str(tmp_path / "aug")]) == 0
    assert digest(data) == before
    aug_doc = json.loads((tmp_path / "aug" / "summary.json").read_text())
    assert set(aug_doc) >= {"k", "knn_edge_homophily", "combined_edge_homophily"}

    runs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        assert main(["train", "--config", "toy", "--data", str(tmp_path / "aug"), "--seed", "7",
                     "--out", str(out)]) == 0
        assert main(["export-attention", "--data", str(tmp_path / "aug"), "--checkpoint",
                     str(out / "checkpoint.json"), "--out", str(out)]) == 0
        runs.append(out)
    for artifact in ("metrics.json", "attention.csv", "checkpoint.json"):
        assert (runs[0] / artifact).read_bytes() == (runs[1] / artifact).read_bytes()
    metrics = json.loads((runs[0] / "metrics.json").read_text())
    assert set(metrics) == {"accuracy", "f1", "balanced_accuracy", "confusion", "epochs_ran",
                            "best_epoch", "seed", "variant", "schema_version"}
    assert metrics["seed"] == 7

    with open(runs[0] / "attention.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["src", "dst", "relation", "alpha_bar", "edge_kind"]
    assert {r["edge_kind"] for r in rows} <= {"homophilic", "heterophilic", "unknown"}
    assert all(-1.0 <= float(r["alpha_bar"]) <= 1.0 for r in rows)

    assert main(["evaluate", "--data", str(tmp_path / "aug"), "--checkpoint",
                 str(runs[0] / "checkpoint.json"), "--out", str(tmp_path / "ev")]) == 0
    ev = json.loads((tmp_path / "ev" / "evaluation.json").read_text())
    assert ev["accuracy"] == metrics["accuracy"]


def test_train_on_unaugmented_data_stores_injected_edges(tmp_path):
    data = tmp_path / "d"
    assert main(["synth", "--config", "toy", "--out", str(data)]) == 0
    out = tmp_path / "run"
    assert main(["train", "--config", "toy", "--data", str(data), "--out", str(out)]) == 0
    _, _, injected, _ = load_checkpoint(out / "checkpoint.json")
    assert list(injected) == ["knn"] and len(injected["knn"]) > 0
    assert main(["export-attention", "--data", str(data), "--checkpoint",
                 str(out / "checkpoint.json"), "--out", str(out)]) == 0
    with open(out / "attention.csv") as fh:
        relations = {r["relation"] for r in csv.DictReader(fh)}
    assert "knn" in relations


def test_sweeps_emit_long_format_csv(tmp_path):
    out = tmp_path / "sh"
    assert main(["train", "--config", "toy", "--sweep-homophily", "0.2:0.4:0.2", "--seeds", "2",
                 "--variants", "full,mean_pooling", "--out", str(out)]) == 0
    with open(out / "sweep_homophily.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 * 2 * 2
    assert {r["variant"] for r in rows} == {"full", "mean_pooling"}

    data = tmp_path / "d"
    assert main(["synth", "--config", "toy", "--out", str(data)]) == 0
    assert main(["augment", "--config", "toy", "--data", str(data), "--sweep-k", "1,2",
                 "--seeds", "2", "--out", str(tmp_path / "sk")]) == 0
    with open(tmp_path / "sk" / "sweep_k.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [(r["k"], r["seed"]) for r in rows] == [("1", "0"), ("1", "1"), ("2", "0"), ("2", "1")]
    assert main(["train", "--config", "toy", "--data", str(data), "--sweep-k", "1,2",
                 "--out", str(tmp_path / "tk")]) == 0
    with open(tmp_path / "tk" / "sweep_k.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 2
