import json
import re
from pathlib import Path

import pytest

from toolplan.cli import main
from toolplan.datagen import read_corpus
from toolplan.graph import load_graph, validate_trajectory


TRAIN_CONFIG = {
    "model": {"hidden_dim": 16, "num_layers": 2, "num_heads": 2, "max_context": 192, "seed": 3},
    "train": {
        "epochs_sub": 1, "epochs_edge": 1, "epochs_sft": 2, "epochs_distill": 1,
        "batch_size_sub": 8, "batch_size_edge": 8, "batch_size_sft": 8,
        "batch_size_distill": 8, "path_corpus_size": 16, "lam": 0.7, "seed": 5,
        "edge": {"neg_ratio": 2, "projection_dim": 8},
    },
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Graph + corpus + one tiny trained run, shared across CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-graph", "--tools", "6", "--edges", "18", "--seed", "2",
                 "--out", str(root / "graph")]) == 0
    graph_path = str(root / "graph" / "graph.json")
    assert main(["gen-data", "--graph", graph_path, "--n-train", "24", "--n-val", "8",
                 "--n-test", "8", "--max-len", "3", "--seed", "5",
                 "--out", str(root / "data")]) == 0
    cfg_path = root / "train_config.json"
    cfg_path.write_text(json.dumps(TRAIN_CONFIG))
    assert main(["train", "--config", str(cfg_path), "--graph", graph_path,
                 "--train-data", str(root / "data" / "train.jsonl"),
                 "--val-data", str(root / "data" / "val.jsonl"),
                 "--out", str(root / "run")]) == 0
    return root


def test_gen_graph_outputs(workdir):
    graph = load_graph((workdir / "graph" / "graph.json").read_text())
    assert graph.num_tools == 6 and len(graph.edges) == 18
    manifest = json.loads((workdir / "graph" / "manifest.json").read_text())
    assert manifest["command"] == "gen-graph"
    assert manifest["config"]["tools"] == 6
    assert "config_sha256" in manifest


def test_gen_graph_is_deterministic(tmp_path):
    for d in ("a", "b"):
        assert main(["gen-graph", "--tools", "5", "--edges", "10", "--seed", "9",
                     "--out", str(tmp_path / d)]) == 0
    assert (tmp_path / "a" / "graph.json").read_bytes() == (tmp_path / "b" / "graph.json").read_bytes()
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()


def test_gen_data_outputs(workdir):
    graph = load_graph((workdir / "graph" / "graph.json").read_text())
    train = read_corpus(workdir / "data" / "train.jsonl", graph)
    val = read_corpus(workdir / "data" / "val.jsonl", graph)
    test = read_corpus(workdir / "data" / "test.jsonl", graph)
    assert (len(train), len(val), len(test)) == (24, 8, 8)


def test_train_outputs(workdir):
    for i in range(1, 5):
        assert (workdir / "run" / f"stage{i}" / "final.ckpt").exists()
    assert (workdir / "run" / "vocab.json").exists()
    reports = [
        json.loads(line)
        for line in (workdir / "run" / "stage_reports.jsonl").read_text().splitlines()
    ]
    assert [r["stage"] for r in reports] == ["grounding", "edge", "sft", "distill"]
    assert all("wall_time" not in r for r in reports)
    timings = json.loads((workdir / "run" / "timings.json").read_text())
    assert set(timings) == {"grounding", "edge", "sft", "distill"}
    manifest = json.loads((workdir / "run" / "manifest.json").read_text())
    assert manifest["config"]["train"]["lam"] == 0.7


def test_eval_greedy(workdir, tmp_path):
    rc = main([
        "eval", "--checkpoint", str(workdir / "run" / "stage4" / "final.ckpt"),
        "--graph", str(workdir / "graph" / "graph.json"),
        "--vocab", str(workdir / "run" / "vocab.json"),
        "--data", str(workdir / "data" / "test.jsonl"),
        "--mode", "greedy", "--out", str(tmp_path / "eval"),
    ])
    assert rc == 0
    report = json.loads((tmp_path / "eval" / "report.json").read_text())
    assert 0.0 <= report["em"] <= 1.0
    assert report["hallucination_ratio"] == 0.0
    preds = [
        json.loads(line)
        for line in (tmp_path / "eval" / "predictions.jsonl").read_text().splitlines()
    ]
    assert len(preds) == 8
    assert set(preds[0]) == {"id", "pred", "gold", "halluc", "gen"}


def test_eval_graph_masked_has_perfect_elr(workdir, tmp_path):
    rc = main([
        "eval", "--checkpoint", str(workdir / "run" / "stage4" / "final.ckpt"),
        "--graph", str(workdir / "graph" / "graph.json"),
        "--vocab", str(workdir / "run" / "vocab.json"),
        "--data", str(workdir / "data" / "test.jsonl"),
        "--mode", "graph-masked", "--out", str(tmp_path / "eval"),
    ])
    assert rc == 0
    report = json.loads((tmp_path / "eval" / "report.json").read_text())
    assert report["elr"] == 1.0


def test_eval_never_mutates_checkpoint(workdir, tmp_path):
    ckpt = workdir / "run" / "stage4" / "final.ckpt"
    before = ckpt.read_bytes()
    main([
        "eval", "--checkpoint", str(ckpt),
        "--graph", str(workdir / "graph" / "graph.json"),
        "--vocab", str(workdir / "run" / "vocab.json"),
        "--data", str(workdir / "data" / "test.jsonl"),
        "--out", str(tmp_path / "eval"),
    ])
    assert ckpt.read_bytes() == before


def test_plan_prints_only_tool_tokens(workdir, capsys):
    graph = load_graph((workdir / "graph" / "graph.json").read_text())
    sample_query = f"First use {graph.name_of(0)}."
    rc = main([
        "plan", "--checkpoint", str(workdir / "run" / "stage4" / "final.ckpt"),
        "--graph", str(workdir / "graph" / "graph.json"),
        "--vocab", str(workdir / "run" / "vocab.json"),
        "--query", sample_query,
    ])
    assert rc == 0
    out = capsys.readouterr().out.strip()
    assert re.fullmatch(r"(<[A-Za-z0-9_]+>)*", out)


def test_sample_paths(workdir, tmp_path):
    rc = main([
        "sample-paths", "--graph", str(workdir / "graph" / "graph.json"),
        "--n", "50", "--max-len", "3", "--seed", "4", "--out", str(tmp_path / "paths"),
    ])
    assert rc == 0
    graph = load_graph((workdir / "graph" / "graph.json").read_text())
    lines = (tmp_path / "paths" / "paths.jsonl").read_text().splitlines()
    assert len(lines) == 50
    for line in lines:
        nodes = [graph.id_of(n) for n in json.loads(line)["nodes"]]
        assert validate_trajectory(graph, nodes)


def test_unknown_override_key_is_config_error(workdir, tmp_path):
    cfg_path = workdir / "train_config.json"
    rc = main([
        "train", "--config", str(cfg_path),
        "--set", "train.learning_rate=0.1",
        "--graph", str(workdir / "graph" / "graph.json"),
        "--train-data", str(workdir / "data" / "train.jsonl"),
        "--out", str(tmp_path / "x"),
    ])
    assert rc == 2


def test_override_applies(workdir, tmp_path):
    cfg_path = workdir / "train_config.json"
    rc = main([
        "train", "--config", str(cfg_path),
        "--set", "train.epochs_sft=0", "--set", "train.epochs_distill=0",
        "--set", "train.epochs_sub=0", "--set", "train.epochs_edge=0",
        "--graph", str(workdir / "graph" / "graph.json"),
        "--train-data", str(workdir / "data" / "train.jsonl"),
        "--out", str(tmp_path / "skip"),
    ])
    assert rc == 0
    manifest = json.loads((tmp_path / "skip" / "manifest.json").read_text())
    assert manifest["config"]["train"]["epochs_sft"] == 0


def test_missing_file_is_data_error(tmp_path):
    rc = main(["gen-data", "--graph", str(tmp_path / "nope.json"),
               "--out", str(tmp_path / "d")])
    assert rc == 3


def test_vocab_mismatch_is_data_error(workdir, tmp_path):
    # a vocab built for a different graph cannot load this checkpoint
    assert main(["gen-graph", "--tools", "4", "--edges", "6", "--seed", "1",
                 "--out", str(tmp_path / "g2")]) == 0
    assert main(["gen-data", "--graph", str(tmp_path / "g2" / "graph.json"),
                 "--n-train", "8", "--n-val", "0", "--n-test", "0", "--max-len", "2",
                 "--seed", "1", "--out", str(tmp_path / "d2")]) == 0
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "model": TRAIN_CONFIG["model"],
        "train": {**TRAIN_CONFIG["train"], "epochs_sub": 0, "epochs_edge": 0,
                  "epochs_sft": 0, "epochs_distill": 0},
    }))
    assert main(["train", "--config", str(cfg), "--graph", str(tmp_path / "g2" / "graph.json"),
                 "--train-data", str(tmp_path / "d2" / "train.jsonl"),
                 "--out", str(tmp_path / "run2")]) == 0
    rc = main([
        "eval", "--checkpoint", str(tmp_path / "run2" / "stage4" / "final.ckpt"),
        "--graph", str(workdir / "graph" / "graph.json"),
        "--vocab", str(workdir / "run" / "vocab.json"),
        "--data", str(workdir / "data" / "test.jsonl"),
        "--out", str(tmp_path / "e2"),
    ])
    assert rc == 3


def test_infeasible_graph_is_config_error(tmp_path):
    rc = main(["gen-graph", "--tools", "3", "--edges", "99", "--out", str(tmp_path / "g")])
    assert rc == 2


def test_gradcheck_passes(tmp_path, capsys):
    rc = main(["gradcheck", "--coords", "40", "--out", str(tmp_path / "gc")])
    assert rc == 0
    out = capsys.readouterr().out
    assert "max_rel_err" in out
    results = json.loads((tmp_path / "gc" / "gradcheck.json").read_text())
    assert all(v < 1e-4 for v in results.values())


def test_gradcheck_fails_with_exit_4(capsys):
    rc = main(["gradcheck", "--coords", "10", "--tolerance", "1e-12"])
    assert rc == 4
