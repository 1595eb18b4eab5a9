import json
import subprocess
import sys

import pytest

from graphedit.cli import build_parser, load_config, main
from graphedit.pipeline import ExperimentResult
from graphedit.refinement import RefinementMode

SUBCOMMANDS = ["synth", "load", "split", "sample-pairs", "export-instructions", "embed", "train-edge-predictor",
               "candidates", "refine", "train-gcn", "train-mlp", "run-all", "sweep-k", "sweep-noise", "report",
               "to-dot"]


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({
        "synthetic": {"n": 60, "p_in": 0.2, "p_out": 0.03, "seed": 1},
        "pairs": 400,
        "embedding": {"d": 64},
        "edge_predictor": {"hidden": 16, "epochs": 3},
        "gcn": {"hidden": 16, "epochs": 30, "patience": 10},
        "repeats": 2,
    }))
    return path


def test_every_subcommand_is_registered():
    parser = build_parser()
    for name in SUBCOMMANDS:
        assert parser.parse_args(_minimal_args(name)).command == name


def _minimal_args(name):
    required = {
        "split": ["--graph", "g"], "sample-pairs": ["--graph", "g", "--split", "s"],
        "export-instructions": ["--graph", "g", "--pairs", "p"], "embed": ["--graph", "g"],
        "train-edge-predictor": ["--embeddings", "e", "--pairs", "p"],
        "candidates": ["--model", "m", "--embeddings", "e"], "refine": ["--graph", "g", "--candidates", "c"],
        "train-gcn": ["--graph", "g", "--split", "s"], "train-mlp": ["--graph", "g", "--split", "s"],
        "report": ["r.json"], "to-dot": ["--graph", "g"],
    }
    return [name, *required.get(name, [])]


def test_flags_override_config(config):
    args = build_parser().parse_args(["run-all", "--config", str(config), "--seed", "7", "--k", "5",
                                      "--mode", "no-del", "--repeats", "4", "--backend", "http", "--out", "x"])
    cfg = load_config(args)
    assert (cfg.seed, cfg.k, cfg.mode, cfg.repeats, cfg.backend.type, cfg.out) == \
        (7, 5, RefinementMode.NO_DEL, 4, "http", "x")
    assert cfg.pairs == 400


def test_stage_commands_end_to_end(tmp_path, config, capsys):
    out = str(tmp_path / "o")
    common = ["--config", str(config), "--out", out]
    assert main(["synth", *common]) == 0
    assert main(["split", "--graph", f"{out}/graph", *common]) == 0
    assert main(["sample-pairs", "--graph", f"{out}/graph", "--split", f"{out}/split.json", *common]) == 0
    assert main(["export-instructions", "--graph", f"{out}/graph", "--pairs", f"{out}/pairs.tsv", *common]) == 0
    assert main(["embed", "--graph", f"{out}/graph", *common]) == 0
    assert main(["train-edge-predictor", "--embeddings", f"{out}/embeddings.npz", "--pairs", f"{out}/pairs.tsv",
                 *common]) == 0
    assert main(["candidates", "--model", f"{out}/edge_model.json", "--embeddings", f"{out}/embeddings.npz",
                 "--k", "2", *common]) == 0
    assert main(["refine", "--graph", f"{out}/graph", "--candidates", f"{out}/candidates.tsv", *common]) == 0
    assert main(["train-gcn", "--graph", f"{out}/graph", "--split", f"{out}/split.json", "--embeddings",
                 f"{out}/embeddings.npz", "--refined", f"{out}/refined", *common]) == 0
    assert main(["train-mlp", "--graph", f"{out}/graph", "--split", f"{out}/split.json", "--embeddings",
                 f"{out}/embeddings.npz", *common]) == 0
    assert main(["to-dot", "--graph", f"{out}/graph", "--refined", f"{out}/refined", "--centers", "2", *common]) == 0
    lines = (tmp_path / "o" / "instructions.jsonl").read_text().splitlines()
    assert len(lines) == 400
    assert (tmp_path / "o" / "graph.dot").read_text().startswith("graph G {")
    report = json.loads((tmp_path / "o" / "gcn_report.json").read_text())
    assert 0 <= report["test_accuracy"] <= 1
    assert "wrote" in capsys.readouterr().out


def test_run_all_and_report(tmp_path, config, capsys):
    out = tmp_path / "r"
    assert main(["run-all", "--config", str(config), "--out", str(out)]) == 0
    assert main(["report", str(out / "result.json"), "--json", str(tmp_path / "all.json")]) == 0
    text = capsys.readouterr().out
    assert "±" in text and "gcn full k=3" in text
    combined = json.loads((tmp_path / "all.json").read_text())
    assert ExperimentResult(**combined[0]) == ExperimentResult.from_json((out / "result.json").read_text())
    assert main(["report", str(tmp_path / "all.json")]) == 0


def test_sweeps(tmp_path, config, capsys):
    out = tmp_path / "s"
    assert main(["sweep-k", "--config", str(config), "--out", str(out), "--k-values", "1,2", "--repeats", "1"]) == 0
    assert main(["sweep-noise", "--config", str(config), "--out", str(out), "--rates", "0.1", "--repeats", "1"]) == 0
    assert (out / "sweep_k.csv").read_text().splitlines()[0] == "k,mean,std"
    assert (out / "sweep_noise.csv").exists()
    assert "rate" in capsys.readouterr().out


def test_errors_return_nonzero(tmp_path, capsys):
    assert main(["run-all", "--config", str(tmp_path / "nope.json")]) == 2
    assert main(["split", "--graph", str(tmp_path / "missing")]) == 1
    assert main(["load", "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "config error" in err and "error:" in err


def test_train_gcn_requires_embeddings_without_features(tmp_path, config):
    out = str(tmp_path / "o")
    main(["synth", "--config", str(config), "--out", out])
    main(["split", "--graph", f"{out}/graph", "--out", out])
    with pytest.raises(SystemExit):
        main(["train-gcn", "--graph", f"{out}/graph", "--split", f"{out}/split.json", "--out", out])


def test_load_subcommand(tmp_path, config):
    out = str(tmp_path / "o")
    main(["synth", "--config", str(config), "--out", out])
    (tmp_path / "o" / "graph" / "manifest.json").write_text(json.dumps({
        "name": "copy", "node_file": "nodes.jsonl", "edge_file": "edges.tsv",
        "categories": ["Topic 0", "Topic 1", "Topic 2"]}))
    assert main(["load", "--manifest", f"{out}/graph/manifest.json", "--out", str(tmp_path / "copy")]) == 0
    assert (tmp_path / "copy" / "graph" / "edges.tsv").read_text() == (tmp_path / "o" / "graph" / "edges.tsv").read_text()


def test_console_script_help():
    proc = subprocess.run([sys.executable, "-m", "graphedit.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for name in SUBCOMMANDS:
        assert name in proc.stdout
