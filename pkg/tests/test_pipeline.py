import json
from dataclasses import replace

import numpy as np
import pytest

from graphedit import llm
from graphedit.datasets import SyntheticSpec, generate_synthetic, save_graph
from graphedit.edge_predictor import EdgePredictorConfig
from graphedit.gcn import GcnConfig
from graphedit.graph import NodeRecord, build_graph
from graphedit.pipeline import (
    BackendConfig,
    ConfigError,
    EmbeddingConfig,
    Experiment,
    ExperimentConfig,
    ExperimentResult,
    PipelineError,
    StageCache,
    format_mean_std,
    read_csv,
    report,
    run_all,
    summarize,
    sweep_k,
    sweep_noise,
)
from graphedit.refinement import RefinementMode

from conftest import json_server


def small_config(tmp_path, **overrides):
    base = ExperimentConfig(
        synthetic=SyntheticSpec(n=60, p_in=0.2, p_out=0.03, seed=1),
        pairs=600,
        embedding=EmbeddingConfig(d=64),
        edge_predictor=EdgePredictorConfig(hidden=16, epochs=3),
        gcn=GcnConfig(hidden=16, epochs=40, patience=10),
        repeats=2,
        out=str(tmp_path / "run"),
        cache_dir=str(tmp_path / "cache"),
    )
    return replace(base, **overrides)


def test_format_mean_std():
    assert format_mean_std(0.9090, 0.0116) == "90.90 ± 1.16"


def test_summarize_sample_std():
    mean, std = summarize([0.8, 0.9, 1.0])
    assert mean == pytest.approx(0.9) and std == pytest.approx(0.1)
    assert summarize([0.5]) == (0.5, 0.0)
    with pytest.raises(ValueError):
        summarize([])


def test_report_table_and_single_run_warning():
    one = ExperimentResult.from_runs("solo", "h", [0.75], [0.7])
    many = ExperimentResult.from_runs("many", "h", [0.9, 0.92], [0.8, 0.81])
    text, payload = report([one, many])
    assert "75.00 ± 0.00" in text and "single run" in text
    parsed = [ExperimentResult(**d) for d in json.loads(payload)]
    assert parsed == [one, many]
    with pytest.raises(ValueError):
        report([])


def test_result_json_roundtrip_excludes_timings():
    r = ExperimentResult.from_runs("x", "abc", [0.1, 0.2], [0.3, 0.4], refinement={"a": 1},
                                   graph={"nodes": 3}, timings={"train": 1.5})
    text = r.to_json()
    assert "timings" not in json.loads(text)
    assert ExperimentResult.from_json(text) == r


def test_config_dict_roundtrip(tmp_path):
    cfg = small_config(tmp_path, mode=RefinementMode.NO_DEL, k=4)
    back = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back == cfg


def test_config_file_and_validation(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"k": 2, "mode": "no-add", "gcn": {"hidden": 8}}))
    cfg = ExperimentConfig.from_file(path)
    assert cfg.k == 2 and cfg.mode is RefinementMode.NO_ADD and cfg.gcn.hidden == 8
    for bad in ({"bogus": 1}, {"gcn": {"nope": 2}}, {"repeats": 0}, {"k": 0}, {"classifier": "svm"},
                {"split_ratios": [0.5, 0.5, 0.5]}, {"backend": {"flip_rate": 2}},
                {"synthetic": {"p_in": 0.01, "p_out": 0.5}}):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(bad)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_file(tmp_path / "missing.json")


def test_run_all_artifacts_and_repeat_count(tmp_path):
    cfg = small_config(tmp_path, repeats=3)
    result = run_all(cfg)
    assert len(result.accuracies) == len(result.valid_accuracies) == 3
    out = tmp_path / "run"
    for name in ("result.json", "timings.json", "config.json", "instructions.jsonl", "candidates.tsv",
                 "refined/edges.tsv", "refined/refinement.json"):
        assert (out / name).exists(), name
    assert len((out / "instructions.jsonl").read_text().splitlines()) == 600
    assert ExperimentResult.from_json((out / "result.json").read_text()) == result
    assert result.refinement["inter_edges_after"] == 0
    assert set(json.loads((out / "timings.json").read_text())) >= {"data", "embed", "refine", "train-gcn"}


def test_cache_hits_on_rerun_and_invalidates_downstream_only(tmp_path):
    cfg = small_config(tmp_path)
    cache = StageCache(tmp_path / "cache")
    first = run_all(cfg, cache)
    assert set(cache.misses()) >= {"graph", "embeddings", "edge-model", "candidates", "refined", "classify"}

    cache = StageCache(tmp_path / "cache")
    again = run_all(replace(cfg, out=str(tmp_path / "run2")), cache)
    assert cache.misses() == [] and again == first

    cache = StageCache(tmp_path / "cache")
    run_all(replace(cfg, k=2), cache)
    assert set(cache.misses()) == {"candidates", "refined", "classify"}

    cache = StageCache(tmp_path / "cache")
    run_all(replace(cfg, gcn=replace(cfg.gcn, lr=0.02)), cache)
    assert cache.misses() == ["classify"]

    cache = StageCache(tmp_path / "cache")
    run_all(replace(cfg, noise_rate=0.1), cache)
    # Embeddings, edge model and candidates depend on node text only.
    assert set(cache.misses()) == {"graph", "refined", "classify"}


def test_identical_config_identical_result(tmp_path):
    a = run_all(small_config(tmp_path, out=str(tmp_path / "a"), cache_dir=None))
    b = run_all(small_config(tmp_path, out=str(tmp_path / "b"), cache_dir=None))
    assert a == b
    assert (tmp_path / "a" / "result.json").read_bytes() == (tmp_path / "b" / "result.json").read_bytes()


def test_unrefined_and_mlp_and_llm_classifiers(tmp_path):
    plain = run_all(small_config(tmp_path, refine=False, out=str(tmp_path / "p")))
    assert plain.refinement is None and plain.label.startswith("gcn original")
    mlp = run_all(small_config(tmp_path, refine=False, classifier="mlp", out=str(tmp_path / "m")))
    assert mlp.label.startswith("mlp")
    direct = run_all(small_config(tmp_path, refine=False, classifier="llm", out=str(tmp_path / "l")))
    assert direct.accuracies == [1.0, 1.0]


def test_refine_per_repeat(tmp_path):
    cfg = small_config(tmp_path, refine_per_repeat=True, repeats=2)
    result = run_all(cfg)
    assert len(result.accuracies) == 2
    assert len(result.refinement["per_repeat"]) == 2
    assert (tmp_path / "run" / "repeat1" / "result.json").exists()


def test_sweep_k_single_and_csv(tmp_path):
    cfg = small_config(tmp_path)
    rows = sweep_k(cfg, [2])
    assert len(rows) == 1 and rows[0]["k"] == 2
    table = read_csv(tmp_path / "run" / "sweep_k.csv")
    assert table == [{"k": 2.0, "mean": rows[0]["mean"], "std": rows[0]["std"]}]


def test_sweep_noise_rate_zero_matches_base(tmp_path):
    cfg = small_config(tmp_path)
    rows = sweep_noise(cfg, [0.0, 0.2])
    base = run_all(replace(cfg, out=str(tmp_path / "base")))
    plain = run_all(replace(cfg, refine=False, out=str(tmp_path / "plain")))
    assert rows[0]["refined_mean"] == base.mean and rows[0]["unrefined_mean"] == plain.mean
    assert [r["rate"] for r in read_csv(tmp_path / "run" / "sweep_noise.csv")] == [0.0, 0.2]
    with pytest.raises(ConfigError):
        sweep_noise(cfg, [-0.1])


def test_stage_failure_names_stage(tmp_path, monkeypatch):
    cfg = small_config(tmp_path, backend=BackendConfig(type="http"))
    monkeypatch.delenv(llm.URL_ENV, raising=False)
    with pytest.raises(PipelineError) as info:
        run_all(cfg)
    assert info.value.stage == "refine"
    # Upstream artifacts persist for debugging.
    assert any(p.name.startswith("candidates-") for p in (tmp_path / "cache").iterdir())


def test_http_backend_run_keeps_url_and_token_out_of_results(tmp_path, monkeypatch):
    def handler(body):
        return 200, {"text": "True"}

    with json_server(handler) as (url, calls):
        monkeypatch.setenv(llm.URL_ENV, url)
        monkeypatch.setenv(llm.TOKEN_ENV, "very-secret-token")
        cfg = small_config(tmp_path, backend=BackendConfig(type="http"), repeats=1)
        run_all(cfg)
    assert calls and calls[0][1]["Authorization"] == "Bearer very-secret-token"
    for path in (tmp_path / "run").rglob("*"):
        if path.is_file():
            text = path.read_text(errors="ignore")
            assert "very-secret-token" not in text and url not in text, path


def test_manifest_dataset_with_features(tmp_path):
    g = generate_synthetic(SyntheticSpec(n=45, p_in=0.3, p_out=0.02, seed=2))
    onehot = np.eye(3)
    nodes = [NodeRecord(n.id, n.title, n.abstract, n.label, tuple(onehot[n.label] + 0.1 * (n.id % 2)))
             for n in g.nodes]
    save_graph(build_graph(nodes, g.edges, g.category_names), tmp_path / "ds", name="feat")
    manifest = tmp_path / "ds" / "manifest.json"
    manifest.write_text(json.dumps({"name": "feat", "node_file": "nodes.jsonl", "edge_file": "edges.tsv",
                                    "categories": list(g.category_names), "feature_dim": 3}))
    cfg = small_config(tmp_path, synthetic=None, manifest=str(manifest), repeats=1, refine=False)
    exp = Experiment(cfg)
    graph = exp.graph()
    assert exp.features(graph, exp.embeddings(graph)).shape == (45, 3)
    assert run_all(cfg).accuracies[0] > 0.9
