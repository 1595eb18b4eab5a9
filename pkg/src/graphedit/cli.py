"""Command-line entry point: ``graphedit <subcommand> [options]``.

Every subcommand accepts the global flags (--config, --seed, --out, --backend,
--mode, --k, --repeats); a flag given on the command line overrides the
matching config field. Stage subcommands read and write plain files so a real
fine-tuned model can be slotted in between ``export-instructions`` and
``refine``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import llm
from .datasets import DatasetError, DatasetManifest, generate_synthetic, load_dataset, load_graph, save_graph
from .edge_predictor import (
    CandidateSet,
    EdgePredictorModel,
    label_pairs,
    pairs_from_tsv,
    pairs_to_tsv,
    sample_pairs,
    top_k_candidates,
    train_edge_predictor,
)
from .embeddings import EmbeddingMatrix, embed_nodes
from .gcn import train_gcn, train_mlp
from .graph import NodeSplit, ego_sample, graph_stats, normalize_adjacency, split_nodes, to_dot
from .pipeline import (
    ConfigError,
    ExperimentConfig,
    ExperimentResult,
    PipelineError,
    make_backend,
    make_provider,
    report,
    run_all,
    sweep_k,
    sweep_noise,
)
from .refinement import RefinedGraph, RefinementMode, assemble_candidate_pool, refine, refinement_report

log = logging.getLogger("graphedit")


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    if args.mode is not None:
        overrides["mode"] = RefinementMode(args.mode)
    if args.k is not None:
        overrides["k"] = args.k
    if args.repeats is not None:
        overrides["repeats"] = args.repeats
    if args.refine_per_repeat:
        overrides["refine_per_repeat"] = True
    if args.backend is not None:
        overrides["backend"] = replace(cfg.backend, type=args.backend)
    return replace(cfg, **overrides) if overrides else cfg


def _out(cfg: ExperimentConfig, name: str) -> Path:
    path = Path(cfg.out) / name
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2))


# Stage commands ------------------------------------------------------------------

def cmd_synth(args, cfg):
    if cfg.synthetic is None:
        raise ConfigError("config has no 'synthetic' section")
    g = generate_synthetic(cfg.synthetic)
    path = save_graph(g, _out(cfg, "graph"), name="synthetic")
    _print_json(graph_stats(g))
    print(f"wrote {path}")


def cmd_load(args, cfg):
    manifest = args.manifest or cfg.manifest
    if manifest is None:
        raise ConfigError("give --manifest or set 'manifest' in the config")
    m = DatasetManifest.from_file(manifest)
    g = load_dataset(m)
    path = save_graph(g, _out(cfg, "graph"), name=m.name)
    _print_json(graph_stats(g))
    print(f"wrote {path}")


def cmd_split(args, cfg):
    g = load_graph(args.graph)
    split = split_nodes(g, cfg.split_ratios, cfg.seed)
    path = _out(cfg, "split.json")
    path.write_text(json.dumps(split.to_dict()) + "\n")
    print(f"train/valid/test = {split.train.size}/{split.valid.size}/{split.test.size}; wrote {path}")


def _read_split(path) -> NodeSplit:
    return NodeSplit.from_dict(json.loads(Path(path).read_text()))


def cmd_sample_pairs(args, cfg):
    g = load_graph(args.graph)
    split = _read_split(args.split)
    m = args.pairs or cfg.pairs
    pairs = label_pairs(sample_pairs(split.train, m, cfg.seed), g.labels)
    path = _out(cfg, "pairs.tsv")
    path.write_text(pairs_to_tsv(pairs))
    positive = sum(p.y for p in pairs)
    print(f"{len(pairs)} pairs ({positive} same-class); wrote {path}")


def cmd_export_instructions(args, cfg):
    g = load_graph(args.graph)
    pairs = pairs_from_tsv(Path(args.pairs).read_text())
    with_category = cfg.with_category and not args.no_category
    path = _out(cfg, "instructions.jsonl")
    count = llm.export_instruction_dataset(g, pairs, path, with_category)
    print(f"wrote {count} instructions to {path}")


def cmd_embed(args, cfg):
    g = load_graph(args.graph)
    emb = embed_nodes(g, make_provider(cfg), cfg.embedding.parallelism)
    path = _out(cfg, "embeddings.npz")
    emb.save(path)
    print(f"embedded {emb.n} nodes (d={emb.d}, {emb.provider_id}); wrote {path}")


def cmd_train_edge_predictor(args, cfg):
    emb = EmbeddingMatrix.load(args.embeddings)
    pairs = pairs_from_tsv(Path(args.pairs).read_text())
    model, rep = train_edge_predictor(emb, pairs, cfg.edge_predictor)
    path = _out(cfg, "edge_model.json")
    model.save(path)
    print(f"final loss {rep.final_loss:.4f}, train accuracy {rep.train_accuracy:.4f}; wrote {path}")


def cmd_candidates(args, cfg):
    emb = EmbeddingMatrix.load(args.embeddings)
    model = EdgePredictorModel.load(args.model)
    cands = top_k_candidates(model, emb, cfg.k)
    path = _out(cfg, "candidates.tsv")
    path.write_text(cands.to_tsv())
    print(f"{len(cands.edges())} distinct candidate edges (k={cfg.k}); wrote {path}")


def cmd_refine(args, cfg):
    g = load_graph(args.graph)
    cands = CandidateSet.from_tsv(Path(args.candidates).read_text(), g.n)
    pool = assemble_candidate_pool(g, cands, cfg.mode)
    backend = make_backend(cfg)
    refined = refine(g, pool, backend, cfg.backend.parallelism, cfg.mode, cfg.backend.retries, cfg.with_category)
    path = refined.save(_out(cfg, "refined"))
    _print_json(refinement_report(refined, g))
    print(f"wrote {path}")


def _structure(args, g):
    if getattr(args, "refined", None):
        return RefinedGraph.load(args.refined).apply(g)
    return g


def _features(cfg, g, args):
    if cfg.features == "auto" and g.has_features():
        return g.feature_matrix()
    return EmbeddingMatrix.load(args.embeddings).vectors


def _write_train_report(cfg, rep, name):
    path = _out(cfg, f"{name}_report.json")
    path.write_text(rep.to_json() + "\n")
    _out(cfg, f"{name}_loss.csv").write_text(rep.loss_csv())
    print(f"best valid {rep.best_valid_accuracy:.4f}, test {rep.test_accuracy:.4f} "
          f"after {rep.epochs_run} epochs; wrote {path}")


def cmd_train_gcn(args, cfg):
    g = load_graph(args.graph)
    split = _read_split(args.split)
    structure = _structure(args, g)
    gcfg = replace(cfg.gcn, seed=cfg.seed)
    _, rep = train_gcn(normalize_adjacency(structure), _features(cfg, g, args), g.labels, split, gcfg)
    _write_train_report(cfg, rep, "gcn")


def cmd_train_mlp(args, cfg):
    g = load_graph(args.graph)
    split = _read_split(args.split)
    rep = train_mlp(_features(cfg, g, args), g.labels, split, replace(cfg.gcn, seed=cfg.seed))
    _write_train_report(cfg, rep, "mlp")


# Experiment commands ------------------------------------------------------------------

def cmd_run_all(args, cfg):
    result = run_all(cfg)
    text, _ = report([result])
    print(text, end="")
    print(f"results in {cfg.out}")


def _float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _print_rows(rows):
    if rows:
        keys = list(rows[0])
        print("\t".join(keys))
        for row in rows:
            print("\t".join(f"{row[k]:.4f}" if isinstance(row[k], float) else str(row[k]) for k in keys))


def cmd_sweep_k(args, cfg):
    ks = [int(x) for x in _float_list(args.k_values)]
    _print_rows(sweep_k(cfg, ks))


def cmd_sweep_noise(args, cfg):
    _print_rows(sweep_noise(cfg, _float_list(args.rates)))


def cmd_report(args, cfg):
    results = []
    for path in args.results:
        text = Path(path).read_text()
        data = json.loads(text)
        if isinstance(data, list):
            results.extend(ExperimentResult(**d) for d in data)
        else:
            results.append(ExperimentResult.from_json(text))
    table, payload = report(results)
    print(table, end="")
    if args.json:
        Path(args.json).write_text(payload)


def cmd_to_dot(args, cfg):
    g = load_graph(args.graph)
    if args.nodes:
        subset = {int(x) for x in args.nodes.split(",") if x.strip()}
    else:
        subset = ego_sample(g, args.centers, cfg.seed)
    refined = RefinedGraph.load(args.refined) if args.refined else None
    text = to_dot(g, subset, refined)
    path = _out(cfg, "graph.dot")
    path.write_text(text)
    print(f"{len(subset)} nodes; wrote {path}")


# Parser --------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--backend", choices=["oracle", "http"])
    common.add_argument("--mode", choices=[m.value for m in RefinementMode])
    common.add_argument("--k", type=int)
    common.add_argument("--repeats", type=int)
    common.add_argument("--refine-per-repeat", action="store_true",
                        help="rebuild the refined structure for every repeat seed")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="graphedit", description="LLM-screened graph structure refinement")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(func=fn)
        return p

    add("synth", cmd_synth, "generate a synthetic planted-partition graph")
    p = add("load", cmd_load, "load a dataset through a manifest")
    p.add_argument("--manifest")
    p = add("split", cmd_split, "split nodes into train/valid/test")
    p.add_argument("--graph", required=True)
    p = add("sample-pairs", cmd_sample_pairs, "sample and label training node pairs")
    p.add_argument("--graph", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--pairs", type=int)
    p = add("export-instructions", cmd_export_instructions, "write the instruction-tuning JSONL")
    p.add_argument("--graph", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--no-category", action="store_true", help="bare True/False answers")
    p = add("embed", cmd_embed, "embed node text")
    p.add_argument("--graph", required=True)
    p = add("train-edge-predictor", cmd_train_edge_predictor, "fit the pair scorer")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--pairs", required=True)
    p = add("candidates", cmd_candidates, "top-k candidate edges per node")
    p.add_argument("--model", required=True)
    p.add_argument("--embeddings", required=True)
    p = add("refine", cmd_refine, "screen original and candidate edges")
    p.add_argument("--graph", required=True)
    p.add_argument("--candidates", required=True)
    for name, fn in (("train-gcn", cmd_train_gcn), ("train-mlp", cmd_train_mlp)):
        p = add(name, fn, f"train the {name.split('-')[1].upper()} node classifier")
        p.add_argument("--graph", required=True)
        p.add_argument("--split", required=True)
        p.add_argument("--embeddings")
        if name == "train-gcn":
            p.add_argument("--refined", help="refined graph directory to train on")
    add("run-all", cmd_run_all, "run the whole pipeline")
    p = add("sweep-k", cmd_sweep_k, "run the pipeline for several k")
    p.add_argument("--k-values", default="1,2,3,4,5")
    p = add("sweep-noise", cmd_sweep_noise, "refined vs unrefined across noise rates")
    p.add_argument("--rates", default="0.05,0.1,0.15,0.2,0.25")
    p = add("report", cmd_report, "tabulate result JSON files")
    p.add_argument("results", nargs="+")
    p.add_argument("--json", help="also write the combined JSON here")
    p = add("to-dot", cmd_to_dot, "export a subgraph as DOT")
    p.add_argument("--graph", required=True)
    p.add_argument("--refined")
    p.add_argument("--nodes", help="comma-separated node ids")
    p.add_argument("--centers", type=int, default=20, help="ego-sample this many centers")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        if args.command in ("train-gcn", "train-mlp") and args.embeddings is None:
            g = load_graph(args.graph)
            if not (cfg.features == "auto" and g.has_features()):
                parser.error("--embeddings is required when the graph has no numeric features")
        args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DatasetError, llm.BackendError, llm.BackendUnavailable, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
