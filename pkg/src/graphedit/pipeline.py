"""End-to-end experiment driver with content-addressed stage caching.

Stage keys chain: each stage hashes its own settings together with the keys of
the stages it consumes, so editing one setting only invalidates the stages
downstream of it. Node text and edges are keyed separately, which lets the
embeddings, the edge predictor and the LLM verdicts be reused across noise
rates.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import shutil
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np

from . import llm
from .datasets import DatasetManifest, SyntheticSpec, generate_synthetic, load_dataset, load_graph, save_graph
from .edge_predictor import (
    CandidateSet,
    EdgePredictorConfig,
    EdgePredictorModel,
    label_pairs,
    pairs_from_tsv,
    pairs_to_tsv,
    sample_pairs,
    top_k_candidates,
    train_edge_predictor,
)
from .embeddings import EmbeddingMatrix, HashedBowProvider, HttpEmbeddingProvider, embed_nodes
from .gcn import GcnConfig, train_gcn, train_mlp
from .graph import NodeSplit, TextGraph, graph_stats, inject_noise, normalize_adjacency, split_nodes
from .refinement import RefinedGraph, RefinementMode, VerdictCache, assemble_candidate_pool, refine, refinement_report

log = logging.getLogger(__name__)

CLASSIFIERS = ("gcn", "mlp", "llm")


class ConfigError(ValueError):
    pass


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


# Configuration ------------------------------------------------------------------

@dataclass
class EmbeddingConfig:
    provider: str = "hashed"
    d: int = 256
    seed: int = 0
    batch_size: int = 64
    retries: int = 3
    parallelism: int = 1
    timeout: float = 30.0


@dataclass
class BackendConfig:
    type: str = "oracle"
    flip_rate: float = 0.0
    category_error_rate: float = 0.0
    seed: int = 0
    parallelism: int = 1
    retries: int = 2
    max_tokens: int = 64
    timeout: float = 60.0


@dataclass
class ExperimentConfig:
    synthetic: Optional[SyntheticSpec] = field(default_factory=SyntheticSpec)
    manifest: Optional[str] = None
    noise_rate: float = 0.0
    noise_seed: int = 0
    split_ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0
    pairs: int = 20000
    with_category: bool = True
    export_instructions: bool = True
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    edge_predictor: EdgePredictorConfig = field(default_factory=EdgePredictorConfig)
    k: int = 3
    mode: RefinementMode = RefinementMode.FULL
    refine: bool = True
    refine_per_repeat: bool = False
    backend: BackendConfig = field(default_factory=BackendConfig)
    classifier: str = "gcn"
    features: str = "auto"
    gcn: GcnConfig = field(default_factory=GcnConfig)
    repeats: int = 10
    out: str = "runs/experiment"
    cache_dir: Optional[str] = None

    def __post_init__(self):
        self.mode = RefinementMode(self.mode)
        self.split_ratios = tuple(self.split_ratios)
        self.validate()

    def validate(self) -> None:
        if (self.synthetic is None) == (self.manifest is None):
            raise ConfigError("exactly one of 'synthetic' or 'manifest' must be set")
        if self.repeats < 1:
            raise ConfigError(f"repeats must be >= 1, got {self.repeats}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.pairs < 1:
            raise ConfigError(f"pairs must be >= 1, got {self.pairs}")
        if self.noise_rate < 0:
            raise ConfigError(f"noise_rate must be >= 0, got {self.noise_rate}")
        if self.classifier not in CLASSIFIERS:
            raise ConfigError(f"classifier must be one of {CLASSIFIERS}, got {self.classifier!r}")
        if self.features not in ("auto", "embedding"):
            raise ConfigError(f"features must be 'auto' or 'embedding', got {self.features!r}")
        if self.backend.type not in ("oracle", "http"):
            raise ConfigError(f"backend.type must be 'oracle' or 'http', got {self.backend.type!r}")
        if self.embedding.provider not in ("hashed", "http"):
            raise ConfigError(f"embedding.provider must be 'hashed' or 'http', got {self.embedding.provider!r}")
        if len(self.split_ratios) != 3 or abs(sum(self.split_ratios) - 1) > 1e-9:
            raise ConfigError(f"split_ratios must be three fractions summing to 1, got {self.split_ratios}")
        for name in ("flip_rate", "category_error_rate"):
            if not 0 <= getattr(self.backend, name) <= 1:
                raise ConfigError(f"backend.{name} must lie in [0, 1]")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["mode"] = self.mode.value
        out["split_ratios"] = list(self.split_ratios)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        nested = {
            "synthetic": SyntheticSpec,
            "embedding": EmbeddingConfig,
            "edge_predictor": EdgePredictorConfig,
            "backend": BackendConfig,
            "gcn": GcnConfig,
        }
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs: dict[str, Any] = {}
        for key, value in data.items():
            if key in nested and value is not None:
                sub_known = {f.name for f in fields(nested[key])}
                bad = set(value) - sub_known
                if bad:
                    raise ConfigError(f"unknown keys in '{key}': {sorted(bad)}")
                try:
                    value = nested[key](**value)
                except ValueError as exc:
                    raise ConfigError(f"invalid '{key}' section: {exc}") from exc
            kwargs[key] = value
        if "manifest" in data and data["manifest"] is not None and "synthetic" not in data:
            kwargs["synthetic"] = None
        try:
            return cls(**kwargs)
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)


def _digest(*parts: Any) -> str:
    blob = json.dumps(parts, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# Results --------------------------------------------------------------------------

@dataclass
class ExperimentResult:
    label: str
    config_hash: str
    accuracies: list[float]
    valid_accuracies: list[float]
    mean: float
    std: float
    refinement: Optional[dict] = None
    graph: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict, compare=False)

    @classmethod
    def from_runs(cls, label: str, config_hash: str, accuracies: Sequence[float],
                  valid: Sequence[float], **extra) -> "ExperimentResult":
        acc = [float(a) for a in accuracies]
        mean, std = summarize(acc)
        return cls(label, config_hash, acc, [float(v) for v in valid], mean, std, **extra)

    def to_json(self) -> str:
        """Canonical JSON; stage timings are kept out so reruns are byte-identical."""
        body = asdict(self)
        body.pop("timings")
        return json.dumps(body, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ExperimentResult":
        return cls(**json.loads(text))


def summarize(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (n - 1); a single value has std 0."""
    if len(values) == 0:
        raise ValueError("no values to summarize")
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


def format_mean_std(mean: float, std: float) -> str:
    return f"{100 * mean:.2f} ± {100 * std:.2f}"


def report(results: Sequence[ExperimentResult]) -> tuple[str, str]:
    """Human-readable table plus a JSON list carrying full precision."""
    if not results:
        raise ValueError("no results to report")
    width = max(len(r.label) for r in results)
    lines = [f"{'run':<{width}}  {'accuracy':>15}  repeats"]
    warnings = []
    for r in results:
        lines.append(f"{r.label:<{width}}  {format_mean_std(r.mean, r.std):>15}  {len(r.accuracies)}")
        if len(r.accuracies) == 1:
            warnings.append(f"warning: '{r.label}' is a single run; std shown as 0.00")
    text = "\n".join(lines + warnings) + "\n"
    payload = "[" + ",".join(r.to_json() for r in results) + "]\n"
    return text, payload


# Stage cache ----------------------------------------------------------------------

class StageCache:
    """Directory of stage artifacts named ``<stage>-<key>``; records hits and misses."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.events: list[tuple[str, str]] = []

    def path(self, stage: str, key: str, suffix: str = "") -> Path:
        return self.root / f"{stage}-{key}{suffix}"

    def get_or_compute(self, stage: str, key: str, suffix: str, compute: Callable[[], Any],
                       dump: Callable[[Any, Path], None], load: Callable[[Path], Any]) -> Any:
        target = self.path(stage, key, suffix)
        if target.exists():
            self.events.append((stage, "hit"))
            return load(target)
        self.events.append((stage, "miss"))
        value = compute()
        tmp = target.with_name(target.name + ".tmp")
        if tmp.exists():
            shutil.rmtree(tmp) if tmp.is_dir() else tmp.unlink()
        dump(value, tmp)
        tmp.rename(target)
        return value

    def misses(self) -> list[str]:
        return [stage for stage, kind in self.events if kind == "miss"]


# Backends and providers ---------------------------------------------------------------

def make_backend(cfg: ExperimentConfig):
    b = cfg.backend
    if b.type == "oracle":
        return llm.OracleBackend(llm.OracleConfig(b.flip_rate, b.category_error_rate, b.seed, cfg.with_category))
    return llm.HttpBackend.from_env(max_tokens=b.max_tokens, timeout=b.timeout)


def make_provider(cfg: ExperimentConfig):
    e = cfg.embedding
    if e.provider == "hashed":
        return HashedBowProvider(e.d, e.seed)
    url = os.environ.get("GRAPHEDIT_EMBEDDING_URL")
    if not url:
        raise ConfigError("set GRAPHEDIT_EMBEDDING_URL for the http embedding provider")
    return HttpEmbeddingProvider(url, e.batch_size, e.retries, e.timeout, os.environ.get(llm.TOKEN_ENV))


def _backend_identity(cfg: ExperimentConfig) -> dict:
    b = asdict(cfg.backend)
    for transient in ("parallelism", "retries", "timeout"):
        b.pop(transient)
    if cfg.backend.type == "http":
        # The URL is part of the identity but only as a digest.
        b["url_digest"] = _digest(os.environ.get(llm.URL_ENV, ""))
    b["with_category"] = cfg.with_category
    return b


# The pipeline --------------------------------------------------------------------------

def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _load_json(path: Path):
    return json.loads(path.read_text())


class Experiment:
    """Runs the stages of one configuration against a stage cache."""

    def __init__(self, cfg: ExperimentConfig, cache: Optional[StageCache] = None):
        self.cfg = cfg
        self.out = Path(cfg.out)
        self.cache = cache or StageCache(cfg.cache_dir or self.out / "cache")
        self.timings: dict[str, float] = {}

    def _stage(self, name: str, fn: Callable[[], Any]) -> Any:
        start = time.perf_counter()
        try:
            return fn()
        except PipelineError:
            raise
        except Exception as exc:
            raise PipelineError(name, exc) from exc
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - start

    # keys
    def nodes_key(self) -> str:
        cfg = self.cfg
        if cfg.synthetic is not None:
            return _digest("synthetic", asdict(cfg.synthetic))
        manifest = DatasetManifest.from_file(cfg.manifest)
        return _digest("manifest", _file_digest(Path(cfg.manifest)),
                       _file_digest(manifest.node_file), _file_digest(manifest.edge_file))

    def graph_key(self) -> str:
        return _digest(self.nodes_key(), self.cfg.noise_rate, self.cfg.noise_seed)

    def embedding_key(self) -> str:
        e = asdict(self.cfg.embedding)
        for transient in ("parallelism", "retries", "timeout"):
            e.pop(transient)
        return _digest(self.nodes_key(), e)

    def split_key(self, seed: int) -> str:
        return _digest(self.nodes_key(), list(self.cfg.split_ratios), seed)

    def pairs_key(self) -> str:
        return _digest(self.split_key(self.cfg.seed), self.cfg.pairs, self.cfg.seed)

    def model_key(self) -> str:
        ep = asdict(self.cfg.edge_predictor)
        ep.pop("score_chunk")
        return _digest(self.embedding_key(), self.pairs_key(), ep)

    def candidates_key(self) -> str:
        return _digest(self.model_key(), self.cfg.k)

    def refined_key(self) -> str:
        return _digest(self.graph_key(), self.candidates_key(), self.cfg.mode.value, _backend_identity(self.cfg))

    def classify_key(self) -> str:
        cfg = self.cfg
        structure = self.refined_key() if cfg.refine else self.graph_key()
        return _digest(structure, self.embedding_key(), list(cfg.split_ratios), cfg.seed, cfg.repeats,
                       cfg.classifier, cfg.features, asdict(cfg.gcn), cfg.refine,
                       _backend_identity(cfg) if cfg.classifier == "llm" else None)

    def config_hash(self) -> str:
        return self.classify_key()

    # stages
    def graph(self) -> TextGraph:
        def base():
            if self.cfg.synthetic is not None:
                return generate_synthetic(self.cfg.synthetic)
            return load_dataset(DatasetManifest.from_file(self.cfg.manifest))

        def build():
            g = self.cache.get_or_compute("nodes", self.nodes_key(), "", base, save_graph, load_graph)
            return inject_noise(g, self.cfg.noise_rate, self.cfg.noise_seed)

        return self._stage("data", lambda: self.cache.get_or_compute(
            "graph", self.graph_key(), "", build, save_graph, load_graph))

    def embeddings(self, g: TextGraph) -> EmbeddingMatrix:
        provider = make_provider(self.cfg)
        return self._stage("embed", lambda: self.cache.get_or_compute(
            "embeddings", self.embedding_key(), ".npz",
            lambda: embed_nodes(g, provider, self.cfg.embedding.parallelism),
            lambda e, p: e.save(p), EmbeddingMatrix.load))

    def split(self, g: TextGraph, seed: int) -> NodeSplit:
        return self._stage("split", lambda: self.cache.get_or_compute(
            "split", self.split_key(seed), ".json",
            lambda: split_nodes(g, self.cfg.split_ratios, seed),
            lambda s, p: _dump_json(s.to_dict(), p), lambda p: NodeSplit.from_dict(_load_json(p))))

    def pairs(self, g: TextGraph):
        def compute():
            split = self.split(g, self.cfg.seed)
            return label_pairs(sample_pairs(split.train, self.cfg.pairs, self.cfg.seed), g.labels)
        return self._stage("sample-pairs", lambda: self.cache.get_or_compute(
            "pairs", self.pairs_key(), ".tsv", compute,
            lambda ps, p: p.write_text(pairs_to_tsv(ps)), lambda p: pairs_from_tsv(p.read_text())))

    def edge_model(self, g: TextGraph, emb: EmbeddingMatrix) -> EdgePredictorModel:
        def compute():
            pairs = self.pairs(g)
            model, rep = train_edge_predictor(emb, pairs, self.cfg.edge_predictor)
            log.info("edge predictor: final loss %.4f, train accuracy %.3f", rep.final_loss, rep.train_accuracy)
            return model
        return self._stage("train-edge-predictor", lambda: self.cache.get_or_compute(
            "edge-model", self.model_key(), ".json", compute,
            lambda m, p: m.save(p), EdgePredictorModel.load))

    def candidates(self, g: TextGraph, emb: EmbeddingMatrix) -> CandidateSet:
        def compute():
            model = self.edge_model(g, emb)
            return top_k_candidates(model, emb, self.cfg.k, chunk=self.cfg.edge_predictor.score_chunk)
        return self._stage("candidates", lambda: self.cache.get_or_compute(
            "candidates", self.candidates_key(), ".tsv", compute,
            lambda c, p: p.write_text(c.to_tsv()), lambda p: CandidateSet.from_tsv(p.read_text(), g.n)))

    def refined(self, g: TextGraph, emb: EmbeddingMatrix) -> RefinedGraph:
        cfg = self.cfg

        def compute():
            cands = self.candidates(g, emb)
            pool = assemble_candidate_pool(g, cands, cfg.mode)
            verdict_cache = VerdictCache(self.cache.path(
                "verdicts", _digest(self.nodes_key(), _backend_identity(cfg)), ".jsonl"))
            backend = make_backend(cfg)
            try:
                return refine(g, pool, backend, cfg.backend.parallelism, cfg.mode,
                              cfg.backend.retries, cfg.with_category, verdict_cache)
            finally:
                if hasattr(backend, "close"):
                    backend.close()
        return self._stage("refine", lambda: self.cache.get_or_compute(
            "refined", self.refined_key(), "", compute, lambda r, p: r.save(p), RefinedGraph.load))

    def features(self, g: TextGraph, emb: EmbeddingMatrix) -> np.ndarray:
        if self.cfg.features == "auto" and g.has_features():
            return g.feature_matrix()
        return emb.vectors

    def classify(self, g: TextGraph, structure: TextGraph, X: np.ndarray) -> dict:
        cfg = self.cfg

        def compute():
            adj = normalize_adjacency(structure)
            labels = g.labels
            test, valid = [], []
            backend = make_backend(cfg) if cfg.classifier == "llm" else None
            for r in range(cfg.repeats):
                seed = cfg.seed + r
                split = split_nodes(g, cfg.split_ratios, seed)
                gcfg = replace(cfg.gcn, seed=seed)
                if cfg.classifier == "gcn":
                    rep = train_gcn(adj, X, labels, split, gcfg)[1]
                elif cfg.classifier == "mlp":
                    rep = train_mlp(X, labels, split, gcfg)
                else:
                    acc = llm.direct_accuracy(g, split.test, backend, cfg.backend.retries)
                    test.append(acc)
                    valid.append(llm.direct_accuracy(g, split.valid, backend, cfg.backend.retries))
                    continue
                test.append(rep.test_accuracy)
                valid.append(rep.best_valid_accuracy)
            return {"test": test, "valid": valid}
        return self._stage(f"train-{cfg.classifier}", lambda: self.cache.get_or_compute(
            "classify", self.classify_key(), ".json", compute, _dump_json, _load_json))

    def label(self) -> str:
        cfg = self.cfg
        parts = [cfg.classifier]
        if cfg.refine:
            parts.append(f"{cfg.mode.value} k={cfg.k}")
        else:
            parts.append("original")
        if cfg.noise_rate:
            parts.append(f"noise={cfg.noise_rate:g}")
        return " ".join(parts)

    def run(self) -> ExperimentResult:
        cfg = self.cfg
        self.out.mkdir(parents=True, exist_ok=True)
        if cfg.refine and cfg.refine_per_repeat and cfg.repeats > 1:
            return self._run_per_repeat()
        g = self.graph()
        emb = self.embeddings(g)
        structure = g
        refinement = None
        if cfg.export_instructions and cfg.refine:
            pairs = self.pairs(g)
            self._stage("export-instructions", lambda: llm.export_instruction_dataset(
                g, pairs, self.out / "instructions.jsonl", cfg.with_category))
        if cfg.refine:
            refined = self.refined(g, emb)
            refined.save(self.out / "refined")
            (self.out / "candidates.tsv").write_text(self.candidates(g, emb).to_tsv())
            structure = refined.apply(g)
            refinement = refinement_report(refined, g)
        X = self.features(g, emb)
        runs = self.classify(g, structure, X)
        result = ExperimentResult.from_runs(
            self.label(), self.config_hash(), runs["test"], runs["valid"],
            refinement=refinement,
            graph={"input": graph_stats(g), "used": graph_stats(structure)},
            timings=dict(self.timings),
        )
        return self._write(result)

    def _run_per_repeat(self) -> ExperimentResult:
        """Rebuild pairs, edge model, candidates and refined graph for every repeat seed."""
        cfg = self.cfg
        subs = []
        for r in range(cfg.repeats):
            sub_cfg = replace(cfg, seed=cfg.seed + r, repeats=1, refine_per_repeat=False,
                              export_instructions=cfg.export_instructions and r == 0,
                              out=str(self.out / f"repeat{r}"))
            sub = Experiment(sub_cfg, self.cache)
            subs.append(sub.run())
            for name, t in sub.timings.items():
                self.timings[name] = self.timings.get(name, 0.0) + t
        result = ExperimentResult.from_runs(
            self.label(), _digest([s.config_hash for s in subs]),
            [s.accuracies[0] for s in subs], [s.valid_accuracies[0] for s in subs],
            refinement={"per_repeat": [s.refinement for s in subs]},
            graph=subs[0].graph, timings=dict(self.timings),
        )
        return self._write(result)

    def _write(self, result: ExperimentResult) -> ExperimentResult:
        (self.out / "result.json").write_text(result.to_json())
        (self.out / "timings.json").write_text(json.dumps(result.timings, indent=2) + "\n")
        (self.out / "config.json").write_text(json.dumps(self.cfg.to_dict(), indent=2) + "\n")
        return result


def run_all(cfg: ExperimentConfig, cache: Optional[StageCache] = None) -> ExperimentResult:
    return Experiment(cfg, cache).run()


def _shared_cache(cfg: ExperimentConfig, cache: Optional[StageCache]) -> StageCache:
    return cache or StageCache(cfg.cache_dir or Path(cfg.out) / "cache")


def sweep_k(cfg: ExperimentConfig, k_values: Sequence[int], cache: Optional[StageCache] = None) -> list[dict]:
    """One run per k, sharing every other setting; writes ``sweep_k.csv`` to ``cfg.out``."""
    cache = _shared_cache(cfg, cache)
    rows = []
    for k in k_values:
        result = run_all(replace(cfg, k=k, out=str(Path(cfg.out) / f"k{k}")), cache)
        rows.append({"k": k, "mean": result.mean, "std": result.std})
    _write_csv(Path(cfg.out) / "sweep_k.csv", rows)
    return rows


def sweep_noise(cfg: ExperimentConfig, rates: Sequence[float], cache: Optional[StageCache] = None) -> list[dict]:
    """Refined and unrefined runs per noise rate; writes ``sweep_noise.csv`` to ``cfg.out``."""
    cache = _shared_cache(cfg, cache)
    rows = []
    for rate in rates:
        if rate < 0:
            raise ConfigError(f"noise rates must be >= 0, got {rate}")
        base = Path(cfg.out) / f"rate{rate:g}"
        refined = run_all(replace(cfg, noise_rate=rate, refine=True, out=str(base / "refined")), cache)
        plain = run_all(replace(cfg, noise_rate=rate, refine=False, out=str(base / "original")), cache)
        rows.append({
            "rate": rate,
            "refined_mean": refined.mean, "refined_std": refined.std,
            "unrefined_mean": plain.mean, "unrefined_std": plain.std,
        })
    _write_csv(Path(cfg.out) / "sweep_noise.csv", rows)
    return rows


def _write_csv(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    path.write_text(buf.getvalue())


def read_csv(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]
