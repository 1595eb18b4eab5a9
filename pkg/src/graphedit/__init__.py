"""Graph structure refinement with pairwise LLM verdicts and a GCN downstream."""

from .datasets import SyntheticSpec, generate_synthetic, load_dataset, load_graph, save_graph
from .graph import NodeRecord, NodeSplit, TextGraph, build_graph, inject_noise, normalize_adjacency, split_nodes
from .pipeline import ExperimentConfig, ExperimentResult, StageCache, run_all, sweep_k, sweep_noise
from .refinement import RefinementMode, refine

__all__ = [
    "ExperimentConfig", "ExperimentResult", "NodeRecord", "NodeSplit", "RefinementMode",
    "StageCache", "SyntheticSpec", "TextGraph", "build_graph", "generate_synthetic",
    "inject_noise", "load_dataset", "load_graph", "normalize_adjacency", "refine",
    "run_all", "save_graph", "split_nodes", "sweep_k", "sweep_noise",
]

__version__ = "0.1.0"
