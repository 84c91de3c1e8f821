"""Heterophily-aware detection of disguised social bots on relational graphs."""

from .config import TrainConfig
from .graph import FeatureSet, HeteroGraph, SynthConfig, synth_graph
from .train import ablation_run, make_splits, train_model

__version__ = "0.1.0"

__all__ = ["FeatureSet", "HeteroGraph", "SynthConfig", "TrainConfig", "ablation_run",
           "make_splits", "synth_graph", "train_model"]
