"""Local-frame graph neural network potentials for molecules."""

from .data import Dataset, load_extxyz, read_extxyz, split_dataset, write_extxyz
from .geometry import MoleculeConf, NeighborGraph, build_neighbor_graph
from .model import GNNLF, ModelConfig
from .training import TrainConfig, evaluate_mae, train

__version__ = "0.1.0"

__all__ = [
    "GNNLF",
    "Dataset",
    "ModelConfig",
    "MoleculeConf",
    "NeighborGraph",
    "TrainConfig",
    "build_neighbor_graph",
    "evaluate_mae",
    "load_extxyz",
    "read_extxyz",
    "split_dataset",
    "train",
    "write_extxyz",
]
