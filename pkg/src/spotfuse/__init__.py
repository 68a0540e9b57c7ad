"""spotfuse: adaptive fusion of spatial multi-omics measurements.

Builds spatial and feature neighbourhood graphs per modality, encodes both
views with spline-augmented graph convolutions, aligns modalities with a
masked contrastive objective, fuses them through confidence-gated experts,
and reconstructs the inputs through a shared graph decoder. Ships with a
synthetic lattice generator, deterministic clustering metrics, and a CLI.
"""

from .data_io import (
    Corruption,
    SpotDataset,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    load_dataset_dir,
    pca_reduce,
    save_dataset,
)
from .errors import (
    AlignmentMismatchError,
    CheckpointError,
    ConfigurationError,
    DataValidationError,
    GraphStateError,
    SpotfuseError,
    TrainingError,
)
from .graph import GraphBundle, SparseAdjacency, build_graphs, knn_graph, normalize, spmm
from .neural import FusionModel, grad_check, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, embed, train

__version__ = "0.1.0"

__all__ = [
    "Corruption",
    "SpotDataset",
    "SyntheticSpec",
    "generate_synthetic",
    "load_dataset",
    "load_dataset_dir",
    "pca_reduce",
    "save_dataset",
    "SparseAdjacency",
    "GraphBundle",
    "build_graphs",
    "knn_graph",
    "normalize",
    "spmm",
    "FusionModel",
    "grad_check",
    "save_checkpoint",
    "load_checkpoint",
    "TrainConfig",
    "train",
    "embed",
    "SpotfuseError",
    "AlignmentMismatchError",
    "DataValidationError",
    "GraphStateError",
    "ConfigurationError",
    "TrainingError",
    "CheckpointError",
    "__version__",
]
