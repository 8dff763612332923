"""Tree-based extreme multi-label classification with ensemble uncertainty
quantification: hierarchical label trees over sparse linear node models,
beam-search inference, ensemble generation, and label/instance uncertainty."""

__version__ = "0.1.0"

from .errors import DataError, FormatError, InvariantError, StorageError, TreexmcError
from .sparse import SparseMatrix, SparseVector, l2_normalize_rows, spmv
from .data import Dataset, dump_xmc_text, load_xmc_text
from .tree import LabelEmbedding, TreeTopology, build_tree, layer_candidates, pifa_embeddings
from .ranker import (
    LayerWeights,
    NegativeSamplingPlan,
    induce_layer_targets,
    node_probability,
    prune_weights,
    train_layer,
)
from .model import TreeModel, load_tree_model, save_tree_model, train_tree_model

__all__ = [
    "DataError",
    "Dataset",
    "FormatError",
    "InvariantError",
    "LabelEmbedding",
    "LayerWeights",
    "NegativeSamplingPlan",
    "SparseMatrix",
    "SparseVector",
    "StorageError",
    "TreeModel",
    "TreeTopology",
    "TreexmcError",
    "build_tree",
    "dump_xmc_text",
    "induce_layer_targets",
    "l2_normalize_rows",
    "layer_candidates",
    "load_tree_model",
    "load_xmc_text",
    "node_probability",
    "pifa_embeddings",
    "prune_weights",
    "save_tree_model",
    "spmv",
    "train_layer",
    "train_tree_model",
]
