"""One trained tree model: topology, per-layer weights, training pipeline,
and directory persistence (meta.json + per-layer binary matrices)."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import InvariantError, StorageError
from .sparse import SparseMatrix
from .data import Dataset
from .tree import TreeTopology, pifa_embeddings, build_tree
from .ranker import (
    LayerWeights,
    NegativeSamplingPlan,
    augment_features,
    induce_layer_targets,
    prune_weights,
    root_targets,
    train_layer,
)
from .storage import load_matrix, load_meta, save_matrix, save_meta


@dataclass
class TreeModel:
    """Hierarchy of cluster assignments plus one weight matrix per layer."""

    topology: TreeTopology
    layers: list  # LayerWeights, one per layer t = 1..depth
    n_features: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.layers) != self.topology.depth:
            raise InvariantError("one weight matrix required per tree layer")
        for t, lw in enumerate(self.layers, start=1):
            if lw.matrix.rows != self.topology.layer_sizes[t - 1]:
                raise InvariantError(f"layer {t} weight rows != layer size")
            if lw.matrix.cols != self.n_features + 1:
                raise InvariantError(f"layer {t} weight cols != n_features + 1")

    @property
    def depth(self) -> int:
        return self.topology.depth

    @property
    def n_labels(self) -> int:
        return self.topology.n_labels

    def weights(self, t: int) -> SparseMatrix:
        return self.layers[t - 1].matrix


def train_tree_model(data: Dataset, branching: int = 8, max_leaf: int = 100,
                     reg_c: float = 1.0, prune_threshold: float = 1e-3,
                     solver_tol: float = 1e-4, max_epochs: int = 100,
                     seed: int = 0, normalize: bool = True,
                     plan: NegativeSamplingPlan = None,
                     extra_meta: dict = None) -> TreeModel:
    """Full pipeline: normalize, embed labels, build the tree, then train
    layer by layer with teacher-forcing (and any planned hard negatives)."""
    t_start = time.perf_counter()
    if plan is None:
        plan = NegativeSamplingPlan()
    plan.validate_against(data)
    if normalize:
        data = data.with_normalized_features()
    ss = np.random.SeedSequence(seed)
    tree_seed, solver_seed = ss.spawn(2)

    emb = pifa_embeddings(data)
    topology = build_tree(
        emb, branching=branching, max_leaf=max_leaf,
        seed=tree_seed.generate_state(1)[0],
    )

    x_aug = augment_features(data.features)
    layers = []
    parent_targets = root_targets(data.n)
    solver_seed_int = int(solver_seed.generate_state(1)[0])
    for t in range(1, topology.depth + 1):
        targets = induce_layer_targets(data, topology, t)
        lw = train_layer(
            data, topology, t, targets, parent_targets, plan,
            reg_c=reg_c, tol=solver_tol, max_epochs=max_epochs,
            prune_threshold=prune_threshold, seed=solver_seed_int, x_aug=x_aug,
        )
        layers.append(lw)
        parent_targets = targets

    meta = {
        "kind": "tree_model",
        "version": __version__,
        "n_features": data.n_features,
        "n_labels": data.n_labels,
        "depth": topology.depth,
        "layer_sizes": [int(k) for k in topology.layer_sizes],
        "branching": branching,
        "max_leaf": max_leaf,
        "reg_c": reg_c,
        "prune_threshold": prune_threshold,
        "solver_tol": solver_tol,
        "max_epochs": max_epochs,
        "seed": int(seed),
        "features_l2_normalized": bool(normalize),
        "negative_mode": plan.mode,
        "zero_positive_nodes": int(sum(lw.zero_positive_nodes for lw in layers)),
        "zero_embedding_labels": int(emb.zero_rows.size),
        "train_seconds": round(time.perf_counter() - t_start, 3),
    }
    if extra_meta:
        meta.update(extra_meta)
    return TreeModel(topology, layers, data.n_features, meta)


def prune_model(model: TreeModel, threshold: float) -> TreeModel:
    layers = [prune_weights(lw, threshold) for lw in model.layers]
    meta = dict(model.meta)
    meta["prune_threshold"] = threshold
    return TreeModel(model.topology, layers, model.n_features, meta)


def save_tree_model(model: TreeModel, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = dict(model.meta)
    meta.setdefault("kind", "tree_model")
    meta["depth"] = model.depth
    meta["layer_sizes"] = [int(k) for k in model.topology.layer_sizes]
    meta["branching"] = model.topology.branching
    meta["n_features"] = model.n_features
    meta["n_labels"] = model.n_labels
    # training meta never contains wall-clock noise that breaks reproducibility
    meta.pop("train_seconds", None)
    save_meta(meta, d / "meta.json")
    for t in range(1, model.depth + 1):
        save_matrix(model.topology.indexing_matrix(t), d / f"C_{t}.bin")
        save_matrix(model.weights(t), d / f"W_{t}.bin")


def load_tree_model(directory) -> TreeModel:
    d = Path(directory)
    meta = load_meta(d / "meta.json")
    if meta.get("kind") != "tree_model":
        raise StorageError(f"{d} is not a tree model directory")
    depth = int(meta["depth"])
    indexing = [load_matrix(d / f"C_{t}.bin") for t in range(1, depth + 1)]
    topology = TreeTopology.from_indexing_matrices(indexing, int(meta["branching"]))
    layers = [
        LayerWeights(t, load_matrix(d / f"W_{t}.bin"))
        for t in range(1, depth + 1)
    ]
    return TreeModel(topology, layers, int(meta["n_features"]), meta)
