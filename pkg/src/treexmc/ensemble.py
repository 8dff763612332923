"""Ensemble generation and combined prediction.

Bagging members retrain the whole pipeline (label embedding, tree, layers)
on with-replacement resamples. Boosting trains members sequentially: the
running probability mixture (weight alpha on the newest member) scores the
training data, and each instance's top false-positive labels are injected
as extra leaf-layer negatives for the next member. Boosted bagging does the
same on per-member bootstrap resamples. MC-dropout members share one base
model with stored weights randomly zeroed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import InvariantError, StorageError
from .sparse import SparseMatrix
from .data import Dataset
from .ranker import LayerWeights, NegativeSamplingPlan
from .model import TreeModel, load_tree_model, save_tree_model, train_tree_model
from .inference import beam_search, beam_search_batch
from .storage import load_meta, save_meta

SCHEMES = ("single", "bagging", "boosting", "boosted-bagging", "mc-dropout")


@dataclass
class BoostState:
    """Running mixture over boosted members: newest gets weight alpha, the
    accumulated mass scales by (1 - alpha)."""

    alpha: float
    weights: list = field(default_factory=list)

    def push(self) -> None:
        if not self.weights:
            self.weights = [1.0]
        else:
            self.weights = [w * (1.0 - self.alpha) for w in self.weights]
            self.weights.append(self.alpha)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.weights)


@dataclass
class EnsembleModel:
    members: list
    scheme: str = "single"
    alpha: float = 0.5
    k_hard: int = 10
    seeds: list = field(default_factory=list)
    weights: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise InvariantError(f"unknown ensemble scheme {self.scheme!r}")
        if not self.members:
            raise InvariantError("ensemble needs at least one member")
        if not 0.0 <= self.alpha <= 1.0:
            raise InvariantError("alpha must lie in [0, 1]")
        dims = {m.n_features for m in self.members}
        labs = {m.n_labels for m in self.members}
        if len(dims) != 1 or len(labs) != 1:
            raise InvariantError("members must share feature and label spaces")
        if self.weights is None:
            self.weights = np.full(len(self.members), 1.0 / len(self.members))
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.size != len(self.members) or np.any(self.weights < 0):
            raise InvariantError("bad member mixture weights")
        if abs(float(self.weights.sum()) - 1.0) > 1e-9:
            raise InvariantError("member mixture weights must sum to 1")

    @property
    def n_members(self) -> int:
        return len(self.members)

    @property
    def n_labels(self) -> int:
        return self.members[0].n_labels

    @property
    def n_features(self) -> int:
        return self.members[0].n_features


def bootstrap_rows(n: int, seed: int) -> np.ndarray:
    """With-replacement resample of size n."""
    return np.random.default_rng(seed).integers(0, n, size=n)


def _member_seeds(m: int, seeds) -> list:
    if seeds is None:
        seeds = list(range(m))
    seeds = [int(s) for s in seeds]
    if len(seeds) < m:
        raise InvariantError(f"need {m} seeds, got {len(seeds)}")
    return seeds[:m]


def combine_results(results, weights, n_labels: int, delta: float):
    """Union the members' retrieved labels and mix their probabilities.

    Probabilities for labels a member did not retrieve are imputed as delta.
    Returns (union label ids ascending, per-member prob matrix, mixed probs).
    """
    union = np.unique(np.concatenate([r.labels for r in results]))
    probs = np.full((union.size, len(results)), float(delta))
    for j, r in enumerate(results):
        pos = np.searchsorted(union, r.labels)
        probs[pos, j] = np.maximum(r.probs, delta)
    mixed = probs @ np.asarray(weights)
    return union, probs, mixed


def ensemble_predict(ens: EnsembleModel, x, beam_width: int, top_k: int,
                     delta: float = 1e-8):
    """Run every member's beam search and mix the retrieved probabilities.

    Returns (per-member BeamResult list, (labels, mixed probs) sorted by
    mixed probability descending with ascending-id ties)."""
    member_results = [beam_search(m, x, beam_width, top_k) for m in ens.members]
    union, _probs, mixed = combine_results(
        member_results, ens.weights, ens.n_labels, delta
    )
    order = np.lexsort((union, -mixed))[:top_k]
    return member_results, (union[order], mixed[order])


def _hard_negative_plan(data: Dataset, member_results_per_model, weights,
                        k_hard: int, delta: float, source: str) -> NegativeSamplingPlan:
    """Top false-positive predictions of the combined predictor, per instance."""
    truth = data.true_label_sets()
    per_instance = []
    n = data.n
    for i in range(n):
        results = [per_model[i] for per_model in member_results_per_model]
        union, _probs, mixed = combine_results(results, weights, data.n_labels, delta)
        order = np.lexsort((union, -mixed))
        true_set = set(int(t) for t in truth[i])
        hard = []
        for j in order:
            lab = int(union[j])
            if lab not in true_set:
                hard.append((lab, source))
                if len(hard) == k_hard:
                    break
        per_instance.append(hard)
    return NegativeSamplingPlan("hard-augmented", per_instance)


def train_bagging(data: Dataset, m_members: int = 10, seeds=None,
                  **train_kwargs) -> EnsembleModel:
    """Independent members, each trained end-to-end on its own bootstrap."""
    if m_members < 1:
        raise InvariantError("M must be >= 1")
    seeds = _member_seeds(m_members, seeds)
    members = []
    for s in seeds:
        sub = data.select(bootstrap_rows(data.n, s))
        members.append(train_tree_model(sub, seed=s, **train_kwargs))
    return EnsembleModel(
        members, scheme="bagging", seeds=seeds,
        meta={"scheme": "bagging", "M": m_members},
    )


def train_boosting(data: Dataset, m_members: int = 10, alpha: float = 0.5,
                   k_hard: int = 10, seeds=None, beam_width: int = 50,
                   top_k: int = 100, delta: float = 1e-8, threads: int = 1,
                   bootstrap: bool = False, **train_kwargs) -> EnsembleModel:
    """Sequential members; from the second on, each trains against the hard
    negatives mined from the running mixture. With bootstrap=True this is
    boosted bagging: each member resamples its own data and mines hard
    negatives from the mixture applied to that resample."""
    if m_members < 1:
        raise InvariantError("M must be >= 1")
    if not 0.0 <= alpha <= 1.0:
        raise InvariantError("alpha must lie in [0, 1]")
    seeds = _member_seeds(m_members, seeds)
    state = BoostState(alpha)
    members = []
    cached = []  # per member: BeamResult list on the full training data
    for m_idx, s in enumerate(seeds):
        train_data = data.select(bootstrap_rows(data.n, s)) if bootstrap else data
        if m_idx == 0:
            plan = NegativeSamplingPlan()
        else:
            weights = state.as_array()
            if bootstrap:
                per_model = [
                    beam_search_batch(mm, train_data.features, beam_width, top_k,
                                      threads=threads)
                    for mm in members
                ]
            else:
                cached.append(
                    beam_search_batch(members[-1], data.features, beam_width,
                                      top_k, threads=threads)
                )
                per_model = cached
            plan = _hard_negative_plan(
                train_data, per_model, weights, k_hard, delta,
                source=f"mixture<{m_idx}",
            )
        members.append(train_tree_model(train_data, seed=s, plan=plan, **train_kwargs))
        state.push()
    scheme = "boosted-bagging" if bootstrap else "boosting"
    return EnsembleModel(
        members, scheme=scheme, alpha=alpha, k_hard=k_hard, seeds=seeds,
        weights=state.as_array(),
        meta={"scheme": scheme, "M": m_members, "alpha": alpha, "k_hard": k_hard},
    )


def train_boosted_bagging(data: Dataset, m_members: int = 10, alpha: float = 0.5,
                          k_hard: int = 10, seeds=None, **kwargs) -> EnsembleModel:
    return train_boosting(
        data, m_members, alpha=alpha, k_hard=k_hard, seeds=seeds,
        bootstrap=True, **kwargs,
    )


def mc_dropout_members(base: TreeModel, m_members: int = 10, rate: float = 0.05,
                       seeds=None) -> EnsembleModel:
    """Members sharing the base topology, each with stored weights
    independently zeroed with probability `rate`."""
    if not 0.0 <= rate < 1.0:
        raise InvariantError("dropout rate must lie in [0, 1)")
    seeds = _member_seeds(m_members, seeds)
    members = []
    for s in seeds:
        rng = np.random.default_rng(s)
        layers = []
        for lw in base.layers:
            m = lw.matrix
            values = m.values.copy()
            if rate > 0 and values.size:
                values[rng.random(values.size) < rate] = 0.0
            layers.append(LayerWeights(
                lw.layer,
                SparseMatrix(m.rows, m.cols, m.indptr, m.indices, values),
                lw.zero_positive_nodes,
            ))
        meta = dict(base.meta)
        meta["dropout_rate"] = rate
        meta["dropout_seed"] = int(s)
        members.append(TreeModel(base.topology, layers, base.n_features, meta))
    return EnsembleModel(
        members, scheme="mc-dropout", seeds=seeds,
        meta={"scheme": "mc-dropout", "M": m_members, "rate": rate},
    )


def save_ensemble(ens: EnsembleModel, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = [f"member_{i:03d}" for i in range(ens.n_members)]
    info = {
        "kind": "ensemble",
        "version": __version__,
        "scheme": ens.scheme,
        "alpha": ens.alpha,
        "k_hard": ens.k_hard,
        "seeds": [int(s) for s in ens.seeds],
        "weights": [float(w) for w in ens.weights],
        "members": names,
    }
    info.update(ens.meta)
    save_meta(info, d / "ensemble.json")
    for name, member in zip(names, ens.members):
        save_tree_model(member, d / name)


def load_ensemble(directory) -> EnsembleModel:
    d = Path(directory)
    info = load_meta(d / "ensemble.json")
    if info.get("kind") != "ensemble":
        raise StorageError(f"{d} is not an ensemble directory")
    members = [load_tree_model(d / name) for name in info["members"]]
    return EnsembleModel(
        members,
        scheme=info["scheme"],
        alpha=float(info.get("alpha", 0.5)),
        k_hard=int(info.get("k_hard", 10)),
        seeds=[int(s) for s in info.get("seeds", [])],
        weights=np.asarray(info["weights"]),
        meta=info,
    )


def load_any_model(path) -> EnsembleModel:
    """Open either an ensemble directory or a single tree model directory
    (wrapped as a one-member ensemble)."""
    p = Path(path)
    if (p / "ensemble.json").exists():
        return load_ensemble(p)
    if (p / "meta.json").exists():
        model = load_tree_model(p)
        return EnsembleModel([model], scheme="single", seeds=[model.meta.get("seed", 0)])
    raise StorageError(f"{p} contains neither ensemble.json nor meta.json")
