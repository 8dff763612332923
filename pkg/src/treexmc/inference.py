"""Beam-search inference over a trained tree model, plus the exhaustive
all-labels oracle.

A label's probability is the product of its per-layer conditional node
probabilities along the root-to-leaf path. Products are accumulated as sums
of log-probabilities to survive deep trees; both the beam and the exhaustive
path score candidate nodes through the same per-row routine, so a beam wide
enough to disable pruning reproduces the oracle bit for bit.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import InvariantError
from .ranker import LOG_P_MAX, P_MIN
from .model import TreeModel
from .sparse import SparseMatrix, SparseVector


@dataclass
class BeamResult:
    """Top labels for one instance, sorted by probability descending with
    ties broken by ascending label id."""

    labels: np.ndarray
    probs: np.ndarray
    log_probs: np.ndarray
    beam_width: int
    top_k: int
    layer_trace: list = None  # optional [(kept node ids, kept log probs)] per layer


@dataclass
class DensePrediction:
    """Full length-L path probabilities for one instance."""

    probs: np.ndarray
    log_probs: np.ndarray
    layer_log_probs: list = None  # full log-prob array per layer, 1-indexed by t-1

    def top_k(self, k: int):
        order = np.lexsort((np.arange(self.probs.size), -self.log_probs))[:k]
        return order, self.probs[order]


def _feature_buffer(model: TreeModel, x: SparseVector) -> np.ndarray:
    if x.dim != model.n_features:
        raise InvariantError(
            f"instance dim {x.dim} != model features {model.n_features}"
        )
    buf = np.zeros(model.n_features + 1)
    buf[x.indices] = x.values
    buf[-1] = 1.0
    return buf


def _node_log_probs(w_csr, buf: np.ndarray, rows=None) -> np.ndarray:
    """log sigmoid(w_r . x) for the requested rows, capped strictly below 0."""
    z = (w_csr @ buf) if rows is None else (w_csr[rows] @ buf)
    return np.minimum(-np.logaddexp(0.0, -z), LOG_P_MAX)


def _expand(order, starts, active):
    """Children of the active parents: node ids plus each child's position
    into the active-parent array."""
    counts = starts[active + 1] - starts[active]
    total = int(counts.sum())
    if total == 0:
        return np.array([], dtype=np.int64), np.array([], dtype=np.int64)
    offsets = np.repeat(starts[active], counts)
    within = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    cand = order[offsets + within]
    parent_pos = np.repeat(np.arange(active.size), counts)
    return cand, parent_pos


def _top(ids: np.ndarray, logp: np.ndarray, k: int):
    """Indices of the k best by log-probability, ties by ascending id."""
    if ids.size <= k:
        sel = np.lexsort((ids, -logp))
    else:
        sel = np.lexsort((ids, -logp))[:k]
    return sel


def beam_search(model: TreeModel, x: SparseVector, beam_width: int, top_k: int,
                keep_trace: bool = False) -> BeamResult:
    """Layer-wise pruned inference: expand the children of the surviving
    nodes, extend their path log-probabilities, and keep the best
    `beam_width` per internal layer (`top_k` at the leaf layer)."""
    if beam_width < 1 or top_k < 1:
        raise InvariantError("beam width and top-k must be >= 1")
    buf = _feature_buffer(model, x)
    depth = model.depth
    active = np.zeros(1, dtype=np.int64)
    logp = np.zeros(1)
    trace = [] if keep_trace else None
    for t in range(1, depth + 1):
        order, starts = model.topology.children_index(t)
        cand, parent_pos = _expand(order, starts, active)
        node_lp = _node_log_probs(model.weights(t).tocsr(), buf, cand)
        path_lp = logp[parent_pos] + node_lp
        k_t = beam_width if t < depth else top_k
        sel = _top(cand, path_lp, k_t)
        active, logp = cand[sel], path_lp[sel]
        if keep_trace:
            trace.append((active.copy(), logp.copy()))
        if t < depth:
            by_id = np.argsort(active, kind="stable")
            active, logp = active[by_id], logp[by_id]
    return BeamResult(
        labels=active,
        probs=np.maximum(np.exp(logp), P_MIN),
        log_probs=logp,
        beam_width=beam_width,
        top_k=top_k,
        layer_trace=trace,
    )


def exhaustive_predict(model: TreeModel, x: SparseVector,
                       keep_layers: bool = False) -> DensePrediction:
    """Path probability of every label, no pruning (the linear-time oracle)."""
    buf = _feature_buffer(model, x)
    logp = np.zeros(1)
    layer_lp = [] if keep_layers else None
    for t in range(1, model.depth + 1):
        node_lp = _node_log_probs(model.weights(t).tocsr(), buf)
        logp = logp[model.topology.parents(t)] + node_lp
        if keep_layers:
            layer_lp.append(logp.copy())
    return DensePrediction(
        probs=np.maximum(np.exp(logp), P_MIN),
        log_probs=logp,
        layer_log_probs=layer_lp,
    )


def regret_at_layer(beam: BeamResult, exact: DensePrediction, t: int) -> float:
    """Average gap between the oracle's and the beam's top-i probabilities at
    layer t (non-negative; zero when the beam kept the true top set)."""
    if beam.layer_trace is None or exact.layer_log_probs is None:
        raise InvariantError("regret needs beam_search(keep_trace) and "
                             "exhaustive_predict(keep_layers) outputs")
    kept_ids, kept_lp = beam.layer_trace[t - 1]
    k_t = kept_ids.size
    beam_sorted = np.sort(np.exp(kept_lp))[::-1]
    full = exact.layer_log_probs[t - 1]
    oracle = np.exp(full[_top(np.arange(full.size), full, k_t)])
    return float(np.mean(oracle - beam_sorted[: oracle.size]))


def beam_search_batch(model: TreeModel, features: SparseMatrix, beam_width: int,
                      top_k: int, threads: int = 1) -> list:
    rows = [features.row(i) for i in range(features.rows)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(
                lambda r: beam_search(model, r, beam_width, top_k), rows
            ))
    return [beam_search(model, r, beam_width, top_k) for r in rows]


def exhaustive_batch(model: TreeModel, features: SparseMatrix,
                     threads: int = 1) -> list:
    rows = [features.row(i) for i in range(features.rows)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda r: exhaustive_predict(model, r), rows))
    return [exhaustive_predict(model, r) for r in rows]


def dump_predictions(results, path) -> None:
    """One line per instance: tab-separated ``label:prob`` pairs, descending
    probability, six significant digits."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in results:
            fh.write(
                "\t".join(f"{l}:{p:.6g}" for l, p in zip(r.labels, r.probs)) + "\n"
            )
