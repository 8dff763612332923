"""Per-node linear classifiers over the label tree.

Every tree node owns an L2-regularized logistic classifier trained on the
instances positive for its parent (teacher forcing): positives are the
instances positive for the node itself, negatives are the rest of the
parent's set, optionally extended with externally supplied hard negatives
at the leaf layer. A constant-1 bias coordinate is folded in as the last
feature column, so a layer's weights form a single (K_t, d+1) sparse matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import InvariantError
from .sparse import SparseMatrix
from .data import Dataset
from .tree import TreeTopology

P_MAX = float(np.nextafter(1.0, 0.0))  # largest float64 strictly below 1
LOG_P_MAX = float(np.log(P_MAX))
P_MIN = 1e-300


@dataclass
class LayerWeights:
    """Node weight rows for one layer; column d is the folded-in bias."""

    layer: int
    matrix: SparseMatrix  # (K_t, d + 1)
    zero_positive_nodes: int = 0

    @property
    def n_nodes(self) -> int:
        return self.matrix.rows


@dataclass
class NegativeSamplingPlan:
    """Negative selection mode plus optional per-instance hard negatives.

    hard_negatives[i] is a list of (label_id, source) pairs; hard negatives
    must never include a true label of instance i.
    """

    mode: str = "teacher-forcing"
    hard_negatives: list = field(default_factory=list)

    def validate_against(self, data: Dataset) -> None:
        if self.mode not in ("teacher-forcing", "hard-augmented"):
            raise InvariantError(f"unknown negative sampling mode {self.mode!r}")
        if self.mode == "teacher-forcing":
            return
        if len(self.hard_negatives) != data.n:
            raise InvariantError("hard negative plan length != number of instances")
        truth = data.true_label_sets()
        for i, pairs in enumerate(self.hard_negatives):
            true_set = set(int(t) for t in truth[i])
            for label, _source in pairs:
                if int(label) in true_set:
                    raise InvariantError(
                        f"hard negative {label} for instance {i} is a true label"
                    )

    def rows_per_label(self) -> dict:
        """Invert per-instance lists into label -> instance rows."""
        out = {}
        for i, pairs in enumerate(self.hard_negatives):
            for label, _source in pairs:
                out.setdefault(int(label), []).append(i)
        return {label: np.array(rows, dtype=np.int64) for label, rows in out.items()}


def induce_layer_targets(data: Dataset, tree: TreeTopology, t: int) -> SparseMatrix:
    """Binary (n, K_t) matrix: instance i is positive for node c iff one of
    its true labels descends from c."""
    if not 1 <= t <= tree.depth:
        raise InvariantError(f"layer {t} out of range [1, {tree.depth}]")
    anc = np.arange(tree.n_labels, dtype=np.int64)
    for s in range(tree.depth, t, -1):
        anc = tree.parents(s)[anc]
    y = data.labels.tocsr()
    k_t = tree.layer_sizes[t - 1]
    mapped = sp.csr_matrix(
        (np.ones(y.nnz), anc[y.indices], y.indptr.copy()), shape=(data.n, k_t)
    )
    mapped.sum_duplicates()
    mapped.data[:] = 1.0
    mapped.sort_indices()
    return SparseMatrix.from_scipy(mapped)


def root_targets(n: int) -> SparseMatrix:
    """All-ones (n, 1) parent targets for layer 1: the root covers everything,
    so zero-label instances still participate as negatives there."""
    return SparseMatrix(
        n, 1, np.arange(n + 1, dtype=np.int64), np.zeros(n, dtype=np.int64), np.ones(n)
    )


def fit_logistic_node(x: sp.csr_matrix, y: np.ndarray, reg_c: float,
                      tol: float = 1e-4, max_epochs: int = 100):
    """Minimize 0.5*||w||^2 + C * sum_i log(1 + exp(-y_i w.x_i)) by damped
    Newton steps with conjugate-gradient directions.

    Deterministic: no randomness, fixed accumulation order. Stops when the
    gradient norm falls below tol relative to its starting value (or 1).
    Returns (w, mean_unregularized_loss, objective_trace).
    """
    m, p = x.shape
    xt = x.T.tocsr()
    w = np.zeros(p)
    margins = np.zeros(m)

    def full_objective(w_vec, ym):
        return 0.5 * np.dot(w_vec, w_vec) + reg_c * np.sum(np.logaddexp(0.0, -ym))

    trace = []
    g0 = None
    for _ in range(max_epochs):
        ym = y * margins
        obj = full_objective(w, ym)
        trace.append(obj)
        sig = 1.0 / (1.0 + np.exp(np.minimum(ym, 50.0)))  # sigma(-y * margin)
        grad = w - reg_c * (xt @ (y * sig))
        gnorm = np.linalg.norm(grad)
        if g0 is None:
            g0 = gnorm
        if gnorm <= tol * max(1.0, g0):
            break
        d_diag = np.maximum(sig * (1.0 - sig), 1e-12)

        # conjugate gradient on (I + C X^T D X) s = -grad
        s = np.zeros(p)
        r = -grad
        pdir = r.copy()
        rs = np.dot(r, r)
        cg_tol = max((0.1 * gnorm) ** 2, 1e-30)
        for _cg in range(25):
            xp = x @ pdir
            hp = pdir + reg_c * (xt @ (d_diag * xp))
            alpha = rs / np.dot(pdir, hp)
            s += alpha * pdir
            r -= alpha * hp
            rs_new = np.dot(r, r)
            if rs_new <= cg_tol:
                break
            pdir = r + (rs_new / rs) * pdir
            rs = rs_new

        # backtracking line search (Armijo) keeps the objective non-increasing
        gd = np.dot(grad, s)
        if gd >= 0:  # CG failed to produce a descent direction
            s = -grad
            gd = -gnorm * gnorm
        step = 1.0
        xs = x @ s
        w_try, m_try = w, margins
        for _ls in range(40):
            w_try = w + step * s
            m_try = margins + step * xs
            if full_objective(w_try, y * m_try) <= obj + 1e-4 * step * gd:
                break
            step *= 0.5
        w, margins = w_try, m_try

    mean_loss = float(np.mean(np.logaddexp(0.0, -(y * margins)))) if m else 0.0
    return w, mean_loss, np.asarray(trace)


def node_objective(x: sp.csr_matrix, y: np.ndarray, w: np.ndarray, reg_c: float):
    """Objective value and analytic gradient of the per-node problem at w."""
    ym = y * (x @ w)
    obj = 0.5 * np.dot(w, w) + reg_c * np.sum(np.logaddexp(0.0, -ym))
    sig = 1.0 / (1.0 + np.exp(np.minimum(ym, 50.0)))
    grad = w - reg_c * (x.T.tocsr() @ (y * sig))
    return float(obj), grad


def _compress_columns(x: sp.csr_matrix):
    """Drop columns unused by x; exact for L2-regularized fits started at 0."""
    cols = np.unique(x.indices)
    lookup = np.searchsorted(cols, x.indices)
    xc = sp.csr_matrix((x.data, lookup, x.indptr), shape=(x.shape[0], cols.size))
    return xc, cols


def augment_features(features: SparseMatrix) -> sp.csr_matrix:
    """Append the constant-1 bias column at index d."""
    return sp.hstack(
        [features.tocsr(), np.ones((features.rows, 1))], format="csr"
    )


def train_layer(data: Dataset, tree: TreeTopology, t: int,
                targets: SparseMatrix, parent_targets: SparseMatrix,
                plan: NegativeSamplingPlan, reg_c: float = 1.0,
                tol: float = 1e-4, max_epochs: int = 100,
                prune_threshold: float = 0.0, seed: int = 0,
                x_aug: sp.csr_matrix = None) -> LayerWeights:
    """Train every node of layer t with teacher-forcing negatives.

    targets / parent_targets are the induced positives at layers t and t-1
    (use root_targets(n) at t=1). Hard negatives from the plan are injected
    only at the leaf layer. Nodes with no positive instance get an all-zero
    weight row. The batch solver is order-independent, so `seed` does not
    change the result; it is accepted for provenance only.
    """
    if plan.mode == "hard-augmented" and t == tree.depth:
        extra_rows = plan.rows_per_label()
    else:
        extra_rows = {}

    if x_aug is None:
        x_aug = augment_features(data.features)
    k_t = tree.layer_sizes[t - 1]
    targets_csc = targets.tocsr().tocsc()
    parent_csc = parent_targets.tocsr().tocsc()
    order, starts = tree.children_index(t)

    rows_out, cols_out, vals_out = [], [], []
    zero_pos = 0
    n_parents = 1 if t == 1 else tree.layer_sizes[t - 2]
    for p_id in range(n_parents):
        children = order[starts[p_id]:starts[p_id + 1]]
        if children.size == 0:
            continue
        base_rows = parent_csc.indices[
            parent_csc.indptr[p_id]:parent_csc.indptr[p_id + 1]
        ].astype(np.int64)
        if base_rows.size == 0:
            # no instance reaches this parent, so no child can have positives
            zero_pos += int(children.size)
            continue
        x_base, cols_base = _compress_columns(x_aug[base_rows])
        for c in children:
            pos = targets_csc.indices[
                targets_csc.indptr[c]:targets_csc.indptr[c + 1]
            ].astype(np.int64)
            if pos.size == 0:
                zero_pos += 1
                continue
            pos_at = np.searchsorted(base_rows, pos)
            if pos_at.size and (pos_at[-1] >= base_rows.size
                                or np.any(base_rows[pos_at] != pos)):
                raise InvariantError(
                    f"layer {t} node {c}: positives not a subset of the parent set"
                )
            extra = extra_rows.get(int(c))
            if extra is not None and extra.size:
                extra = np.setdiff1d(extra, base_rows)
            if extra is not None and extra.size:
                rows_c = np.concatenate([base_rows, extra])
                x_c, cols_c = _compress_columns(x_aug[rows_c])
                y_c = np.full(rows_c.size, -1.0)
            else:
                x_c, cols_c = x_base, cols_base
                y_c = np.full(base_rows.size, -1.0)
            y_c[pos_at] = 1.0
            w, _loss, _trace = fit_logistic_node(x_c, y_c, reg_c, tol, max_epochs)
            keep = np.flatnonzero(np.abs(w) >= prune_threshold) if prune_threshold > 0 \
                else np.flatnonzero(w != 0.0)
            rows_out.append(np.full(keep.size, c, dtype=np.int64))
            cols_out.append(cols_c[keep])
            vals_out.append(w[keep])

    if rows_out:
        rows_cat = np.concatenate(rows_out)
        cols_cat = np.concatenate(cols_out)
        vals_cat = np.concatenate(vals_out)
    else:
        rows_cat = np.array([], dtype=np.int64)
        cols_cat = np.array([], dtype=np.int64)
        vals_cat = np.array([])
    w_csr = sp.csr_matrix(
        (vals_cat, (rows_cat, cols_cat)), shape=(k_t, data.n_features + 1)
    )
    return LayerWeights(t, SparseMatrix.from_scipy(w_csr), zero_pos)


def prune_weights(w: LayerWeights, threshold: float) -> LayerWeights:
    """Drop entries with |value| < threshold; idempotent, identity at 0."""
    if threshold < 0:
        raise InvariantError("prune threshold must be >= 0")
    m = w.matrix
    if threshold == 0:
        return LayerWeights(w.layer, m, w.zero_positive_nodes)
    keep = np.abs(m.values) >= threshold
    lens = m.row_lengths()
    kept_per_row = np.zeros(m.rows, dtype=np.int64)
    if m.nnz:
        row_of = np.repeat(np.arange(m.rows), lens)
        np.add.at(kept_per_row, row_of[keep], 1)
    indptr = np.concatenate([[0], np.cumsum(kept_per_row)])
    pruned = SparseMatrix(m.rows, m.cols, indptr, m.indices[keep], m.values[keep])
    return LayerWeights(w.layer, pruned, w.zero_positive_nodes)


def node_probability(w_row, x) -> float:
    """Sigmoid of the biased score for one weight row, clamped into (0, 1)."""
    dense = np.zeros(w_row.dim)
    dense[w_row.indices] = w_row.values
    z = float(np.dot(dense[x.indices], x.values)) + float(dense[-1])
    p = 1.0 / (1.0 + np.exp(-z)) if z > -700 else 0.0
    return min(max(p, P_MIN), P_MAX)
