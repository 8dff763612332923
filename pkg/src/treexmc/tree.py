"""Hierarchical label tree construction.

Labels are embedded by aggregating the feature vectors of their positive
instances, then recursively partitioned with cosine k-means into a
branching-factor-bounded hierarchy. Each layer t is summarized by a binary
child-to-parent assignment matrix of shape (K_t, K_{t-1}); the last layer
maps individual labels to their pre-leaf clusters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import InvariantError
from .sparse import SparseMatrix, l2_normalize_rows
from .data import Dataset


@dataclass
class LabelEmbedding:
    """Unit-normalized per-label feature aggregates; labels with no positive
    instances keep an all-zero row and are tracked in zero_rows."""

    matrix: SparseMatrix
    zero_rows: np.ndarray

    @property
    def n_labels(self) -> int:
        return self.matrix.rows


def pifa_embeddings(data: Dataset) -> LabelEmbedding:
    """Sum each label's positive-instance feature rows and L2-normalize."""
    agg = data.labels.tocsr().T @ data.features.tocsr()
    m = l2_normalize_rows(SparseMatrix.from_scipy(agg.tocsr()))
    zero = np.flatnonzero(m.row_lengths() == 0)
    return LabelEmbedding(m, zero)


@dataclass
class TreeTopology:
    """Layered child-to-parent maps; layer t has layer_sizes[t-1] nodes."""

    branching: int
    layer_sizes: list
    parent_maps: list  # parent_maps[t-1][node] = parent id at layer t-1
    _children: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def depth(self) -> int:
        return len(self.layer_sizes)

    @property
    def n_labels(self) -> int:
        return self.layer_sizes[-1]

    def parents(self, t: int) -> np.ndarray:
        if not 1 <= t <= self.depth:
            raise InvariantError(f"layer {t} out of range [1, {self.depth}]")
        return self.parent_maps[t - 1]

    def children_index(self, t: int):
        """(order, starts): node ids at layer t grouped by parent, ids ascending
        within each parent; starts[p]:starts[p+1] slices parent p's children."""
        if t not in self._children:
            par = self.parents(t)
            order = np.argsort(par, kind="stable").astype(np.int64)
            n_par = 1 if t == 1 else self.layer_sizes[t - 2]
            starts = np.searchsorted(par[order], np.arange(n_par + 1)).astype(np.int64)
            self._children[t] = (order, starts)
        return self._children[t]

    def indexing_matrix(self, t: int) -> SparseMatrix:
        """Binary (K_t, K_{t-1}) matrix with one parent per child row."""
        par = self.parents(t)
        k_t = self.layer_sizes[t - 1]
        k_prev = 1 if t == 1 else self.layer_sizes[t - 2]
        return SparseMatrix(
            k_t, k_prev, np.arange(k_t + 1, dtype=np.int64), par, np.ones(k_t)
        )

    @staticmethod
    def from_indexing_matrices(matrices, branching: int) -> "TreeTopology":
        sizes, parents = [], []
        for t, m in enumerate(matrices, start=1):
            exp_prev = 1 if t == 1 else sizes[-1]
            if m.cols != exp_prev or np.any(m.row_lengths() != 1) or np.any(m.values != 1.0):
                raise InvariantError(f"layer {t} is not a one-parent-per-child assignment")
            sizes.append(m.rows)
            parents.append(m.indices.astype(np.int64))
        return TreeTopology(branching, sizes, parents)


def layer_candidates(tree: TreeTopology, t: int, parents_active: np.ndarray) -> np.ndarray:
    """Expand an active-parent mask at layer t-1 to the child mask at layer t."""
    par = tree.parents(t)
    n_par = 1 if t == 1 else tree.layer_sizes[t - 2]
    parents_active = np.asarray(parents_active)
    if parents_active.shape != (n_par,):
        raise InvariantError(
            f"parent mask has length {parents_active.size}, layer {t - 1} has {n_par} nodes"
        )
    return parents_active[par].astype(parents_active.dtype)


def _cosine_kmeans(x: sp.csr_matrix, k: int, rng: np.random.Generator, max_iter: int = 20):
    """Partition row indices of x into k non-empty groups by cosine similarity.

    Rows are assumed unit-norm or zero. Zero rows carry no geometry and are
    dealt round-robin after convergence; an empty cluster is repaired by
    stealing the least-similar member of the largest cluster.
    """
    m = x.shape[0]
    k = min(k, m)
    norms = np.sqrt(np.asarray(x.multiply(x).sum(axis=1)).ravel())
    nz = np.flatnonzero(norms > 0)
    if nz.size < k or nz.size < 2:
        # no usable geometry: deterministic round-robin split
        return [np.arange(m)[i::k] for i in range(k)]
    xnz = x[nz]

    # k-means++ style seeding on cosine distance
    centers = np.empty((k, x.shape[1]))
    first = int(rng.integers(nz.size))
    centers[0] = xnz[first].toarray().ravel()
    dist = np.maximum(0.0, 1.0 - (xnz @ centers[0]))
    for j in range(1, k):
        w = dist * dist
        tot = w.sum()
        pick = int(rng.integers(nz.size)) if tot <= 0 else int(rng.choice(nz.size, p=w / tot))
        centers[j] = xnz[pick].toarray().ravel()
        dist = np.minimum(dist, np.maximum(0.0, 1.0 - (xnz @ centers[j])))

    assign = np.full(nz.size, -1)
    for _ in range(max_iter):
        sims = xnz @ centers.T
        new_assign = np.argmax(sims, axis=1)
        counts = np.bincount(new_assign, minlength=k)
        for empty in np.flatnonzero(counts == 0):
            donor = int(np.argmax(counts))
            members = np.flatnonzero(new_assign == donor)
            victim = members[int(np.argmin(sims[members, donor]))]
            new_assign[victim] = empty
            counts[donor] -= 1
            counts[empty] += 1
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        group = sp.csr_matrix(
            (np.ones(nz.size), (assign, np.arange(nz.size))), shape=(k, nz.size)
        )
        sums = np.asarray((group @ xnz).todense())
        cn = np.linalg.norm(sums, axis=1)
        ok = cn > 0
        centers[ok] = sums[ok] / cn[ok, None]

    parts = [nz[assign == j] for j in range(k)]
    zero_rows = np.flatnonzero(norms == 0)
    for i, r in enumerate(zero_rows):
        parts[i % k] = np.append(parts[i % k], r)
    return [np.sort(p) for p in parts]


def build_tree(emb: LabelEmbedding, branching: int = 8, max_leaf: int = 100,
               seed: int = 0) -> TreeTopology:
    """Recursively split clusters larger than max_leaf with branching-way
    cosine k-means; deterministic for a fixed seed."""
    if branching < 2:
        raise InvariantError("branching must be >= 2")
    if max_leaf < 1:
        raise InvariantError("max_leaf must be >= 1")
    n_labels = emb.n_labels
    csr = emb.matrix.tocsr()
    ss = np.random.SeedSequence(seed)

    clusters = [np.arange(n_labels, dtype=np.int64)]
    layer_sizes, parent_maps = [], []
    while any(c.size > max_leaf for c in clusters):
        nxt, parents = [], []
        for ci, c in enumerate(clusters):
            if c.size > max_leaf:
                rng = np.random.default_rng(ss.spawn(1)[0])
                for part in _cosine_kmeans(csr[c], branching, rng):
                    nxt.append(c[part])
                    parents.append(ci)
            else:
                nxt.append(c)
                parents.append(ci)
        clusters = nxt
        layer_sizes.append(len(clusters))
        parent_maps.append(np.array(parents, dtype=np.int64))

    # last layer: individual labels under their pre-leaf cluster
    label_parent = np.empty(n_labels, dtype=np.int64)
    for ci, c in enumerate(clusters):
        label_parent[c] = ci
    layer_sizes.append(n_labels)
    parent_maps.append(label_parent)
    return TreeTopology(branching, layer_sizes, parent_maps)
