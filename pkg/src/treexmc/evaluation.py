"""Evaluation harness: ranking metrics, AUROC, misclassification and OOD
detection protocols, rank statistics, synthetic fixtures, and the
naive-versus-beam timing comparison."""

from __future__ import annotations

import gc
import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.stats

from .errors import InvariantError, TreexmcError
from .sparse import SparseMatrix, row_norms
from .data import Dataset
from .tree import TreeTopology
from .ranker import LayerWeights
from .model import TreeModel
from .inference import beam_search, exhaustive_predict
from .ensemble import EnsembleModel


class DegenerateDetectionError(TreexmcError):
    """AUROC asked for with only one class present."""


@dataclass
class RankedPrediction:
    """One instance's ranking (descending probability) plus its truth set."""

    instance_id: int
    ranked_labels: np.ndarray
    true_labels: np.ndarray


@dataclass
class DetectionSample:
    score: float  # higher = more anomalous / more uncertain
    target: int  # 1 = misclassified / OOD


def precision_recall_at_k(preds, ks=(1, 3, 5)) -> dict:
    """Macro-averaged precision / recall at each cutoff, in percent.

    Instances without true labels cannot be scored; they are skipped and
    counted under "skipped".
    """
    ks = sorted(int(k) for k in ks)
    p_acc = {k: [] for k in ks}
    r_acc = {k: [] for k in ks}
    skipped = 0
    for pred in preds:
        truth = set(int(t) for t in pred.true_labels)
        if not truth:
            skipped += 1
            continue
        ranked = pred.ranked_labels
        for k in ks:
            hits = sum(1 for l in ranked[:k] if int(l) in truth)
            p_acc[k].append(hits / k)
            r_acc[k].append(hits / len(truth))
    out = {"skipped": skipped}
    for k in ks:
        out[f"P@{k}"] = 100.0 * float(np.mean(p_acc[k])) if p_acc[k] else 0.0
        out[f"R@{k}"] = 100.0 * float(np.mean(r_acc[k])) if r_acc[k] else 0.0
    return out


def auroc(scores, targets) -> float:
    """Mann-Whitney AUROC with average-rank tie handling, in [0, 1]."""
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets)
    if not np.all(np.isfinite(scores)):
        raise InvariantError("detection scores must be finite")
    n_pos = int(np.sum(targets == 1))
    n_neg = int(np.sum(targets == 0))
    if n_pos + n_neg != targets.size:
        raise InvariantError("targets must be binary")
    if n_pos == 0 or n_neg == 0:
        raise DegenerateDetectionError("need at least one positive and one negative")
    ranks = scipy.stats.rankdata(scores, method="average")
    return float(
        (ranks[targets == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
    )


def misclassification_targets(ranked: np.ndarray, truth: set, r: int,
                              universe: np.ndarray) -> np.ndarray:
    """1 where a universe label sits on the wrong side of the top-r cut."""
    top_r = set(int(l) for l in ranked[:r])
    return np.array(
        [
            1 if ((int(l) in top_r) != (int(l) in truth)) else 0
            for l in universe
        ],
        dtype=np.int64,
    )


def misclassification_detection(reports, truths, metric: str = "pv") -> dict:
    """Per-instance AUROC of uncertainty scores against wrongly-ranked labels.

    The true label count r comes from ground truth (the oracle of the
    protocol). The evaluated universe is the retrieved top-k of the mixed
    ranking plus every true label that at least one member retrieved; true
    labels retrieved by nobody are uncounted and reported as excluded.
    Instances whose universe has a single target class are skipped.
    """
    per_instance = []
    skipped = 0
    excluded_truth = 0
    for report, true_labels in zip(reports, truths):
        truth = set(int(t) for t in true_labels)
        ranked, _ = report.ranking()
        k_eff = report.top_k if report.mode == "beam" else ranked.size
        retrieved_topk = ranked[:k_eff]
        in_table = set(int(l) for l in report.labels)
        scored_truth = [l for l in sorted(truth) if l in in_table]
        excluded_truth += len(truth) - len(scored_truth)
        universe = np.unique(
            np.concatenate([retrieved_topk, np.array(scored_truth, dtype=np.int64)])
        ) if scored_truth else np.unique(retrieved_topk)
        r = len(truth)
        targets = misclassification_targets(ranked, truth, r, universe)
        scores_all = report.misclassification_scores(metric)
        pos = np.searchsorted(report.labels, universe)
        scores = scores_all[pos]
        try:
            per_instance.append(auroc(scores, targets))
        except DegenerateDetectionError:
            skipped += 1
    return {
        "mean_auroc": float(np.mean(per_instance)) if per_instance else float("nan"),
        "evaluated": len(per_instance),
        "skipped": skipped,
        "excluded_true_labels": excluded_truth,
    }


def ood_detection(id_reports, ood_reports, metric: str = "pv") -> dict:
    """One AUROC of instance-level uncertainty, OOD instances as positives."""
    if not id_reports or not ood_reports:
        raise InvariantError("need both in-distribution and OOD reports")
    scores = [r.instance_score(metric) for r in id_reports] + [
        r.instance_score(metric) for r in ood_reports
    ]
    targets = [0] * len(id_reports) + [1] * len(ood_reports)
    return {
        "auroc": auroc(scores, targets),
        "n_id": len(id_reports),
        "n_ood": len(ood_reports),
    }


def rank_statistics(results, max_rank: int):
    """Mean and standard deviation of the i-th largest probability across
    instances, for i = 1..max_rank. Accepts beam results (already sorted)
    or dense predictions; rankings shorter than max_rank pad with 0."""
    table = np.zeros((len(results), max_rank))
    for i, r in enumerate(results):
        top = np.sort(r.probs)[::-1]
        m = min(max_rank, top.size)
        table[i, :m] = top[:m]
    return table.mean(axis=0), table.std(axis=0)


def dump_rank_statistics(means, stds, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("rank,mean_prob,std_prob\n")
        for i, (m, s) in enumerate(zip(means, stds), start=1):
            fh.write(f"{i},{m:.6g},{s:.6g}\n")


def geometric_fit(means) -> tuple:
    """Least-squares fit of log(mean) against rank; returns (c, gamma, r2)."""
    means = np.asarray(means, dtype=np.float64)
    ranks = np.arange(1, means.size + 1, dtype=np.float64)
    ok = means > 0
    slope, intercept, r2 = linear_fit(ranks[ok], np.log(means[ok]))
    return float(np.exp(intercept)), float(np.exp(slope)), r2


def linear_fit(x, y) -> tuple:
    """Ordinary least squares y = a x + b; returns (a, b, R^2)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    a, b = np.polyfit(x, y, 1)
    pred = a * x + b
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(a), float(b), r2


# ---------------------------------------------------------------------------
# synthetic fixtures
# ---------------------------------------------------------------------------


def _conditional_logit(exponent: float, top_prob: float, decay: float) -> float:
    """Logit of top_prob * decay**exponent, computed in log space."""
    lp = np.log(top_prob) + exponent * np.log(decay)
    if lp < -30.0:
        return float(lp)  # 1 - p is 1 to machine precision
    return float(lp - np.log1p(-np.exp(lp)))


def synthetic_longtail(n_labels: int, depth: int, decay: float, seed: int,
                       feature_dim: int = 64, top_prob: float = 0.85,
                       rank_exponent: float = 1.2,
                       noise: float = 0.8) -> TreeModel:
    """Full B-ary tree whose rank-ordered label probabilities decay roughly
    geometrically: label id i scores about top_prob**depth *
    decay**(rank_exponent * i), plus per-instance noise of scale `noise`
    per layer. Deterministic for a fixed seed.
    """
    if not 0.0 < decay < 1.0:
        raise InvariantError("decay must lie in (0, 1)")
    branching = round(n_labels ** (1.0 / depth))
    if branching < 2 or branching ** depth != n_labels:
        raise InvariantError(
            f"n_labels {n_labels} is not a perfect {depth}-th power of an integer >= 2"
        )
    rng = np.random.default_rng(seed)
    layer_sizes, parent_maps, layers = [], [], []
    for t in range(1, depth + 1):
        k_t = branching ** t
        layer_sizes.append(k_t)
        nodes = np.arange(k_t, dtype=np.int64)
        parent_maps.append(nodes // branching)
        digits = nodes % branching
        scale = rank_exponent * branching ** (depth - t)
        bias = np.array(
            [_conditional_logit(scale * c, top_prob, decay) for c in digits]
        )
        noise_w = rng.standard_normal((k_t, feature_dim)) * (noise / np.sqrt(feature_dim))
        dense = np.hstack([noise_w, bias[:, None]])
        layers.append(LayerWeights(t, SparseMatrix.from_scipy(sp.csr_matrix(dense))))
    topology = TreeTopology(branching, layer_sizes, parent_maps)
    meta = {
        "kind": "tree_model",
        "synthetic": "longtail",
        "decay": decay,
        "noise": noise,
        "top_prob": top_prob,
        "rank_exponent": rank_exponent,
        "seed": int(seed),
    }
    return TreeModel(topology, layers, feature_dim, meta)


def synthetic_queries(n: int, feature_dim: int, seed: int) -> SparseMatrix:
    """Standard-normal dense query batch for the synthetic fixtures."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, feature_dim))
    return SparseMatrix.from_scipy(sp.csr_matrix(x))


def synthetic_corpus(n: int, n_labels: int, seed: int,
                     features_per_label: int = 6, shared_features: int = 8,
                     labels_per_instance: int = 3, noise: float = 0.25) -> Dataset:
    """Learnable multi-label corpus: each label owns an exclusive feature
    block; an instance activates the blocks of its labels plus shared noise.
    """
    rng = np.random.default_rng(seed)
    n_features = n_labels * features_per_label + shared_features
    f_rows, f_cols, f_vals = [], [], []
    y_rows, y_cols = [], []
    for i in range(n):
        n_lab = 1 + rng.poisson(labels_per_instance - 1)
        labels = rng.choice(n_labels, size=min(n_lab, n_labels), replace=False)
        cols, vals = [], []
        for lab in labels:
            y_rows.append(i)
            y_cols.append(int(lab))
            base = int(lab) * features_per_label
            for j in range(features_per_label):
                cols.append(base + j)
                vals.append(1.0 + rng.random())
        for j in range(shared_features):
            cols.append(n_labels * features_per_label + j)
            vals.append(noise * rng.random())
        order = np.argsort(cols)
        f_rows.extend([i] * len(cols))
        f_cols.extend(np.asarray(cols)[order])
        f_vals.extend(np.asarray(vals)[order])
    x = sp.csr_matrix((f_vals, (f_rows, f_cols)), shape=(n, n_features))
    y = sp.csr_matrix((np.ones(len(y_rows)), (y_rows, y_cols)), shape=(n, n_labels))
    return Dataset(SparseMatrix.from_scipy(x), SparseMatrix.from_scipy(y))


def permuted_feature_ood(features: SparseMatrix, seed: int) -> SparseMatrix:
    """OOD surrogate: apply one fixed random feature-id permutation."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(features.cols)
    csr = features.tocsr().copy()
    csr.indices = perm[csr.indices]
    csr.sort_indices()
    return SparseMatrix.from_scipy(csr)


def random_sparse_ood(features: SparseMatrix, seed: int) -> SparseMatrix:
    """OOD surrogate: random feature ids, sparsity and row norms matched to
    the given batch."""
    rng = np.random.default_rng(seed)
    lens = features.row_lengths()
    indptr = features.indptr.copy()
    indices = np.empty(features.nnz, dtype=np.int64)
    values = np.empty(features.nnz)
    pos = 0
    norms = row_norms(features)
    for i, ln in enumerate(lens):
        ln = int(ln)
        if ln == 0:
            continue
        idx = np.sort(rng.choice(features.cols, size=ln, replace=False))
        v = rng.random(ln) + 0.1
        v *= (norms[i] if norms[i] > 0 else 1.0) / np.linalg.norm(v)
        indices[pos:pos + ln] = idx
        values[pos:pos + ln] = v
        pos += ln
    return SparseMatrix(features.rows, features.cols, indptr, indices, values)


# ---------------------------------------------------------------------------
# timing
# ---------------------------------------------------------------------------


def timing_comparison(ens: EnsembleModel, features: SparseMatrix,
                      beam_width: int, top_k: int, repeats: int = 1) -> dict:
    """Wall-clock the exhaustive pipeline against beam search on identical
    inputs, single-threaded, end to end. With repeats > 1, one untimed
    warmup pass runs first and the fastest repeat is reported."""
    rows = [features.row(i) for i in range(features.rows)]

    def run_naive():
        for x in rows:
            for member in ens.members:
                exhaustive_predict(member, x)

    def run_beam():
        for x in rows:
            for member in ens.members:
                beam_search(member, x, beam_width, top_k)

    def best(fn):
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        return min(times)

    if repeats > 1:
        run_naive()
        run_beam()
    gc_was_on = gc.isenabled()
    gc.disable()
    try:
        naive_s = best(run_naive)
        beam_s = best(run_beam)
    finally:
        if gc_was_on:
            gc.enable()
    return {
        "naive_seconds": naive_s,
        "beam_seconds": beam_s,
        "speedup": naive_s / beam_s if beam_s > 0 else float("inf"),
        "n_instances": features.rows,
        "n_members": ens.n_members,
    }


def complexity_sweep(log2_sizes=(10, 12, 14, 16), beam_width: int = 50,
                     top_k: int = 100, n_queries: int = 20, seed: int = 7,
                     feature_dim: int = 256, decay: float = 0.5,
                     repeats: int = 7) -> dict:
    """Timing sweep over binary synthetic trees of L = 2**j labels.

    Returns per-size beam/naive seconds plus linear fits of beam time
    against log L and naive time against L. Measurements are interleaved
    across sizes and the per-query minima over the repeats are summed, so
    scheduler noise on shared machines cannot bias a single size.
    """
    sizes = [2 ** int(j) for j in log2_sizes]
    models, row_sets = [], []
    for j, n_labels in zip(log2_sizes, sizes):
        models.append(synthetic_longtail(
            n_labels, depth=int(j), decay=decay, seed=seed, feature_dim=feature_dim
        ))
        queries = synthetic_queries(n_queries, feature_dim, seed + 1)
        row_sets.append([queries.row(i) for i in range(queries.rows)])

    n_sizes = len(sizes)
    beam_best = np.full((n_sizes, n_queries), np.inf)
    naive_best = np.full((n_sizes, n_queries), np.inf)
    for si in range(n_sizes):  # untimed warm pass
        for x in row_sets[si]:
            beam_search(models[si], x, beam_width, top_k)
            exhaustive_predict(models[si], x)
    gc_was_on = gc.isenabled()
    gc.disable()
    try:
        for _rep in range(repeats):
            for qi in range(n_queries):
                for si in range(n_sizes):
                    x = row_sets[si][qi]
                    t0 = time.perf_counter()
                    beam_search(models[si], x, beam_width, top_k)
                    t1 = time.perf_counter()
                    exhaustive_predict(models[si], x)
                    t2 = time.perf_counter()
                    beam_best[si, qi] = min(beam_best[si, qi], t1 - t0)
                    naive_best[si, qi] = min(naive_best[si, qi], t2 - t1)
    finally:
        if gc_was_on:
            gc.enable()
    beam_t = [float(s) for s in beam_best.sum(axis=1)]
    naive_t = [float(s) for s in naive_best.sum(axis=1)]
    sizes_arr = np.asarray(sizes, dtype=np.float64)
    _, _, beam_r2 = linear_fit(np.log(sizes_arr), beam_t)
    _, _, naive_r2 = linear_fit(sizes_arr, naive_t)
    return {
        "sizes": sizes,
        "beam_seconds": beam_t,
        "naive_seconds": naive_t,
        "beam_vs_logL_r2": beam_r2,
        "naive_vs_L_r2": naive_r2,
        "speedup_at_largest": naive_t[-1] / beam_t[-1],
    }
