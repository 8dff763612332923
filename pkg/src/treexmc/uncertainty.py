"""Label-level and instance-level uncertainty over model ensembles.

Per label, the ensemble's member probabilities p_m with mixture weights w_m
give:

    mean        mu  = sum_m w_m p_m
    total       TU  = H(mu)                 (binary entropy, nats)
    expected    EDU = sum_m w_m H(p_m)
    knowledge   KU  = TU - EDU              (>= 0 by concavity; clamped)
    variance    PV  = sum_m w_m (p_m - mu)^2

Instance-level scores sum the per-label scores over all labels. In beam
mode only the union of retrieved labels is materialized; every other label
contributes the score of an all-delta column, added analytically as a tail
correction, so exact and approximate sums converge as delta -> 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import xlogy

from .errors import InvariantError
from .ensemble import EnsembleModel, combine_results, ensemble_predict
from .inference import exhaustive_predict

DEFAULT_DELTA = 1e-8


def binary_entropy(p):
    """-(p ln p + (1-p) ln(1-p)) in nats, with 0 ln 0 taken as 0."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or np.any(p > 1):
        raise InvariantError("probabilities must lie in [0, 1]")
    h = -(xlogy(p, p) + xlogy(1.0 - p, 1.0 - p))
    return float(h) if h.ndim == 0 else h


def neg_log_score(p):
    """-ln p, the point-estimate variant of the total-uncertainty score."""
    p = np.asarray(p, dtype=np.float64)
    out = -np.log(np.maximum(p, 1e-300))
    return float(out) if out.ndim == 0 else out


_ENTROPY_FNS = {"binary": binary_entropy, "neglog": neg_log_score}


@dataclass
class LabelProbTable:
    """Per-label member probabilities for one instance.

    Rows follow `labels` (ascending ids); non-retrieved cells hold exactly
    `delta`. `weights` are the member mixture weights and must sum to 1.
    """

    labels: np.ndarray
    probs: np.ndarray  # (len(labels), M)
    delta: float
    weights: np.ndarray
    n_labels_total: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.probs.shape != (self.labels.size, self.weights.size):
            raise InvariantError("probability table shape mismatch")
        if self.probs.size and (
            self.probs.min() < self.delta or self.probs.max() >= 1.0
        ):
            raise InvariantError("probabilities must lie in [delta, 1)")
        if abs(float(self.weights.sum()) - 1.0) > 1e-9:
            raise InvariantError("mixture weights must sum to 1")

    @property
    def n_members(self) -> int:
        return int(self.weights.size)


@dataclass
class LabelScores:
    pv: np.ndarray
    tu: np.ndarray
    ku: np.ndarray
    mean_prob: np.ndarray
    ku_clamped: int = 0


def label_uncertainty(table: LabelProbTable, entropy: str = "binary") -> LabelScores:
    """PV / TU / KU per label of the table.

    With binary entropy, KU >= 0 by Jensen; values in [-1e-12, 0) are clamped
    to 0 and counted, anything lower is an invariant violation. The neglog
    variant has no such guarantee and is left unclamped.
    """
    h = _ENTROPY_FNS[entropy]
    w = table.weights
    mu = table.probs @ w
    tu = h(mu)
    edu = h(table.probs) @ w
    ku = tu - edu
    clamped = 0
    if entropy == "binary":
        clamped = int(np.sum((ku < 0) & (ku >= -1e-12)))
        if np.any(ku < -1e-12):
            worst = float(ku.min())
            raise InvariantError(f"knowledge uncertainty fell below -1e-12 ({worst})")
        ku = np.maximum(ku, 0.0)
    pv = ((table.probs - mu[:, None]) ** 2) @ w
    return LabelScores(pv=pv, tu=tu, ku=ku, mean_prob=mu, ku_clamped=clamped)


def delta_column_scores(delta: float, weights, entropy: str = "binary"):
    """Per-label scores of a label every member scored as delta (the value a
    non-retrieved tail label contributes)."""
    weights = np.asarray(weights, dtype=np.float64)
    table = LabelProbTable(
        labels=np.zeros(1, dtype=np.int64),
        probs=np.full((1, weights.size), float(delta)),
        delta=float(delta),
        weights=weights,
        n_labels_total=1,
    )
    s = label_uncertainty(table, entropy)
    return float(s.pv[0]), float(s.tu[0]), float(s.ku[0])


def instance_uncertainty(scores: LabelScores, table: LabelProbTable,
                         entropy: str = "binary") -> dict:
    """Sum per-label scores over the whole label space; labels outside the
    table are counted analytically at their all-delta score."""
    tail = table.n_labels_total - table.labels.size
    if tail < 0:
        raise InvariantError("table holds more labels than the label space")
    pv_d, tu_d, ku_d = delta_column_scores(table.delta, table.weights, entropy) \
        if tail else (0.0, 0.0, 0.0)
    return {
        "tu": float(scores.tu.sum() + tail * tu_d),
        "ku": float(scores.ku.sum() + tail * ku_d),
        "pv": float(scores.pv.sum() + tail * pv_d),
        "tail_labels": int(tail),
    }


def energy_scores(probs):
    """Single-model energy terms from label probabilities.

    Per label with logit f = ln(p / (1-p)), the energy is
    -ln(1 + e^f) = ln(1-p); the joint energy adds up ln(1 + e^f) =
    -ln(1-p) over the given labels (higher = more in-distribution).
    Returns (per-label energy, joint energy).
    """
    p = np.clip(np.asarray(probs, dtype=np.float64), 1e-12, 1.0 - 1e-12)
    energy = np.log1p(-p)
    return energy, float(-energy.sum())


@dataclass
class UncertaintyReport:
    """Per-label and per-instance uncertainty for one test instance."""

    labels: np.ndarray
    pv: np.ndarray
    tu: np.ndarray
    ku: np.ndarray
    mean_prob: np.ndarray
    instance: dict
    mode: str  # "exact" | "beam"
    beam_width: int
    top_k: int
    delta: float
    entropy: str = "binary"
    ku_clamped: int = 0

    def ranking(self):
        """Labels by mixed probability descending, ascending-id ties."""
        order = np.lexsort((self.labels, -self.mean_prob))
        return self.labels[order], self.mean_prob[order]

    def misclassification_scores(self, metric: str) -> np.ndarray:
        """Per-label uncertainty used to rank suspect labels."""
        if metric in ("pv", "tu", "ku"):
            return getattr(self, metric)
        if metric == "energy":
            energy, _ = energy_scores(self.mean_prob)
            return -energy
        raise InvariantError(f"unknown misclassification metric {metric!r}")

    def instance_score(self, metric: str) -> float:
        """Instance-level uncertainty (higher = more anomalous)."""
        if metric in ("pv", "tu", "ku"):
            return self.instance[metric]
        if metric == "joint-energy":
            return -self.instance["joint_energy"]
        raise InvariantError(f"unknown instance metric {metric!r}")


def _build_report(table: LabelProbTable, mode: str, beam_width: int, top_k: int,
                  entropy: str) -> UncertaintyReport:
    scores = label_uncertainty(table, entropy)
    inst = instance_uncertainty(scores, table, entropy)
    _, joint = energy_scores(scores.mean_prob)
    inst["joint_energy"] = joint
    return UncertaintyReport(
        labels=table.labels,
        pv=scores.pv,
        tu=scores.tu,
        ku=scores.ku,
        mean_prob=scores.mean_prob,
        instance=inst,
        mode=mode,
        beam_width=beam_width,
        top_k=top_k,
        delta=table.delta,
        entropy=entropy,
        ku_clamped=scores.ku_clamped,
    )


def approximate_uncertainty(ens: EnsembleModel, x, beam_width: int = 50,
                            top_k: int = 100, delta: float = DEFAULT_DELTA,
                            entropy: str = "binary") -> UncertaintyReport:
    """Beam-search approximation: member probabilities for the union of
    retrieved labels, delta imputed elsewhere."""
    if not 0.0 < delta <= 1e-4:
        raise InvariantError("delta must lie in (0, 1e-4]")
    member_results, _top_out = ensemble_predict(ens, x, beam_width, top_k, delta)
    union, probs, _mixed = combine_results(
        member_results, ens.weights, ens.n_labels, delta
    )
    table = LabelProbTable(union, probs, delta, ens.weights, ens.n_labels)
    return _build_report(table, "beam", beam_width, top_k, entropy)


def exact_uncertainty(ens: EnsembleModel, x,
                      entropy: str = "binary") -> UncertaintyReport:
    """Exhaustive oracle: every member scored on every label."""
    n_labels = ens.n_labels
    probs = np.empty((n_labels, ens.n_members))
    for j, member in enumerate(ens.members):
        probs[:, j] = exhaustive_predict(member, x).probs
    table = LabelProbTable(
        np.arange(n_labels, dtype=np.int64), probs, 0.0, ens.weights, n_labels
    )
    return _build_report(table, "exact", 0, 0, entropy)


def dump_reports(reports, path) -> None:
    """Tab-separated text dump: one row per (instance, label) plus one
    instance summary row; six significant digits."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("instance\tlabel\tpv\ttu\tku\tmean_prob\n")
        for i, r in enumerate(reports):
            for j in range(r.labels.size):
                fh.write(
                    f"{i}\t{r.labels[j]}\t{r.pv[j]:.6g}\t{r.tu[j]:.6g}"
                    f"\t{r.ku[j]:.6g}\t{r.mean_prob[j]:.6g}\n"
                )
            inst = r.instance
            fh.write(
                f"{i}\tALL\t{inst['pv']:.6g}\t{inst['tu']:.6g}"
                f"\t{inst['ku']:.6g}\t{-inst['joint_energy']:.6g}\n"
            )


def save_reports_npz(reports, path) -> None:
    """Compact binary dump consumed by the evaluation tooling."""
    if not reports:
        raise InvariantError("nothing to save: empty report list")
    offsets = np.zeros(len(reports) + 1, dtype=np.int64)
    for i, r in enumerate(reports):
        offsets[i + 1] = offsets[i] + r.labels.size
    first = reports[0]
    np.savez_compressed(
        path,
        offsets=offsets,
        labels=np.concatenate([r.labels for r in reports]),
        pv=np.concatenate([r.pv for r in reports]),
        tu=np.concatenate([r.tu for r in reports]),
        ku=np.concatenate([r.ku for r in reports]),
        mean_prob=np.concatenate([r.mean_prob for r in reports]),
        instance_tu=np.array([r.instance["tu"] for r in reports]),
        instance_ku=np.array([r.instance["ku"] for r in reports]),
        instance_pv=np.array([r.instance["pv"] for r in reports]),
        joint_energy=np.array([r.instance["joint_energy"] for r in reports]),
        mode=np.array(first.mode),
        beam_width=np.array(first.beam_width),
        top_k=np.array(first.top_k),
        delta=np.array(first.delta),
        entropy=np.array(first.entropy),
    )


def load_reports_npz(path) -> list:
    z = np.load(path, allow_pickle=False)
    offsets = z["offsets"]
    out = []
    for i in range(offsets.size - 1):
        lo, hi = offsets[i], offsets[i + 1]
        out.append(UncertaintyReport(
            labels=z["labels"][lo:hi],
            pv=z["pv"][lo:hi],
            tu=z["tu"][lo:hi],
            ku=z["ku"][lo:hi],
            mean_prob=z["mean_prob"][lo:hi],
            instance={
                "tu": float(z["instance_tu"][i]),
                "ku": float(z["instance_ku"][i]),
                "pv": float(z["instance_pv"][i]),
                "joint_energy": float(z["joint_energy"][i]),
            },
            mode=str(z["mode"]),
            beam_width=int(z["beam_width"]),
            top_k=int(z["top_k"]),
            delta=float(z["delta"]),
            entropy=str(z["entropy"]),
        ))
    return out
