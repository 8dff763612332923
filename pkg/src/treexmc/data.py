"""Loader and writer for the plain-text multi-label dataset format.

File layout: a header line ``N D L`` followed by N lines of
``l1,l2,... f1:v1 f2:v2 ...`` where the (possibly empty) comma-separated
label list precedes space-separated feature:value pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError
from .sparse import SparseMatrix, l2_normalize_rows


@dataclass
class Dataset:
    """Feature and binary label matrices for one data split."""

    features: SparseMatrix
    labels: SparseMatrix
    normalized: bool = False
    zero_label_rows: np.ndarray = field(default_factory=lambda: np.array([], dtype=np.int64))

    @property
    def n(self) -> int:
        return self.features.rows

    @property
    def n_features(self) -> int:
        return self.features.cols

    @property
    def n_labels(self) -> int:
        return self.labels.cols

    def with_normalized_features(self) -> "Dataset":
        """Defensive copy with unit-L2 feature rows (no-op when already normalized)."""
        if self.normalized:
            return self
        return Dataset(
            l2_normalize_rows(self.features), self.labels, True, self.zero_label_rows
        )

    def select(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        sub_labels = self.labels.select_rows(rows)
        zero = np.flatnonzero(sub_labels.row_lengths() == 0)
        return Dataset(self.features.select_rows(rows), sub_labels, self.normalized, zero)

    def true_label_sets(self) -> list:
        lab = self.labels
        return [lab.indices[lab.indptr[i]:lab.indptr[i + 1]] for i in range(lab.rows)]


def _parse_header(line: str):
    parts = line.split()
    if len(parts) != 3:
        raise FormatError(f"header must be 'N D L', got {line!r}", line_no=1)
    try:
        n, d, l = (int(p) for p in parts)
    except ValueError:
        raise FormatError(f"non-integer header field in {line!r}", line_no=1) from None
    if n < 0 or d <= 0 or l <= 0:
        raise FormatError("header counts must be positive", line_no=1)
    return n, d, l


def load_xmc_text(path) -> Dataset:
    """Parse a dataset file, bounds-checking every index against the header.

    Duplicate feature ids on a line, indices at or past the declared
    dimension, and non-numeric values are all rejected with the offending
    line number.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        header = fh.readline()
        if not header:
            raise FormatError("empty file", line_no=1)
        n, d, l = _parse_header(header.rstrip("\r\n"))

        f_indptr = np.zeros(n + 1, dtype=np.int64)
        y_indptr = np.zeros(n + 1, dtype=np.int64)
        f_idx, f_val, y_idx = [], [], []

        for i in range(n):
            line_no = i + 2
            line = fh.readline()
            if not line:
                raise FormatError(f"expected {n} data lines, file ends early", line_no=line_no)
            line = line.rstrip("\r\n")
            label_part, _, feat_part = line.partition(" ")

            if label_part:
                try:
                    labels = sorted({int(t) for t in label_part.split(",")})
                except ValueError:
                    raise FormatError(f"non-integer label in {label_part!r}", line_no=line_no) from None
                if labels and (labels[0] < 0 or labels[-1] >= l):
                    bad = labels[0] if labels[0] < 0 else labels[-1]
                    raise FormatError(f"label index {bad} out of range [0, {l})", line_no=line_no)
                y_idx.extend(labels)
                y_indptr[i + 1] = y_indptr[i] + len(labels)
            else:
                y_indptr[i + 1] = y_indptr[i]

            pairs = []
            for tok in feat_part.split():
                idx_s, sep, val_s = tok.partition(":")
                if not sep:
                    raise FormatError(f"expected 'index:value', got {tok!r}", line_no=line_no)
                try:
                    j = int(idx_s)
                    v = float(val_s)
                except ValueError:
                    raise FormatError(f"non-numeric feature token {tok!r}", line_no=line_no) from None
                if j < 0 or j >= d:
                    raise FormatError(f"feature index {j} out of range [0, {d})", line_no=line_no)
                if not np.isfinite(v):
                    raise FormatError(f"non-finite feature value in {tok!r}", line_no=line_no)
                pairs.append((j, v))
            pairs.sort()
            for (j, _), (j2, _) in zip(pairs, pairs[1:]):
                if j == j2:
                    raise FormatError(f"duplicate feature index {j}", line_no=line_no)
            f_idx.extend(p[0] for p in pairs)
            f_val.extend(p[1] for p in pairs)
            f_indptr[i + 1] = f_indptr[i] + len(pairs)

    features = SparseMatrix(n, d, f_indptr, np.array(f_idx, dtype=np.int64), np.array(f_val))
    labels = SparseMatrix(
        n, l, y_indptr, np.array(y_idx, dtype=np.int64), np.ones(len(y_idx))
    )
    zero = np.flatnonzero(labels.row_lengths() == 0)
    return Dataset(features, labels, normalized=False, zero_label_rows=zero)


def dump_xmc_text(ds: Dataset, path) -> None:
    """Write the canonical form: sorted labels/features, shortest float repr."""
    f, y = ds.features, ds.labels
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{ds.n} {ds.n_features} {ds.n_labels}\n")
        for i in range(ds.n):
            labels = ",".join(str(j) for j in y.indices[y.indptr[i]:y.indptr[i + 1]])
            lo, hi = f.indptr[i], f.indptr[i + 1]
            feats = " ".join(
                f"{j}:{float(v)!r}" for j, v in zip(f.indices[lo:hi], f.values[lo:hi])
            )
            fh.write(labels + (" " + feats if feats else "") + "\n")
