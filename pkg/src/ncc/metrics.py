"""Clustering quality metrics computed from the label contingency table.

All of nmi/ami/ari/cluster_acc are invariant to label permutations on either
side. Degenerate partitions (a single cluster on one side) follow the usual
defined limits: identical partitions score 1, otherwise 0 for nmi, and the
ami/ari formulas already return 0 there except when their denominators
vanish, which again means both partitions are trivial.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from math import lgamma, log

import numpy as np
from scipy.optimize import linear_sum_assignment

__all__ = [
    "MetricsReport", "contingency", "nmi", "ami", "ari", "cluster_acc",
    "imbalance_ratio", "uniformity_std",
]


def _check_labels(y_true, y_pred):
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.ndim != 1 or y_pred.ndim != 1 or y_true.shape != y_pred.shape:
        raise ValueError("label arrays must be 1-d and the same length")
    if y_true.size == 0:
        raise ValueError("label arrays must be non-empty")
    return y_true, y_pred


def contingency(y_true, y_pred) -> np.ndarray:
    """Counts n[i, j] of items with true label i and predicted label j."""
    y_true, y_pred = _check_labels(y_true, y_pred)
    _, ti = np.unique(y_true, return_inverse=True)
    _, pi = np.unique(y_pred, return_inverse=True)
    table = np.zeros((ti.max() + 1, pi.max() + 1), dtype=np.int64)
    np.add.at(table, (ti, pi), 1)
    return table


def _entropy(counts, n):
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def _mutual_information(table):
    n = table.sum()
    a = table.sum(axis=1)
    b = table.sum(axis=0)
    mi = 0.0
    for i in range(table.shape[0]):
        for j in range(table.shape[1]):
            nij = table[i, j]
            if nij > 0:
                mi += (nij / n) * log(n * nij / (a[i] * b[j]))
    return max(mi, 0.0)


def _same_partition(y_true, y_pred):
    """True when the two labelings induce the same equivalence classes."""
    table = contingency(y_true, y_pred)
    return (np.count_nonzero(table, axis=0) <= 1).all() and \
           (np.count_nonzero(table, axis=1) <= 1).all()


def nmi(y_true, y_pred) -> float:
    """Mutual information over the geometric mean of the entropies."""
    y_true, y_pred = _check_labels(y_true, y_pred)
    table = contingency(y_true, y_pred)
    n = table.sum()
    h_t = _entropy(table.sum(axis=1), n)
    h_p = _entropy(table.sum(axis=0), n)
    if h_t == 0.0 or h_p == 0.0:
        return 1.0 if _same_partition(y_true, y_pred) else 0.0
    val = _mutual_information(table) / np.sqrt(h_t * h_p)
    return float(min(max(val, 0.0), 1.0))


def _expected_mi(table) -> float:
    """E[MI] under the fixed-margin hypergeometric (permutation) model."""
    n = int(table.sum())
    a = table.sum(axis=1).astype(np.int64)
    b = table.sum(axis=0).astype(np.int64)
    gln = [lgamma(m + 1) for m in range(n + 1)]
    emi = 0.0
    for ai in a:
        for bj in b:
            lo = max(1, ai + bj - n)
            hi = min(ai, bj)
            for nij in range(lo, hi + 1):
                term = (nij / n) * log(n * nij / (ai * bj))
                lp = (gln[ai] + gln[bj] + gln[n - ai] + gln[n - bj]
                      - gln[n] - gln[nij] - gln[ai - nij] - gln[bj - nij]
                      - gln[n - ai - bj + nij])
                emi += term * np.exp(lp)
    return emi


def ami(y_true, y_pred) -> float:
    """Adjusted mutual information, arithmetic-mean normalizer."""
    y_true, y_pred = _check_labels(y_true, y_pred)
    table = contingency(y_true, y_pred)
    n = table.sum()
    h_t = _entropy(table.sum(axis=1), n)
    h_p = _entropy(table.sum(axis=0), n)
    if _same_partition(y_true, y_pred):
        return 1.0
    mi = _mutual_information(table)
    emi = _expected_mi(table)
    denom = 0.5 * (h_t + h_p) - emi
    if abs(denom) < 1e-15:
        return 0.0
    return float((mi - emi) / denom)


def ari(y_true, y_pred) -> float:
    """Adjusted Rand index by pair counting on the contingency table."""
    y_true, y_pred = _check_labels(y_true, y_pred)
    table = contingency(y_true, y_pred)
    n = int(table.sum())

    def comb2(x):
        return x * (x - 1) / 2.0

    index = comb2(table).sum()
    sum_a = comb2(table.sum(axis=1)).sum()
    sum_b = comb2(table.sum(axis=0)).sum()
    total = comb2(n)
    expected = sum_a * sum_b / total if total > 0 else 0.0
    max_index = 0.5 * (sum_a + sum_b)
    denom = max_index - expected
    if abs(denom) < 1e-15:
        return 1.0 if _same_partition(y_true, y_pred) else 0.0
    return float((index - expected) / denom)


def cluster_acc(y_true, y_pred) -> float:
    """Accuracy under the best one-to-one cluster-to-class matching.

    The contingency table is zero-padded to square so surplus clusters on
    either side match dummies, then solved by the Hungarian method.
    """
    y_true, y_pred = _check_labels(y_true, y_pred)
    table = contingency(y_true, y_pred)
    k = max(table.shape)
    padded = np.zeros((k, k), dtype=np.int64)
    padded[: table.shape[0], : table.shape[1]] = table
    rows, cols = linear_sum_assignment(-padded)
    return float(padded[rows, cols].sum() / table.sum())


def imbalance_ratio(labels) -> float:
    """min/max of per-cluster counts over clusters that are present."""
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.size == 0:
        raise ValueError("labels must be a non-empty 1-d array")
    counts = np.unique(labels, return_counts=True)[1]
    return float(counts.min() / counts.max())


def uniformity_std(z) -> float:
    """Mean over dimensions of the per-dimension standard deviation.

    For unit rows spread uniformly over the sphere this approaches
    1/sqrt(d); it collapses to 0 when all rows coincide.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] == 0:
        raise ValueError("uniformity_std expects a non-empty n x d matrix")
    return float(z.std(axis=0).mean())


@dataclass
class MetricsReport:
    """One evaluation snapshot; label-dependent fields are None when the
    dataset carries no ground truth."""
    nmi: float | None
    ami: float | None
    ari: float | None
    acc: float | None
    imbalance: float
    std: float

    @staticmethod
    def compute(y_pred, z, y_true=None) -> "MetricsReport":
        if y_true is not None:
            return MetricsReport(
                nmi=nmi(y_true, y_pred), ami=ami(y_true, y_pred),
                ari=ari(y_true, y_pred), acc=cluster_acc(y_true, y_pred),
                imbalance=imbalance_ratio(y_pred), std=uniformity_std(z))
        return MetricsReport(nmi=None, ami=None, ari=None, acc=None,
                             imbalance=imbalance_ratio(y_pred),
                             std=uniformity_std(z))

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)
