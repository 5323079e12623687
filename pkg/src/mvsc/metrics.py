"""External clustering metrics: ACC (optimal matching), NMI (max-entropy), ARI."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment


@dataclass
class ContingencyTable:
    counts: np.ndarray  # (true classes, predicted clusters)

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    @property
    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def col_sums(self) -> np.ndarray:
        return self.counts.sum(axis=0)


def _check(y, s):
    y = np.asarray(y).reshape(-1)
    s = np.asarray(s).reshape(-1)
    if y.shape != s.shape:
        raise ValueError(f"label vectors differ in length: {y.size} vs {s.size}")
    return y, s


def contingency(y, s) -> ContingencyTable:
    """Counts over (true class, predicted cluster); arbitrary label values allowed."""
    y, s = _check(y, s)
    _, yi = np.unique(y, return_inverse=True)
    _, si = np.unique(s, return_inverse=True)
    counts = np.zeros((yi.max(initial=-1) + 1, si.max(initial=-1) + 1), dtype=np.int64)
    np.add.at(counts, (yi, si), 1)
    return ContingencyTable(counts)


def hungarian(cost):
    """Minimum-cost one-to-one assignment.

    Rectangular matrices are zero-padded to square. Returns ``(assignment,
    total)`` where ``assignment[r]`` is the column matched to row ``r`` of the
    padded matrix.
    """
    cost = np.asarray(cost, dtype=np.float64)
    size = max(cost.shape)
    padded = np.zeros((size, size))
    padded[: cost.shape[0], : cost.shape[1]] = cost
    rows, cols = linear_sum_assignment(padded)
    assignment = np.empty(size, dtype=np.int64)
    assignment[rows] = cols
    return assignment, float(padded[rows, cols].sum())


def acc(y, s) -> float:
    y, s = _check(y, s)
    if y.size == 0:
        return 0.0
    table = contingency(y, s).counts
    _, total = hungarian(-table)
    return float(-total / y.size)


def _entropy(counts, n):
    p = counts[counts > 0] / n
    return float(-np.sum(p * np.log(p)))


def nmi(y, s) -> float:
    """I(y; s) / max(H(y), H(s)), taken as 0 when the mutual information is 0."""
    y, s = _check(y, s)
    if y.size == 0:
        return 0.0
    t = contingency(y, s)
    n = t.n
    nz = t.counts > 0
    outer = np.outer(t.row_sums, t.col_sums).astype(np.float64)
    mi = float(np.sum(t.counts[nz] / n * np.log(t.counts[nz] * n / outer[nz])))
    if mi <= 0.0:
        return 0.0
    return float(min(1.0, mi / max(_entropy(t.row_sums, n), _entropy(t.col_sums, n))))


def _comb2_sum(counts) -> int:
    return sum(int(c) * (int(c) - 1) // 2 for c in np.asarray(counts).reshape(-1))


def ari(y, s) -> float:
    """Adjusted Rand index. Identical degenerate partitions score 1.0."""
    y, s = _check(y, s)
    t = contingency(y, s)
    # exact integer pair counts; the ratio is formed once at the end
    index = _comb2_sum(t.counts)
    a = _comb2_sum(t.row_sums)
    b = _comb2_sum(t.col_sums)
    total = t.n * (t.n - 1) // 2
    num = index * total - a * b
    den = (a + b) * total - 2 * a * b
    if den == 0:
        return 1.0
    return float(2 * num / den)


def evaluate(y, s) -> dict:
    return {"ACC": acc(y, s), "NMI": nmi(y, s), "ARI": ari(y, s)}
