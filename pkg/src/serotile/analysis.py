"""Evaluation helpers: confusion matrices, error clustering, feature
correlation structure, and ROC analysis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.cluster.hierarchy import leaves_list, linkage

from .errors import (LengthMismatchError, SingleClassError, TooFewRowsError)
from .svm import standardize_apply, standardize_fit


@dataclass(frozen=True)
class ConfusionMatrix:
    """2x2 confusion counts; rows are true labels, columns predictions."""

    labels: tuple
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        total = self.total
        if total == 0:
            return 0.0
        return float(np.trace(self.counts)) / total

    def to_rows(self):
        """CSV-ready rows: header then one row per true label."""
        header = ["true\\pred"] + list(self.labels)
        rows = [header]
        for i, lab in enumerate(self.labels):
            rows.append([lab] + [int(v) for v in self.counts[i]])
        return rows


def confusion(true_labels, predicted_labels, labels) -> ConfusionMatrix:
    """Count prediction outcomes over a fixed label vocabulary."""
    true_labels = list(true_labels)
    predicted_labels = list(predicted_labels)
    if len(true_labels) != len(predicted_labels):
        raise LengthMismatchError("true and predicted lengths differ")
    labels = tuple(labels)
    index = {lab: i for i, lab in enumerate(labels)}
    counts = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for t, p in zip(true_labels, predicted_labels):
        if t not in index or p not in index:
            raise ValueError(f"label outside vocabulary: {t!r}/{p!r}")
        counts[index[t], index[p]] += 1
    return ConfusionMatrix(labels=labels, counts=counts)


def _kmeans_plus_plus(z: np.ndarray, k: int, rng) -> np.ndarray:
    """Standard k-means++ seeding on standardized rows."""
    n = z.shape[0]
    centers = np.empty((k, z.shape[1]))
    first = int(rng.integers(n))
    centers[0] = z[first]
    closest = np.sum((z - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = float(closest.sum())
        if total <= 0:
            # all points coincide with chosen centers; reuse a point
            centers[i] = z[int(rng.integers(n))]
            continue
        probs = closest / total
        pick = int(rng.choice(n, p=probs))
        centers[i] = z[pick]
        closest = np.minimum(closest, np.sum((z - centers[i]) ** 2, axis=1))
    return centers


def cluster_misclassified(matrix, k: int = 10, seed: int = 0,
                          max_iters: int = 300):
    """Group misclassified-cell feature rows into k clusters.

    Features are standardized, seeded with k-means++, and refined by
    Lloyd iterations until assignments stop changing (or ``max_iters``).
    k is reduced to the number of rows when there are fewer rows than
    clusters. Ties in assignment go to the lower cluster index.

    Returns
    -------
    assignments : (n,) int array of cluster indices
    representatives : list of int
        Per cluster, the row index nearest its centroid (lower index on
        ties); -1 for a cluster that ends up empty.
    """
    x = np.asarray(matrix, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise TooFewRowsError("clustering needs at least one row")
    n = x.shape[0]
    k = min(k, n)
    if n < 2:
        return np.zeros(n, dtype=np.int64), [0]
    mean, std = standardize_fit(x)
    z = standardize_apply(x, mean, std)

    rng = np.random.default_rng(seed)
    centers = _kmeans_plus_plus(z, k, rng)
    d2 = ((z[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    assignments = np.argmin(d2, axis=1)
    for _ in range(max_iters):
        for c in range(k):
            members = z[assignments == c]
            if members.shape[0] > 0:
                centers[c] = members.mean(axis=0)
        d2 = ((z[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = np.argmin(d2, axis=1)
        if np.array_equal(new_assign, assignments):
            break
        assignments = new_assign

    representatives = []
    for c in range(k):
        idx = np.nonzero(assignments == c)[0]
        if idx.size == 0:
            representatives.append(-1)
            continue
        d2 = ((z[idx] - centers[c]) ** 2).sum(axis=1)
        representatives.append(int(idx[int(np.argmin(d2))]))
    return assignments, representatives


def feature_correlation(matrix):
    """Pearson correlation matrix reordered by average-linkage leaf order.

    Constant columns correlate 0 with everything (diagonal stays 1).
    Hierarchical clustering runs on the distance 1 - |r|, and the matrix
    is returned with rows/columns permuted to the dendrogram leaf order.

    Returns
    -------
    reordered : (d, d) correlation matrix in leaf order
    order : (d,) int array mapping reordered position -> original column
    """
    x = np.asarray(matrix, dtype=np.float64)
    if x.ndim != 2:
        raise LengthMismatchError("matrix must be 2-D")
    if x.shape[0] < 3:
        raise TooFewRowsError("correlation needs at least 3 rows")
    d = x.shape[1]
    col_mean = x.mean(axis=0)
    centered = x - col_mean
    norms = np.sqrt((centered ** 2).sum(axis=0))
    # centering identical values leaves ~1e-16 residue; treat as constant
    floor = 1e-12 * np.sqrt(x.shape[0]) * np.maximum(1.0, np.abs(col_mean))
    constant = norms <= floor
    safe = np.where(constant, 1.0, norms)
    unit = centered / safe
    corr = unit.T @ unit
    corr[constant, :] = 0.0
    corr[:, constant] = 0.0
    np.fill_diagonal(corr, 1.0)
    corr = np.clip(corr, -1.0, 1.0)

    if d < 3:
        order = np.arange(d)
        return corr, order
    dist = 1.0 - np.abs(corr)
    iu = np.triu_indices(d, k=1)
    condensed = np.maximum(dist[iu], 0.0)
    tree = linkage(condensed, method="average")
    order = np.asarray(leaves_list(tree))
    return corr[np.ix_(order, order)], order


def roc_curve(decisions, labels):
    """ROC points and area under the curve for signed decision values.

    A sample is called positive when its decision value is >= the sweep
    threshold; thresholds visit every distinct decision value from high
    to low, preceded by +inf for the (0, 0) corner.

    Returns
    -------
    points : (m, 3) array of (fpr, tpr, threshold)
    auc : float
        Trapezoidal area; equals the pairwise concordance probability
        with ties counted half.
    """
    d = np.asarray(decisions, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if d.shape[0] != y.shape[0]:
        raise LengthMismatchError("decisions and labels lengths differ")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise ValueError("labels must be -1 or +1")
    n_pos = int(np.sum(y > 0))
    n_neg = int(np.sum(y < 0))
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("ROC needs both classes present")

    order = np.argsort(-d, kind="stable")
    d_sorted = d[order]
    y_sorted = y[order]
    tp = np.cumsum(y_sorted > 0)
    fp = np.cumsum(y_sorted < 0)
    # keep the last index of each run of equal decision values
    distinct = np.nonzero(np.diff(d_sorted, append=-np.inf))[0]
    tpr = tp[distinct] / n_pos
    fpr = fp[distinct] / n_neg
    thresholds = d_sorted[distinct]
    points = np.column_stack([
        np.concatenate([[0.0], fpr]),
        np.concatenate([[0.0], tpr]),
        np.concatenate([[np.inf], thresholds]),
    ])
    auc = float(np.trapezoid(points[:, 1], points[:, 0]))
    return points, auc
