"""Confusion, clustering, correlation ordering, and ROC tests."""

import numpy as np
import pytest

from serotile.analysis import (ConfusionMatrix, cluster_misclassified,
                               confusion, feature_correlation, roc_curve)
from serotile.errors import (LengthMismatchError, SingleClassError,
                             TooFewRowsError)


def test_confusion_counts_by_enumeration():
    true = ["tumor", "tumor", "stroma", "stroma", "tumor"]
    pred = ["tumor", "stroma", "stroma", "tumor", "tumor"]
    cm = confusion(true, pred, ("tumor", "stroma"))
    assert cm.counts.tolist() == [[2, 1], [1, 1]]
    assert cm.accuracy == pytest.approx(3 / 5)
    rows = cm.to_rows()
    assert rows[0] == ["true\\pred", "tumor", "stroma"]
    assert rows[1] == ["tumor", 2, 1]
    assert rows[2] == ["stroma", 1, 1]


def test_confusion_random_agreement_with_manual_count():
    rng = np.random.default_rng(12)
    labs = ("tumor", "stroma")
    for _ in range(10):
        true = [labs[i] for i in rng.integers(0, 2, size=50)]
        pred = [labs[i] for i in rng.integers(0, 2, size=50)]
        cm = confusion(true, pred, labs)
        manual = sum(t == p for t, p in zip(true, pred))
        assert int(np.trace(cm.counts)) == manual
        assert cm.total == 50


def test_confusion_validation():
    with pytest.raises(LengthMismatchError):
        confusion(["a"], [], ("a", "b"))
    with pytest.raises(ValueError):
        confusion(["a"], ["c"], ("a", "b"))
    assert ConfusionMatrix(("a", "b"), np.zeros((2, 2), int)).accuracy == 0.0


def test_cluster_misclassified_separated_blobs():
    rng = np.random.default_rng(40)
    blobs = [rng.normal(size=(12, 3)) * 0.05 + center
             for center in ((0, 0, 0), (10, 0, 0), (0, 10, 0))]
    x = np.vstack(blobs)
    assignments, reps = cluster_misclassified(x, k=3, seed=1)
    # each blob maps to exactly one cluster
    for b in range(3):
        block = assignments[12 * b:12 * (b + 1)]
        assert np.unique(block).size == 1
    assert np.unique(assignments).size == 3
    # representative of each cluster belongs to that cluster
    for c, rep in enumerate(reps):
        assert assignments[rep] == c


def test_cluster_misclassified_k_capped_and_deterministic():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(6, 4))
    a1, r1 = cluster_misclassified(x, k=10, seed=3)
    a2, r2 = cluster_misclassified(x, k=10, seed=3)
    assert np.array_equal(a1, a2)
    assert r1 == r2
    assert a1.max() < 6
    with pytest.raises(TooFewRowsError):
        cluster_misclassified(np.zeros((0, 3)))


def test_feature_correlation_reorders_related_columns():
    rng = np.random.default_rng(2)
    base = rng.normal(size=200)
    other = rng.normal(size=200)
    # columns 0 and 2 are near-duplicates; 1 and 3 track a different signal
    x = np.column_stack([
        base, other, base + 0.01 * rng.normal(size=200),
        other + 0.01 * rng.normal(size=200), rng.normal(size=200)])
    reordered, order = feature_correlation(x)
    pos = {col: i for i, col in enumerate(order)}
    assert abs(pos[0] - pos[2]) == 1  # correlated pair ends up adjacent
    assert abs(pos[1] - pos[3]) == 1
    assert np.allclose(np.diag(reordered), 1.0)
    # symmetric and a permutation of the unordered correlation
    assert np.allclose(reordered, reordered.T, atol=1e-12)


def test_feature_correlation_constant_column():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(30, 3))
    x[:, 1] = 4.2
    reordered, order = feature_correlation(x)
    j = int(np.nonzero(order == 1)[0][0])
    off_diag = np.delete(reordered[j], j)
    assert np.all(off_diag == 0.0)
    assert reordered[j, j] == 1.0


def auc_concordance(decisions, labels):
    """Pairwise concordance probability, ties counted half."""
    d = np.asarray(decisions, float)
    y = np.asarray(labels, float)
    pos = d[y > 0]
    neg = d[y < 0]
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return (wins + 0.5 * ties) / (pos.size * neg.size)


def test_roc_auc_matches_concordance_oracle():
    rng = np.random.default_rng(27)
    for _ in range(12):
        n = int(rng.integers(8, 60))
        y = np.where(rng.random(n) < 0.5, 1.0, -1.0)
        if np.unique(y).size < 2:
            continue
        d = rng.normal(size=n) + 0.8 * y
        if rng.random() < 0.5:
            d = np.round(d, 1)  # force ties
        points, auc = roc_curve(d, y)
        assert auc == pytest.approx(auc_concordance(d, y), abs=1e-12)
        # curve runs from (0,0) to (1,1), monotone in both axes
        assert points[0, 0] == 0.0 and points[0, 1] == 0.0
        assert points[-1, 0] == 1.0 and points[-1, 1] == 1.0
        assert np.all(np.diff(points[:, 0]) >= 0)
        assert np.all(np.diff(points[:, 1]) >= 0)
        assert points[0, 2] == np.inf


def test_roc_perfect_and_inverted():
    y = np.array([1.0, 1.0, -1.0, -1.0])
    _, auc = roc_curve(np.array([3.0, 2.0, 1.0, 0.5]), y)
    assert auc == 1.0
    _, auc = roc_curve(np.array([0.5, 1.0, 2.0, 3.0]), y)
    assert auc == 0.0


def test_roc_monotone_relabeling_invariance():
    rng = np.random.default_rng(33)
    y = np.where(rng.random(40) < 0.5, 1.0, -1.0)
    y[:2] = [1.0, -1.0]
    d = rng.normal(size=40)
    points, auc = roc_curve(d, y)
    # strictly increasing transforms leave fpr/tpr and auc unchanged
    for transform in (lambda v: 3 * v + 2, np.tanh, lambda v: v ** 3):
        p2, a2 = roc_curve(transform(d), y)
        assert a2 == pytest.approx(auc, abs=1e-12)
        assert np.allclose(p2[:, :2], points[:, :2], atol=1e-12)


def test_roc_validation():
    with pytest.raises(SingleClassError):
        roc_curve([1.0, 2.0], [1.0, 1.0])
    with pytest.raises(LengthMismatchError):
        roc_curve([1.0], [1.0, -1.0])
    with pytest.raises(ValueError):
        roc_curve([1.0, 2.0], [1.0, 0.0])
