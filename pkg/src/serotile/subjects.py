"""Subject-level consensus from patch decision values by bootstrap.

Each subject contributes the signed decision values of its eligible
patches. Resampling those values with replacement B times gives a
distribution of mean decisions; the subject call is the sign of the
median replicate mean, and the fraction of positive replicate means is
reported as a confidence-style score.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NoEligiblePatchesError

DEFAULT_REPLICATES = 1000


@dataclass(frozen=True)
class SubjectCall:
    subject_id: str
    n_patches: int
    replicate_means: np.ndarray
    fraction_positive: float
    predicted: str
    seed: int


def bootstrap_call(subject_id: str, decisions, positive_label: str,
                   negative_label: str, replicates: int = DEFAULT_REPLICATES,
                   seed: int = 0) -> SubjectCall:
    """Bootstrap the mean patch decision of one subject.

    Replicate r draws n patches with replacement using an RNG seeded by
    (seed, r), so any replicate can be reproduced in isolation and the
    full vector of replicate means is deterministic. The call is
    ``positive_label`` when the median replicate mean is positive; an
    exact zero median goes to ``negative_label``.
    """
    d = np.asarray(decisions, dtype=np.float64).ravel()
    n = d.shape[0]
    if n == 0:
        raise NoEligiblePatchesError(
            f"subject {subject_id} has no eligible patches")
    if replicates < 1:
        raise ValueError("replicates must be at least 1")

    means = np.empty(replicates)
    for r in range(replicates):
        rng = np.random.default_rng((seed, r))
        idx = rng.integers(0, n, size=n)
        means[r] = d[idx].mean()
    fraction = float(np.mean(means > 0))
    median = float(np.median(means))
    predicted = positive_label if median > 0 else negative_label
    return SubjectCall(subject_id=subject_id, n_patches=n,
                       replicate_means=means, fraction_positive=fraction,
                       predicted=predicted, seed=seed)
