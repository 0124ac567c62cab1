"""L1-penalized least squares by cyclic coordinate descent, with a
cross-validated path for feature selection.

The objective is (1/2n)||y - b0 - X beta||^2 + lambda * ||beta||_1 with
the intercept unpenalized. Inputs are standardized columns, which makes
every coordinate update a closed-form soft-thresholding step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (ConvergenceError, DimensionMismatchError,
                     LengthMismatchError, SingleClassError, TooFewRowsError)
from .svm import LinearModel, standardize_apply, standardize_fit


def soft_threshold(z: float, gamma: float) -> float:
    """sign(z) * max(|z| - gamma, 0)."""
    if z > gamma:
        return z - gamma
    if z < -gamma:
        return z + gamma
    return 0.0


def lambda_max(x: np.ndarray, y: np.ndarray) -> float:
    """Smallest penalty that zeroes every coefficient.

    max_j |x_j . (y - mean(y))| / n over centered columns.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    n = x.shape[0]
    if y.shape[0] != n:
        raise LengthMismatchError("x rows and y length differ")
    xc = x - x.mean(axis=0)
    r = y - y.mean()
    return float(np.max(np.abs(xc.T @ r)) / n)


def lasso_fit(x, y, lam: float, tol: float = 1e-7,
              max_sweeps: int = 100000, beta0=None):
    """Fit one penalty level by cyclic coordinate descent.

    Parameters
    ----------
    x : (n, d) matrix, standardized columns
    y : (n,) responses
    lam : penalty, >= 0
    beta0 : optional warm-start coefficients

    Returns
    -------
    beta : (d,) coefficients
    intercept : float
        mean(y) minus the column-mean correction, so predictions are
        ``intercept + row @ beta`` on raw input rows.
    n_sweeps : int

    Raises
    ------
    ConvergenceError
        If the largest coefficient change in a full sweep never drops
        below ``tol`` within ``max_sweeps``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.ndim != 2:
        raise DimensionMismatchError("x must be 2-D")
    n, d = x.shape
    if y.shape[0] != n:
        raise LengthMismatchError("x rows and y length differ")
    if n < 2:
        raise TooFewRowsError("lasso needs at least 2 rows")
    if lam < 0:
        raise ValueError("lam must be non-negative")

    col_mean = x.mean(axis=0)
    xc = x - col_mean
    y_mean = float(y.mean())
    beta = (np.zeros(d) if beta0 is None
            else np.asarray(beta0, dtype=np.float64).copy())
    if beta.shape != (d,):
        raise DimensionMismatchError("beta0 has a wrong shape")

    # at or above the zeroing penalty the optimum is exactly zero; decide
    # with the same matrix product lambda_max uses, because per-column
    # dot products can land an ulp higher and leave 1e-17 coefficients
    if lam >= float(np.max(np.abs(xc.T @ (y - y_mean))) / n):
        return np.zeros(d), y_mean, 0

    v = (xc * xc).sum(axis=0) / n  # 1.0 for standardized columns
    usable = v > 0  # constant columns stay at zero
    beta[~usable] = 0.0
    resid = (y - y_mean) - xc @ beta

    def sweep_over(cols) -> float:
        nonlocal resid
        max_delta = 0.0
        for j in cols:
            old = beta[j]
            z = (xc[:, j] @ resid) / n + v[j] * old
            new = soft_threshold(z, lam) / v[j]
            if new != old:
                resid -= (new - old) * xc[:, j]
                beta[j] = new
                max_delta = max(max_delta, abs(new - old))
        return max_delta

    all_cols = np.nonzero(usable)[0]
    sweeps = 0
    while sweeps < max_sweeps:
        # a full sweep decides convergence and admits new coordinates
        sweeps += 1
        if sweep_over(all_cols) < tol:
            intercept = y_mean - float(col_mean @ beta)
            return beta, intercept, sweeps
        # then iterate the current support only, which is much cheaper
        while sweeps < max_sweeps:
            sweeps += 1
            support = np.nonzero(beta)[0]
            if support.size == 0 or sweep_over(support) < tol:
                break
    raise ConvergenceError(f"lasso did not converge in {max_sweeps} sweeps")


def _cd_path(x, y, lambdas, tol: float, max_sweeps: int):
    """Coordinate descent along a descending penalty path, warm-started.

    Same coordinate updates as ``lasso_fit`` but engineered for many
    penalty levels on one data set: the gradient vector is maintained
    through the precomputed Gram matrix instead of the residual, each
    level solves over a screened candidate set (current support plus
    columns with |gradient| >= 2*lam_k - lam_{k-1}) with an exact
    backcheck that admits any screened-out violator, and the stop is the
    stationarity gap itself: every returned path point satisfies the KKT
    conditions within ``tol``. Coefficient-change stops stall on highly
    correlated columns, where mass shuffles between near-duplicates long
    after the gradient has converged; the gap stop does not.

    Returns (betas, intercepts): one coefficient vector and effective
    intercept per penalty level.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    n, d = x.shape
    col_mean = x.mean(axis=0)
    xc = x - col_mean
    y_mean = float(y.mean())
    yc = y - y_mean

    gram_n = (xc.T @ xc) / n  # symmetric, so rows double as columns
    v = np.diag(gram_n).copy()
    usable = v > 0
    beta = np.zeros(d)
    q = xc.T @ yc / n
    g = q.copy()  # x_j . resid / n, maintained through gram updates
    yy_n = float(yc @ yc) / n
    step = np.empty(d)

    def sweep_over(cols, lam) -> None:
        for j in cols:
            old = float(beta[j])
            z = float(g[j]) + v[j] * old
            new = soft_threshold(z, lam) / v[j]
            delta = new - old
            if delta != 0.0:
                beta[j] = new
                np.multiply(gram_n[j], delta, out=step)
                np.subtract(g, step, out=g)

    def gap_over(mask, lam) -> float:
        active = mask & (beta != 0.0)
        zero = mask & (beta == 0.0)
        worst = 0.0
        if active.any():
            worst = float(np.max(np.abs(g[active]
                                        - lam * np.sign(beta[active]))))
        if zero.any():
            worst = max(worst, float(np.max(np.abs(g[zero]))) - lam)
        return worst

    def refresh_gradient() -> None:
        nonlocal g
        np.copyto(g, q)
        support = np.nonzero(beta)[0]
        if support.size:
            g -= gram_n[:, support] @ beta[support]

    def objective(lam) -> float:
        # (1/2n)||yc - xc beta||^2 + lam*||beta||_1 via b'Gb = b.(q - g)
        support = np.nonzero(beta)[0]
        bs = beta[support]
        quad = yy_n - float((q[support] + g[support]) @ bs)
        return 0.5 * quad + lam * float(np.abs(bs).sum())

    def refine_support(lam) -> bool:
        # exact solve of the stationarity system on the current support:
        # gram_n[S,S] b = q_S - lam*sign(b). Coordinate updates alone crawl
        # when active columns are highly correlated; the solve is exact in
        # one shot. A solution whose signs flip is handled feature-sign
        # style: step to the first flip, drop that coordinate, re-solve.
        changed = False
        for _ in range(np.count_nonzero(beta) * 4 + 10):
            support = np.nonzero(beta)[0]
            if support.size == 0:
                break
            signs = np.sign(beta[support])
            sub = gram_n[np.ix_(support, support)]
            rhs = q[support] - lam * signs
            try:
                target = np.linalg.solve(sub, rhs)
            except np.linalg.LinAlgError:
                target, *_ = np.linalg.lstsq(sub, rhs, rcond=None)
            if not np.all(np.isfinite(target)):
                break
            flipped = np.sign(target) != signs
            if not flipped.any():
                beta[support] = target
                changed = True
                break
            # largest step along (target - beta) with no sign crossing
            cur = beta[support]
            with np.errstate(divide="ignore", invalid="ignore"):
                frac = np.where(flipped, cur / (cur - target), np.inf)
            t = float(np.min(frac[flipped]))
            if not (0.0 < t <= 1.0):
                break
            stepped = cur + t * (target - cur)
            stepped[frac <= t] = 0.0
            beta[support] = stepped
            changed = True
        if changed:
            refresh_gradient()
        return changed

    def solve_over(mask, lam) -> None:
        nonlocal beta, g
        cols = np.nonzero(mask)[0]
        sweeps = 0
        while sweeps < max_sweeps:
            sweeps += 1
            sweep_over(cols, lam)
            if gap_over(mask, lam) <= tol:
                return
            # exact solves go wrong on rank-deficient supports whose sign
            # pattern admits no stationary point, so accept by objective
            before = objective(lam)
            saved = (beta.copy(), g.copy())
            if refine_support(lam):
                if objective(lam) < before - 1e-15 * max(1.0, abs(before)):
                    if gap_over(mask, lam) <= tol:
                        return
                else:
                    beta, g = saved
            while sweeps < max_sweeps:
                sweeps += 1
                support = np.nonzero(beta)[0]
                sweep_over(support, lam)
                support_mask = np.zeros(d, dtype=bool)
                support_mask[support] = True
                if gap_over(support_mask, lam) <= tol:
                    break
        raise ConvergenceError(
            f"lasso path did not converge in {max_sweeps} sweeps")

    betas = []
    intercepts = []
    prev_lam = None
    for lam in lambdas:
        strong_bound = (2.0 * lam - prev_lam) if prev_lam is not None else lam
        candidates = usable & ((beta != 0.0) | (np.abs(g) >= strong_bound))
        while True:
            solve_over(candidates, lam)
            violators = (usable & ~candidates & (beta == 0.0)
                         & (np.abs(g) > lam + tol))
            if not violators.any():
                break
            candidates |= violators
        betas.append(beta.copy())
        intercepts.append(y_mean - float(col_mean @ beta))
        prev_lam = lam
    return betas, intercepts


def kkt_violation(x, y, beta, intercept, lam: float) -> float:
    """Largest violation of the stationarity conditions, for audits.

    For active coordinates |x_j . r / n - lam * sign(beta_j)| must be 0;
    for zero coordinates |x_j . r / n| must not exceed lam. Returns the
    max excess over both sets (0 at an exact optimum).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    beta = np.asarray(beta, dtype=np.float64)
    resid = y - intercept - x @ beta
    grad = x.T @ resid / x.shape[0]
    worst = 0.0
    for j in range(beta.shape[0]):
        if beta[j] != 0.0:
            worst = max(worst, abs(grad[j] - lam * np.sign(beta[j])))
        else:
            worst = max(worst, max(abs(grad[j]) - lam, 0.0))
    return worst


@dataclass
class LassoFit:
    """Selected-model bundle from the cross-validated path.

    ``lambda_path``, ``cv_mean``, ``cv_se``, and ``nnz_path`` all cover
    the full penalty path; ``chosen_index`` points at the 1-SE pick.
    """

    model: LinearModel
    lam: float
    chosen_index: int
    lambda_path: np.ndarray
    cv_mean: np.ndarray
    cv_se: np.ndarray
    nnz_path: np.ndarray
    nonzero: list = field(default_factory=list)  # (name, coef), |coef| desc

    @property
    def n_selected(self) -> int:
        return len(self.nonzero)


def _lambda_path(lam_max: float, n_lambdas: int, min_ratio: float):
    if lam_max <= 0:
        return np.zeros(1)
    return lam_max * np.power(min_ratio, np.linspace(0.0, 1.0, n_lambdas))


def _fold_indices(n: int, n_folds: int, rng) -> list:
    perm = rng.permutation(n)
    return [perm[f::n_folds] for f in range(n_folds)]


def lasso_select(matrix, y, feature_names, positive_label, negative_label,
                 n_lambdas: int = 100, lambda_min_ratio: float = 1e-3,
                 n_folds: int = 5, seed: int = 0, tol: float = 1e-7):
    """Feature selection by a cross-validated lasso path with the 1-SE rule.

    Builds a geometric penalty path from lambda_max down by
    ``lambda_min_ratio``, scores each level by K-fold mean squared error,
    and keeps the largest penalty whose mean error is within one standard
    error of the best. The final model is refit on all rows at that
    penalty. Features are standardized internally; responses are the
    labels coded +1 / -1.

    Returns a LassoFit whose ``model`` predicts with sign(decision).
    """
    x = np.asarray(matrix, dtype=np.float64)
    names = tuple(feature_names)
    if x.ndim != 2 or x.shape[1] != len(names):
        raise DimensionMismatchError(
            f"matrix shape {x.shape} does not match {len(names)} names")
    labels = list(y)
    if len(labels) != x.shape[0]:
        raise LengthMismatchError("labels and matrix rows differ")
    yv = np.array([1.0 if l == positive_label else -1.0 for l in labels])
    if np.unique(yv).size < 2:
        raise SingleClassError("lasso selection needs both classes")
    n = x.shape[0]
    if n < n_folds:
        raise TooFewRowsError(f"{n} rows cannot fill {n_folds} folds")

    mean, std = standardize_fit(x)
    z = standardize_apply(x, mean, std)
    path = _lambda_path(lambda_max(z, yv), n_lambdas, lambda_min_ratio)

    rng = np.random.default_rng(seed)
    folds = _fold_indices(n, n_folds, rng)
    fold_errors = np.zeros((n_folds, path.size))
    for f, val_idx in enumerate(folds):
        train_mask = np.ones(n, dtype=bool)
        train_mask[val_idx] = False
        zt, yt = z[train_mask], yv[train_mask]
        zv_, yv_ = z[val_idx], yv[val_idx]
        betas, intercepts = _cd_path(zt, yt, path, tol=tol,
                                     max_sweeps=100000)
        for li in range(path.size):
            pred = intercepts[li] + zv_ @ betas[li]
            fold_errors[f, li] = float(np.mean((yv_ - pred) ** 2))
    cv_mean = fold_errors.mean(axis=0)
    cv_se = fold_errors.std(axis=0, ddof=1) / np.sqrt(n_folds)

    best = int(np.argmin(cv_mean))
    limit = cv_mean[best] + cv_se[best]
    chosen = 0
    while chosen < path.size and cv_mean[chosen] > limit:
        chosen += 1
    lam_star = float(path[chosen])

    # full-data path, warm-started; keep the solution at the chosen level
    betas, intercepts = _cd_path(z, yv, path, tol=tol, max_sweeps=100000)
    nnz_path = np.array([np.count_nonzero(b) for b in betas], dtype=np.int64)
    chosen_beta = betas[chosen]
    chosen_intercept = intercepts[chosen]

    model = LinearModel(
        feature_names=names, mean=mean, std=std, weights=chosen_beta,
        bias=chosen_intercept, kind="lasso", positive_label=positive_label,
        negative_label=negative_label,
        hyperparams={"lambda": lam_star, "n_lambdas": n_lambdas,
                     "lambda_min_ratio": lambda_min_ratio,
                     "n_folds": n_folds, "tol": tol},
        seed=seed,
    )
    idx = np.nonzero(chosen_beta)[0]
    order = idx[np.argsort(-np.abs(chosen_beta[idx]), kind="stable")]
    nonzero = [(names[j], float(chosen_beta[j])) for j in order]
    return LassoFit(model=model, lam=lam_star, chosen_index=chosen,
                    lambda_path=path, cv_mean=cv_mean, cv_se=cv_se,
                    nnz_path=nnz_path, nonzero=nonzero)
