"""Lasso tests: closed-form oracles, KKT audits, path and selection."""

import numpy as np
import pytest

from serotile.errors import (ConvergenceError, DimensionMismatchError,
                             LengthMismatchError, SingleClassError,
                             TooFewRowsError)
from serotile.lasso import (LassoFit, _cd_path, _lambda_path, kkt_violation,
                            lambda_max, lasso_fit, lasso_select,
                            soft_threshold)
from serotile.svm import standardize_apply, standardize_fit


def random_problem(rng, n, d, correlated=False):
    x = rng.normal(size=(n, d))
    if correlated:
        # mix columns so coordinate descent cannot finish in one sweep
        mix = np.eye(d) + 0.6 * rng.uniform(size=(d, d))
        x = x @ mix
    w = np.zeros(d)
    w[rng.choice(d, size=max(1, d // 4), replace=False)] = rng.normal(
        size=max(1, d // 4))
    y = x @ w + 0.1 * rng.normal(size=n)
    return x, y


def orthonormal_design(rng, n, d):
    # columns orthogonal to the ones vector and to each other, scaled so
    # that (1/n) x.T x is the identity after centering
    raw = np.column_stack([np.ones(n), rng.normal(size=(n, d))])
    q, _ = np.linalg.qr(raw)
    return q[:, 1:] * np.sqrt(n)


def test_soft_threshold_values():
    assert soft_threshold(3.0, 1.0) == 2.0
    assert soft_threshold(-3.0, 1.0) == -2.0
    assert soft_threshold(0.5, 1.0) == 0.0
    assert soft_threshold(-0.5, 1.0) == 0.0
    assert soft_threshold(2.0, 0.0) == 2.0
    assert soft_threshold(1.0, 1.0) == 0.0


def test_lambda_max_matches_brute_force():
    rng = np.random.default_rng(11)
    for _ in range(10):
        x = rng.normal(size=(17, 6)) * rng.uniform(0.5, 3.0, size=6)
        y = rng.normal(size=17)
        xc = x - x.mean(axis=0)
        r = y - y.mean()
        expect = max(abs(float(xc[:, j] @ r)) / 17 for j in range(6))
        assert lambda_max(x, y) == pytest.approx(expect, rel=1e-12)


def test_all_zero_at_and_above_lambda_max():
    rng = np.random.default_rng(23)
    for _ in range(8):
        x, y = random_problem(rng, 40, 12, correlated=True)
        lmax = lambda_max(x, y)
        for lam in (lmax, 1.5 * lmax):
            beta, intercept, _ = lasso_fit(x, y, lam)
            assert np.all(beta == 0.0)
            assert intercept == pytest.approx(float(np.mean(y)), rel=1e-12)
        beta, _, _ = lasso_fit(x, y, 0.95 * lmax)
        assert np.count_nonzero(beta) >= 1


def test_orthonormal_design_closed_form():
    # with (1/n) x.T x = I every coordinate decouples and the solution is
    # soft_threshold applied to the per-column OLS coefficients
    rng = np.random.default_rng(3)
    for trial in range(6):
        n, d = 60, 9
        x = orthonormal_design(rng, n, d)
        y = rng.normal(size=n) * 2.0
        q = x.T @ (y - y.mean()) / n
        lmax = float(np.max(np.abs(q)))
        for lam in (0.0, 0.2 * lmax, 0.6 * lmax, 0.9 * lmax):
            beta, intercept, _ = lasso_fit(x, y, lam)
            expect = np.array([soft_threshold(float(qj), lam) for qj in q])
            assert np.max(np.abs(beta - expect)) < 1e-6
            assert kkt_violation(x, y, beta, intercept, lam) < 1e-6


def test_kkt_violation_zero_at_optimum_positive_off():
    rng = np.random.default_rng(7)
    x, y = random_problem(rng, 50, 8)
    lam = 0.3 * lambda_max(x, y)
    beta, intercept, _ = lasso_fit(x, y, lam)
    assert kkt_violation(x, y, beta, intercept, lam) < 1e-6
    wrong = beta.copy()
    wrong[0] += 0.5
    assert kkt_violation(x, y, wrong, intercept, lam) > 1e-3


def test_fit_kkt_audit_random_problems():
    rng = np.random.default_rng(41)
    for _ in range(10):
        x, y = random_problem(rng, 45, 14, correlated=True)
        lam = rng.uniform(0.05, 0.9) * lambda_max(x, y)
        beta, intercept, _ = lasso_fit(x, y, lam)
        assert kkt_violation(x, y, beta, intercept, lam) < 1e-6


def test_path_solver_matches_single_fits():
    rng = np.random.default_rng(19)
    x, y = random_problem(rng, 70, 16, correlated=True)
    lmax = lambda_max(x, y)
    path = _lambda_path(lmax, 20, 1e-3)
    betas, intercepts = _cd_path(x, y, path, tol=1e-9, max_sweeps=100000)
    for li, lam in enumerate(path):
        ref_beta, ref_int, _ = lasso_fit(x, y, float(lam), tol=1e-10)
        assert np.max(np.abs(betas[li] - ref_beta)) < 1e-6
        assert intercepts[li] == pytest.approx(ref_int, abs=1e-6)
        assert kkt_violation(x, y, betas[li], intercepts[li],
                             float(lam)) < 1e-6


def test_path_kkt_audit_every_level():
    rng = np.random.default_rng(57)
    for trial in range(3):
        x, y = random_problem(rng, 80, 25, correlated=True)
        path = _lambda_path(lambda_max(x, y), 60, 1e-3)
        betas, intercepts = _cd_path(x, y, path, tol=1e-7,
                                     max_sweeps=100000)
        for li, lam in enumerate(path):
            gap = kkt_violation(x, y, betas[li], intercepts[li], float(lam))
            assert gap < 1e-6, f"trial {trial} level {li} gap {gap}"


def test_lambda_path_geometry():
    path = _lambda_path(2.0, 100, 1e-3)
    assert path.size == 100
    assert path[0] == pytest.approx(2.0, rel=1e-12)
    assert path[-1] == pytest.approx(2.0e-3, rel=1e-12)
    ratios = path[1:] / path[:-1]
    assert np.allclose(ratios, ratios[0], rtol=1e-10)
    assert np.all(np.diff(path) < 0)
    assert _lambda_path(0.0, 50, 1e-3).tolist() == [0.0]


def test_warm_start_reaches_same_solution():
    rng = np.random.default_rng(71)
    x, y = random_problem(rng, 50, 10, correlated=True)
    lam = 0.2 * lambda_max(x, y)
    cold, cold_int, _ = lasso_fit(x, y, lam, tol=1e-10)
    near = cold + rng.normal(scale=1e-3, size=cold.shape)
    warm, warm_int, warm_sweeps = lasso_fit(x, y, lam, tol=1e-10, beta0=near)
    assert np.max(np.abs(cold - warm)) < 1e-7
    assert warm_int == pytest.approx(cold_int, abs=1e-8)


def test_convergence_error_when_budget_too_small():
    rng = np.random.default_rng(5)
    x, y = random_problem(rng, 60, 20, correlated=True)
    lam = 0.01 * lambda_max(x, y)
    with pytest.raises(ConvergenceError):
        lasso_fit(x, y, lam, max_sweeps=2)
    path = _lambda_path(lambda_max(x, y), 2, 1e-3)
    with pytest.raises(ConvergenceError):
        _cd_path(x, y, path, tol=1e-12, max_sweeps=3)


def test_fit_input_validation():
    x = np.ones((5, 2))
    with pytest.raises(DimensionMismatchError):
        lasso_fit(np.ones(5), np.ones(5), 0.1)
    with pytest.raises(LengthMismatchError):
        lasso_fit(x, np.ones(4), 0.1)
    with pytest.raises(TooFewRowsError):
        lasso_fit(np.ones((1, 2)), np.ones(1), 0.1)
    with pytest.raises(ValueError):
        lasso_fit(x, np.ones(5), -0.1)
    with pytest.raises(DimensionMismatchError):
        lasso_fit(x, np.ones(5), 0.1, beta0=np.zeros(3))


def test_constant_column_never_activates():
    rng = np.random.default_rng(13)
    x, y = random_problem(rng, 40, 6)
    x[:, 2] = 3.5
    beta, intercept, _ = lasso_fit(x, y, 0.05 * lambda_max(x, y))
    assert beta[2] == 0.0
    assert kkt_violation(x, y, beta, intercept,
                         0.05 * lambda_max(x, y)) < 1e-6


def make_selection_problem(rng, n=90, d=18, planted=(2, 7, 11)):
    x = rng.normal(size=(n, d))
    labels = np.where(rng.random(n) < 0.5, "pos", "neg")
    signal = np.where(labels == "pos", 1.0, -1.0)
    for j in planted:
        x[:, j] = signal * (1.5 + 0.3 * rng.random(n))
    return x, labels.tolist()


def test_select_recovers_planted_features():
    rng = np.random.default_rng(29)
    x, labels = make_selection_problem(rng)
    names = [f"f{j:02d}" for j in range(x.shape[1])]
    fit = lasso_select(x, labels, names, "pos", "neg", n_lambdas=50, seed=4)
    selected = {name for name, _ in fit.nonzero}
    assert {"f02", "f07", "f11"} <= selected
    assert fit.n_selected < x.shape[1]
    # ranked by coefficient magnitude, descending
    mags = [abs(c) for _, c in fit.nonzero]
    assert mags == sorted(mags, reverse=True)


def test_select_one_se_rule_and_path_shapes():
    rng = np.random.default_rng(31)
    x, labels = make_selection_problem(rng)
    names = [f"f{j}" for j in range(x.shape[1])]
    fit = lasso_select(x, labels, names, "pos", "neg", n_lambdas=40, seed=1)
    assert isinstance(fit, LassoFit)
    k = fit.lambda_path.size
    assert k == 40
    assert fit.cv_mean.shape == (k,) and fit.cv_se.shape == (k,)
    assert fit.nnz_path.shape == (k,)
    best = int(np.argmin(fit.cv_mean))
    limit = fit.cv_mean[best] + fit.cv_se[best]
    # 1-SE keeps the sparsest level no worse than best-plus-one-se, and
    # every larger penalty before it is worse than the limit
    assert fit.chosen_index <= best
    assert fit.cv_mean[fit.chosen_index] <= limit
    assert np.all(fit.cv_mean[:fit.chosen_index] > limit)
    assert fit.lam == pytest.approx(float(fit.lambda_path[fit.chosen_index]))


def test_select_chosen_model_satisfies_kkt():
    rng = np.random.default_rng(37)
    x, labels = make_selection_problem(rng)
    names = [f"f{j}" for j in range(x.shape[1])]
    fit = lasso_select(x, labels, names, "pos", "neg", n_lambdas=30, seed=2)
    yv = np.array([1.0 if l == "pos" else -1.0 for l in labels])
    mean, std = standardize_fit(x)
    z = standardize_apply(x, mean, std)
    gap = kkt_violation(z, yv, fit.model.weights, fit.model.bias, fit.lam)
    assert gap < 1e-6
    assert fit.nnz_path[fit.chosen_index] == fit.n_selected


def test_select_deterministic():
    rng = np.random.default_rng(43)
    x, labels = make_selection_problem(rng, n=60, d=12)
    names = [f"f{j}" for j in range(12)]
    a = lasso_select(x, labels, names, "pos", "neg", n_lambdas=25, seed=9)
    b = lasso_select(x, labels, names, "pos", "neg", n_lambdas=25, seed=9)
    assert np.array_equal(a.model.weights, b.model.weights)
    assert a.model.bias == b.model.bias
    assert np.array_equal(a.cv_mean, b.cv_mean)
    assert np.array_equal(a.nnz_path, b.nnz_path)
    assert a.nonzero == b.nonzero


def test_select_input_validation():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(10, 4))
    names = ["a", "b", "c", "d"]
    with pytest.raises(SingleClassError):
        lasso_select(x, ["pos"] * 10, names, "pos", "neg")
    with pytest.raises(DimensionMismatchError):
        lasso_select(x, ["pos", "neg"] * 5, ["a", "b"], "pos", "neg")
    with pytest.raises(LengthMismatchError):
        lasso_select(x, ["pos", "neg"], names, "pos", "neg")
    with pytest.raises(TooFewRowsError):
        lasso_select(x[:4], ["pos", "neg", "pos", "neg"], names,
                     "pos", "neg", n_folds=5)
