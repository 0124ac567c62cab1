"""Linear SVM trained by sequential minimal optimization, plus the shared
standardized linear model container.

The solver works the dual of the soft-margin problem directly on the
linear kernel, picking the maximal violating pair each step and keeping
the primal weight vector incrementally updated. Models standardize
features internally, so callers always pass raw feature rows.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (ConvergenceError, DimensionMismatchError,
                     LengthMismatchError, SingleClassError, TooFewRowsError)

_ETA_FLOOR = 1e-12
_STD_EPS = 1e-12


def standardize_fit(matrix: np.ndarray):
    """Column-wise z-score parameters: (mean, std), population std.

    Zero-variance columns get sentinel std 1.0, so they standardize to
    exactly zero and never influence a model.
    """
    x = np.asarray(matrix, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionMismatchError("matrix must be 2-D")
    if x.shape[0] < 2:
        raise TooFewRowsError("standardization needs at least 2 rows")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    floor = _STD_EPS * np.maximum(1.0, np.abs(mean))
    std = np.where(std <= floor, 1.0, std)
    return mean, std


def standardize_apply(matrix, mean, std) -> np.ndarray:
    return (np.asarray(matrix, dtype=np.float64) - mean) / std


@dataclass
class LinearModel:
    """A standardized linear decision function w . z + b.

    ``decision`` standardizes raw inputs with the stored column mean/std
    before applying the weights. ``positive_label`` is returned for a
    strictly positive decision value, ``negative_label`` otherwise (ties
    go negative).
    """

    feature_names: tuple
    mean: np.ndarray
    std: np.ndarray
    weights: np.ndarray
    bias: float
    kind: str
    positive_label: str
    negative_label: str
    hyperparams: dict = field(default_factory=dict)
    seed: int | None = None

    def __post_init__(self):
        d = len(self.feature_names)
        for name in ("mean", "std", "weights"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            if v.shape != (d,):
                raise DimensionMismatchError(
                    f"{name} has shape {v.shape}, expected ({d},)")
            setattr(self, name, v)

    def decision(self, rows) -> np.ndarray:
        """Signed decision values for raw feature rows, vectorized."""
        x = np.atleast_2d(np.asarray(rows, dtype=np.float64))
        if x.shape[1] != self.weights.shape[0]:
            raise DimensionMismatchError(
                f"got {x.shape[1]} features, expected {self.weights.shape[0]}")
        z = (x - self.mean) / self.std
        return z @ self.weights + self.bias

    def predict(self, rows):
        """Label per row: positive_label iff decision > 0."""
        d = self.decision(rows)
        return [self.positive_label if v > 0 else self.negative_label
                for v in d]

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "feature_names": list(self.feature_names),
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "weights": self.weights.tolist(),
            "bias": self.bias,
            "positive_label": self.positive_label,
            "negative_label": self.negative_label,
            "hyperparams": self.hyperparams,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "LinearModel":
        return cls(
            feature_names=tuple(obj["feature_names"]),
            mean=np.asarray(obj["mean"], dtype=np.float64),
            std=np.asarray(obj["std"], dtype=np.float64),
            weights=np.asarray(obj["weights"], dtype=np.float64),
            bias=float(obj["bias"]),
            kind=obj["kind"],
            positive_label=obj["positive_label"],
            negative_label=obj["negative_label"],
            hyperparams=dict(obj.get("hyperparams", {})),
            seed=obj.get("seed"),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "LinearModel":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def smo_train(X: np.ndarray, y: np.ndarray, c: float = 1.0,
              tol: float = 1e-3, objective_rtol: float = 1e-6,
              max_epochs: int = 100000):
    """Solve the soft-margin linear SVM dual by maximal-violating-pair SMO.

    Minimizes (1/2)||w||^2 + C * sum(hinge) through its dual; the working
    pair is the most violating (i, j) under the usual KKT bound sets, and
    the stopping rule is the duality-violation gap b_low - b_high <= tol.
    A secondary epoch-level stop (relative dual objective change below
    ``objective_rtol``) guards stalls where the pair step underflows.

    Parameters
    ----------
    X : (n, d) standardized feature matrix
    y : (n,) labels in {-1, +1}
    c : box constraint

    Returns
    -------
    weights : (d,) primal weight vector
    bias : float
    trace : list of float
        Dual objective after each epoch (and at the final state); the
        sequence is non-increasing.

    Raises
    ------
    SingleClassError, ConvergenceError, LengthMismatchError
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.ndim != 2:
        raise DimensionMismatchError("X must be 2-D")
    n = X.shape[0]
    if y.shape[0] != n:
        raise LengthMismatchError(f"{n} rows but {y.shape[0]} labels")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise ValueError("labels must be -1 or +1")
    if np.unique(y).size < 2:
        raise SingleClassError("training data contains a single class")
    if not (c > 0):
        raise ValueError("c must be positive")

    alpha = np.zeros(n)
    w = np.zeros(X.shape[1])
    f = np.zeros(n)  # current decision values X @ w
    pos = y > 0
    dual = 0.0  # dual objective, 0 at alpha = 0
    trace = []

    for _ in range(max_epochs):
        epoch_start = dual
        converged = False
        for _ in range(n):
            grad = y - f
            low_ok = np.where(pos, alpha < c, alpha > 0)
            up_ok = np.where(pos, alpha > 0, alpha < c)
            g_low = np.where(low_ok, grad, -np.inf)
            g_up = np.where(up_ok, grad, np.inf)
            i = int(np.argmax(g_low))
            j = int(np.argmin(g_up))
            b_low = g_low[i]
            b_high = g_up[j]
            if b_low - b_high <= tol:
                converged = True
                break

            xi = X[i]
            xj = X[j]
            eta = max(float(xi @ xi + xj @ xj - 2.0 * (xi @ xj)), _ETA_FLOOR)
            t = (grad[i] - grad[j]) / eta
            # clip the joint step into both box constraints
            if y[i] > 0:
                t = min(t, c - alpha[i])
            else:
                t = min(t, alpha[i])
            if y[j] > 0:
                t = min(t, alpha[j])
            else:
                t = min(t, c - alpha[j])
            if t <= 0.0:
                # step underflowed against the box; epoch-level stop decides
                break
            alpha[i] += y[i] * t
            alpha[j] -= y[j] * t
            # w = sum alpha_k y_k x_k, so the pair step moves it by t*(xi - xj)
            dw = t * (xi - xj)
            w += dw
            f += X @ dw
            dual += -(grad[i] - grad[j]) * t + 0.5 * eta * t * t
        trace.append(dual)
        if converged:
            bias = 0.5 * float(b_low + b_high)
            return w, bias, trace
        if abs(dual - epoch_start) <= objective_rtol * max(1.0, abs(epoch_start)):
            grad = y - f
            low_ok = np.where(pos, alpha < c, alpha > 0)
            up_ok = np.where(pos, alpha > 0, alpha < c)
            b_low = np.max(np.where(low_ok, grad, -np.inf))
            b_high = np.min(np.where(up_ok, grad, np.inf))
            return w, 0.5 * float(b_low + b_high), trace
    raise ConvergenceError(f"SMO did not converge in {max_epochs} epochs")


def fit_linear_svm(matrix, labels, feature_names, positive_label,
                   negative_label, c: float = 1.0, seed: int = 0,
                   tol: float = 1e-3, max_epochs: int = 100000):
    """Standardize raw features, train by SMO, package a LinearModel.

    ``labels`` are strings; rows labeled ``positive_label`` map to +1.

    Returns (model, trace).
    """
    x = np.asarray(matrix, dtype=np.float64)
    names = tuple(feature_names)
    if x.ndim != 2 or x.shape[1] != len(names):
        raise DimensionMismatchError(
            f"matrix shape {x.shape} does not match {len(names)} names")
    labels = list(labels)
    if len(labels) != x.shape[0]:
        raise LengthMismatchError("labels and matrix rows differ")
    known = {positive_label, negative_label}
    bad = sorted(set(labels) - known)
    if bad:
        raise ValueError(f"unexpected labels {bad}")
    y = np.array([1.0 if l == positive_label else -1.0 for l in labels])

    mean, std = standardize_fit(x)
    z = (x - mean) / std
    weights, bias, trace = smo_train(z, y, c=c, tol=tol,
                                     max_epochs=max_epochs)
    model = LinearModel(
        feature_names=names, mean=mean, std=std, weights=weights, bias=bias,
        kind="svm", positive_label=positive_label,
        negative_label=negative_label,
        hyperparams={"c": c, "tol": tol, "max_epochs": max_epochs},
        seed=seed,
    )
    return model, trace


def feature_importance(model: LinearModel):
    """Weights scaled so the largest magnitude is 1, sorted by |importance|.

    Returns a list of (feature name, importance); an all-zero weight
    vector yields all-zero importances in original feature order. Sorting
    is stable, so ties keep feature order.
    """
    w = model.weights
    peak = float(np.max(np.abs(w)))
    imp = w / peak if peak > 0 else np.zeros_like(w)
    order = sorted(range(len(imp)), key=lambda i: -abs(imp[i]))
    return [(model.feature_names[i], float(imp[i])) for i in order]
