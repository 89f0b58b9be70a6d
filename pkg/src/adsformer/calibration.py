"""Platt scaling: ``P(y=1 | f) = sigmoid(A f + B)`` fitted on held-out logits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted, check_X_y, column_or_1d


class CalibrationConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class CalibrationParams:
    A: float
    B: float

    @property
    def monotone_increasing(self) -> bool:
        return self.A > 0

    def apply(self, logits) -> np.ndarray:
        z = self.A * np.asarray(logits, dtype=np.float64) + self.B
        return expit(z)


def _nll_parts(f, y, A, B):
    z = A * f + B
    p = expit(z)
    nll = float(np.sum(np.logaddexp(0.0, z) - y * z))
    r = p - y
    grad = np.array([np.dot(r, f), r.sum()])
    w = p * (1 - p)
    hess = np.array([[np.dot(w, f * f), np.dot(w, f)], [np.dot(w, f), w.sum()]])
    return nll, grad, hess


def fit_platt(logits, labels, tol: float = 1e-8, max_iter: int = 100) -> CalibrationParams:
    """Maximum-likelihood (A, B) by damped Newton iterations.

    Stops once the gradient norm of the mean negative log-likelihood drops
    below ``tol``.
    """
    f = column_or_1d(np.asarray(logits, dtype=np.float64))
    y = column_or_1d(np.asarray(labels, dtype=np.float64))
    if f.shape != y.shape:
        raise ValueError("logits and labels differ in length")
    n = len(f)
    if n == 0 or y.min() == y.max():
        raise ValueError("Platt scaling needs both classes")
    A, B = 1.0, 0.0
    nll, grad, hess = _nll_parts(f, y, A, B)
    for it in range(max_iter):
        if np.linalg.norm(grad) / n < tol:
            return CalibrationParams(float(A), float(B))
        try:
            step = np.linalg.solve(hess + 1e-12 * np.eye(2), grad)
        except np.linalg.LinAlgError:
            step = grad / max(np.abs(np.diag(hess)).max(), 1e-12)
        t = 1.0
        while t > 1e-10:
            A2, B2 = A - t * step[0], B - t * step[1]
            nll2, grad2, hess2 = _nll_parts(f, y, A2, B2)
            if nll2 <= nll + 1e-4 * t * (-np.dot(grad, step)) or nll2 <= nll:
                break
            t *= 0.5
        A, B, nll, grad, hess = A2, B2, nll2, grad2, hess2
    if np.linalg.norm(grad) / n < tol:
        return CalibrationParams(float(A), float(B))
    raise CalibrationConvergenceError(
        f"Platt scaling did not converge in {max_iter} iterations: A={A:.6g}, B={B:.6g}, "
        f"|grad|/n={np.linalg.norm(grad) / n:.3e} (labels may be separable)")


class PlattCalibrator(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit(logits, y)`` then ``transform``/``predict_proba`` on logits."""

    def __init__(self, tol: float = 1e-8, max_iter: int = 100):
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y):
        X, y = check_X_y(np.asarray(X, dtype=np.float64).reshape(len(X), -1), y, y_numeric=True)
        if X.shape[1] != 1:
            raise ValueError("PlattCalibrator expects a single logit column")
        self.params_ = fit_platt(X[:, 0], y, self.tol, self.max_iter)
        self.A_, self.B_ = self.params_.A, self.params_.B
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        return self.params_.apply(np.asarray(X, dtype=np.float64).reshape(-1))

    def predict_proba(self, X):
        p = self.transform(X)
        return np.column_stack([1 - p, p])
