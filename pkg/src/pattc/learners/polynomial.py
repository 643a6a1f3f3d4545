"""Ridge regression on a per-column polynomial basis.

Stands in for additive smoothing-spline models: each input column ``x``
contributes ``x, x**2, ..., x**degree`` and the expanded design is fit with an
unpenalized intercept and an L2 penalty on standardized basis columns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .base import (FittedLearner, LearnerSpec, check_training_data, column_names, expit,
                   logit, weighted_mean)

_DEFAULT_LAM = 1e-3
_PROB_EPS = 1e-5


def polynomial_basis(X: np.ndarray, degree: int, names=None) -> tuple[np.ndarray, list[str]]:
    X = np.asarray(X, dtype=float)
    names = column_names(names, X.shape[1])
    cols, out_names = [], []
    for j, name in enumerate(names):
        for k in range(1, degree + 1):
            cols.append(X[:, j] ** k)
            out_names.append(name if k == 1 else f"{name}^{k}")
    basis = np.column_stack(cols) if cols else np.empty((X.shape[0], 0))
    return basis, out_names


@dataclass(frozen=True)
class PolynomialRidge(FittedLearner):
    intercept: float = 0.0
    coef: np.ndarray = None

    def decision_function(self, X):
        basis, _ = polynomial_basis(X, self.spec.degree)
        return self.intercept + basis @ self.coef

    def _predict(self, X):
        eta = self.decision_function(X)
        return expit(eta) if self.spec.family == "binomial" else eta


def _ridge(B, z, v, W, lam):
    """Weighted ridge with free intercept; returns (b0, beta) on B's scale."""
    V = v.sum()
    center = (v @ B) / V
    Bc = B - center
    scale = np.sqrt((v @ Bc**2) / V)
    scale[scale <= 1e-12] = np.inf
    Bs = Bc / scale
    zbar = float(v @ z) / V
    G = (Bs * v[:, None]).T @ Bs / W
    c = (Bs * v[:, None]).T @ (z - zbar) / W
    beta_s = np.linalg.lstsq(G + lam * np.eye(len(c)), c, rcond=None)[0]
    beta = beta_s / scale
    return zbar - center @ beta, beta


def fit_polynomial_ridge(X, y, weights=None, spec: LearnerSpec | None = None,
                         feature_names=None) -> PolynomialRidge:
    spec = spec or LearnerSpec("polynomial_ridge")
    if spec.kind != "polynomial_ridge":
        raise ValueError(f"fit_polynomial_ridge got a {spec.kind} spec")
    if spec.degree not in (2, 3, 4):
        raise ValueError(f"degree must be 2, 3 or 4, got {spec.degree}")
    X, y, w = check_training_data(X, y, weights, spec.family)
    B, _ = polynomial_basis(X, spec.degree)
    lam = _DEFAULT_LAM if spec.lam is None else float(spec.lam)
    W = w.sum()

    if spec.family == "gaussian":
        b0, beta = _ridge(B, y, w, W, lam)
    else:
        b0, beta = logit(weighted_mean(y, w)), np.zeros(B.shape[1])
        for _ in range(50):
            eta = b0 + B @ beta
            p = np.clip(expit(eta), _PROB_EPS, 1 - _PROB_EPS)
            v = w * p * (1 - p)
            z = eta + (y - p) / (p * (1 - p))
            nb0, nbeta = _ridge(B, z, v, W, lam)
            done = max(abs(nb0 - b0), np.max(np.abs(nbeta - beta), initial=0.0)) < 1e-8
            b0, beta = nb0, nbeta
            if done:
                break
    return PolynomialRidge(spec, intercept=float(b0), coef=beta,
                           feature_names=column_names(feature_names, X.shape[1]),
                           n_features=X.shape[1])
