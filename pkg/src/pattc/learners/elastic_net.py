"""Weighted elastic net by coordinate descent.

Objective, for row weights ``w`` with total ``W``::

    (1/W) * sum_i w_i * loss_i(b0 + x_i @ beta)
        + lam * (alpha * |beta|_1 + (1 - alpha) * |beta|_2^2 / 2)

with squared error ``loss = (y - eta)^2 / 2`` (gaussian) or the negative
Bernoulli log-likelihood (binomial, solved by iteratively reweighted least
squares around the coordinate-descent core). The intercept is never
penalized. Columns are standardized internally unless
``spec.standardize`` is false; coefficients are reported on the original
scale.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .base import (FittedLearner, LearnerSpec, check_training_data, column_names, expit,
                   logit, weighted_mean)

logger = logging.getLogger(__name__)

_TOL = 1e-9
_MAX_SWEEPS = 10_000
_MAX_IRLS = 50
_PROB_EPS = 1e-5
# glmnet convention: ridge paths start where alpha = 0.001 would zero everything.
_ALPHA_FLOOR = 1e-3


@dataclass(frozen=True)
class LinearModel(FittedLearner):
    intercept: float = 0.0
    coef: np.ndarray = None
    lam: float = 0.0

    def decision_function(self, X):
        return self.intercept + np.asarray(X, dtype=float) @ self.coef

    def _predict(self, X):
        eta = self.decision_function(X)
        return expit(eta) if self.spec.family == "binomial" else eta


@dataclass
class _Scaled:
    X: np.ndarray  # standardized, kept columns only
    center: np.ndarray
    scale: np.ndarray
    keep: np.ndarray


def _standardize(X, w, standardize: bool) -> _Scaled:
    W = w.sum()
    center = (w @ X) / W
    var = (w @ (X - center) ** 2) / W
    keep = var > 1e-12 * np.maximum(1.0, center**2)
    if (~keep).any():
        warnings.warn(f"dropping {int((~keep).sum())} zero-variance column(s)", stacklevel=3)
    scale = np.sqrt(var[keep]) if standardize else np.ones(int(keep.sum()))
    Xs = (X[:, keep] - center[keep]) / scale
    return _Scaled(Xs, center[keep], scale, keep)


def _soft(z, t):
    # |z| within rounding of t is a tie (e.g. duplicated columns): keep the zero
    excess = abs(z) - t
    if excess <= 1e-10 * t:
        return 0.0
    return np.sign(z) * excess


def _cd_quadratic(G, c, lam, alpha, beta):
    """Minimize beta' G beta / 2 - c' beta + penalty by cyclic coordinate descent.

    Works in place on ``beta`` and returns it. ``G`` must have a
    nonnegative diagonal; the gradient residual ``c - G beta`` is kept up to
    date incrementally so each coordinate step costs O(p).
    """
    p = len(c)
    l1 = lam * alpha
    l2 = lam * (1.0 - alpha)
    diag = np.diag(G) + l2
    grad = c - G @ beta
    active = np.arange(p)
    full_pass = True
    for _ in range(_MAX_SWEEPS):
        max_delta = 0.0
        for j in active:
            if diag[j] <= 0:
                continue
            old = beta[j]
            new = _soft(grad[j] + G[j, j] * old, l1) / diag[j]
            if new != old:
                delta = new - old
                beta[j] = new
                grad -= G[:, j] * delta
                max_delta = max(max_delta, abs(delta) * np.sqrt(G[j, j]))
        if max_delta < _TOL:
            if full_pass:
                break
            active = np.arange(p)
            full_pass = True
        else:
            nz = np.flatnonzero(beta)
            active = nz if len(nz) else np.arange(p)
            full_pass = len(active) == p
    return beta


def lambda_max(X, y, weights=None, alpha: float = 1.0, *, family: str = "gaussian",
               standardize: bool = True) -> float:
    """Smallest penalty at which every slope is zero."""
    X, y, w = check_training_data(X, y, weights, family)
    sc = _standardize(X, w, standardize)
    r = y - weighted_mean(y, w)
    grad = (w * r) @ sc.X / w.sum()
    return float(np.max(np.abs(grad), initial=0.0) / max(alpha, _ALPHA_FLOOR))


def _gaussian_path(sc: _Scaled, y, w, lams, alpha):
    W = w.sum()
    ybar = weighted_mean(y, w)
    Xw = sc.X * w[:, None]
    G = Xw.T @ sc.X / W
    c = Xw.T @ (y - ybar) / W
    beta = np.zeros(sc.X.shape[1])
    out = []
    for lam in lams:
        beta = _cd_quadratic(G, c, lam, alpha, beta)
        out.append((ybar, beta.copy()))
    return out


def _binomial_path(sc: _Scaled, y, w, lams, alpha):
    W = w.sum()
    ybar = weighted_mean(y, w)
    b0 = logit(ybar)
    beta = np.zeros(sc.X.shape[1])
    out = []
    for lam in lams:
        for _ in range(_MAX_IRLS):
            eta = b0 + sc.X @ beta
            p = np.clip(expit(eta), _PROB_EPS, 1 - _PROB_EPS)
            v = w * p * (1 - p)
            z = eta + (y - p) / (p * (1 - p))
            V = v.sum()
            xbar = (v @ sc.X) / V
            zbar = float(v @ z) / V
            Xc = sc.X - xbar
            Xv = Xc * v[:, None]
            G = Xv.T @ Xc / W
            c = Xv.T @ (z - zbar) / W
            old = beta.copy()
            beta = _cd_quadratic(G, c, lam, alpha, beta)
            new_b0 = zbar - xbar @ beta
            change = max(np.max(np.abs(beta - old), initial=0.0), abs(new_b0 - b0))
            b0 = new_b0
            if change < 1e-7:
                break
        out.append((b0, beta.copy()))
    return out


def _path(X, y, w, spec: LearnerSpec, lams):
    sc = _standardize(X, w, spec.standardize)
    solver = _binomial_path if spec.family == "binomial" else _gaussian_path
    fits = solver(sc, y, w, lams, spec.alpha)
    out = []
    for b0, beta_s in fits:
        coef = np.zeros(X.shape[1])
        coef[sc.keep] = beta_s / sc.scale
        out.append((float(b0 - sc.center @ coef[sc.keep]), coef))
    return out


def lambda_path(X, y, w, spec: LearnerSpec) -> np.ndarray:
    top = lambda_max(X, y, w, spec.alpha, family=spec.family, standardize=spec.standardize)
    if top == 0.0:
        return np.zeros(1)
    return np.geomspace(top, top * spec.lambda_min_ratio, spec.n_lambda)


def _loss(y, eta, w, family):
    if family == "binomial":
        p = np.clip(expit(eta), _PROB_EPS, 1 - _PROB_EPS)
        ll = y * np.log(p) + (1 - y) * np.log(1 - p)
        return -float(w @ ll) / w.sum()
    return float(w @ (y - eta) ** 2) / w.sum()


def fit_elastic_net(X, y, weights=None, spec: LearnerSpec | None = None,
                    feature_names=None) -> LinearModel:
    """Fit at ``spec.lam``, or pick the penalty by inner cross-validation.

    The inner CV splits rows into ``spec.inner_folds`` folds (seeded by
    ``spec.seed``), fits the full geometric path on each training part with
    warm starts and keeps the penalty with the lowest weighted held-out loss.
    """
    spec = spec or LearnerSpec("elastic_net")
    if spec.kind != "elastic_net":
        raise ValueError(f"fit_elastic_net got a {spec.kind} spec")
    X, y, w = check_training_data(X, y, weights, spec.family)
    names = column_names(feature_names, X.shape[1])

    if spec.lam is not None:
        lam = float(spec.lam)
        lams = np.array([lam])
    else:
        lams = lambda_path(X, y, w, spec)
        lam = _select_lambda(X, y, w, spec, lams) if len(lams) > 1 else float(lams[0])
        lams = lams[lams >= lam]
    b0, coef = _path(X, y, w, spec, lams)[-1]
    return LinearModel(spec, intercept=b0, coef=coef, lam=lam,
                       feature_names=names, n_features=X.shape[1])


def _select_lambda(X, y, w, spec, lams) -> float:
    n = len(y)
    k = min(spec.inner_folds, n)
    rng = np.random.default_rng(spec.seed)
    folds = rng.permutation(np.arange(n) % k)
    err = np.zeros(len(lams))
    used = 0
    for f in range(k):
        test = folds == f
        train = ~test
        if spec.family == "binomial" and np.unique(y[train]).size < 2:
            continue
        fits = _path(X[train], y[train], w[train], spec, lams)
        for i, (b0, coef) in enumerate(fits):
            err[i] += _loss(y[test], b0 + X[test] @ coef, w[test], spec.family) * w[test].sum()
        used += 1
    if not used:
        return float(lams[-1])
    return float(lams[int(np.argmin(err))])
