"""Learner configuration and the common fitted-model contract."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

KINDS = ("elastic_net", "gradient_boosted_trees", "random_forest", "polynomial_ridge")
FAMILIES = ("gaussian", "binomial")


class FitError(ValueError):
    """Training data cannot support the requested fit."""


@dataclass(frozen=True)
class LearnerSpec:
    """One candidate algorithm configuration.

    Only the hyperparameters relevant to ``kind`` are read:

    * elastic_net: ``alpha`` (1 = lasso, 0 = ridge), ``lam`` (fixed penalty,
      or ``None`` to choose from a path of ``n_lambda`` values by
      ``inner_folds``-fold CV), ``standardize``.
    * gradient_boosted_trees: ``n_trees``, ``max_depth`` (``None`` means 3),
      ``learning_rate``, ``min_leaf``.
    * random_forest: ``n_trees``, ``mtry``, ``min_leaf``, ``bootstrap`` and
      ``max_depth`` (``None`` grows until ``min_leaf`` stops the split).
    * polynomial_ridge: ``degree`` and ``lam``.
    """

    kind: str
    family: str = "gaussian"
    name: str | None = None
    alpha: float = 1.0
    lam: float | None = None
    n_lambda: int = 100
    lambda_min_ratio: float = 1e-3
    inner_folds: int = 5
    standardize: bool = True
    n_trees: int = 100
    max_depth: int | None = None
    learning_rate: float = 0.1
    min_leaf: int = 5
    mtry: int | None = None
    bootstrap: bool = True
    degree: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown learner kind {self.kind!r}; expected one of {KINDS}")
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.kind == "polynomial_ridge" and self.degree < 2:
            raise ValueError("polynomial degree must be >= 2")
        if self.lam is not None and self.lam < 0:
            raise ValueError("lam must be nonnegative")

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.kind == "elastic_net":
            return {1.0: "lasso", 0.0: "ridge"}.get(self.alpha, f"elastic_net_alpha{self.alpha:g}")
        if self.kind == "random_forest":
            return f"random_forest_mtry{self.mtry}" if self.mtry else "random_forest"
        if self.kind == "polynomial_ridge":
            return f"polynomial_ridge_degree{self.degree}"
        return "gradient_boosted_trees"

    def with_family(self, family: str) -> "LearnerSpec":
        return replace(self, family=family)

    def with_seed(self, seed: int) -> "LearnerSpec":
        return replace(self, seed=seed)


@dataclass(frozen=True)
class FittedLearner:
    """Trained model. Subclasses implement :meth:`_predict` on a checked matrix."""

    spec: LearnerSpec
    feature_names: tuple[str, ...] = field(default=(), kw_only=True)
    n_features: int = field(default=0, kw_only=True)

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(
                f"{self.spec.label}: expected {self.n_features} feature column(s), "
                f"got shape {X.shape}"
            )
        out = self._predict(X)
        if self.spec.family == "binomial":
            out = np.clip(out, 0.0, 1.0)
        return out

    def _predict(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError


def check_training_data(X, y, weights, family: str):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2:
        raise ValueError("X must be 2-dimensional")
    n = X.shape[0]
    if y.shape != (n,):
        raise ValueError(f"y has shape {y.shape}, expected ({n},)")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (n,):
        raise ValueError(f"weights have shape {w.shape}, expected ({n},)")
    if n == 0:
        raise FitError("no training rows")
    if not (np.isfinite(X).all() and np.isfinite(y).all() and np.isfinite(w).all()):
        raise ValueError("training data contains non-finite values")
    if (w < 0).any() or w.sum() <= 0:
        raise ValueError("weights must be nonnegative with positive sum")
    if family == "binomial":
        if not np.isin(y, (0.0, 1.0)).all():
            raise ValueError("binomial responses must be 0/1")
        if np.unique(y[w > 0]).size < 2:
            raise FitError("binomial response is constant")
    return X, y, w


def weighted_mean(y: np.ndarray, w: np.ndarray) -> float:
    return float(np.dot(w, y) / w.sum())


def logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


def expit(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z)))


def column_names(names: Sequence[str] | None, p: int) -> tuple[str, ...]:
    if names is None:
        return tuple(f"x{j}" for j in range(p))
    if len(names) != p:
        raise ValueError("feature_names length does not match X")
    return tuple(names)
