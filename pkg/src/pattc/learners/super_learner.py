"""Cross-validated stacking of candidate learners (super learner).

Candidates are scored by k-fold cross-validation; their out-of-fold
predictions ``Z`` are combined with nonnegative least-squares weights
normalized to sum to one, and every candidate is refit on all rows.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import pandas as pd

from .base import FitError, FittedLearner, LearnerSpec, check_training_data
from .boosting import fit_gbt
from .elastic_net import fit_elastic_net
from .forest import fit_random_forest
from .nnls import lawson_hanson
from .polynomial import fit_polynomial_ridge

logger = logging.getLogger(__name__)

FITTERS: dict[str, Callable[..., FittedLearner]] = {
    "elastic_net": fit_elastic_net,
    "gradient_boosted_trees": fit_gbt,
    "random_forest": fit_random_forest,
    "polynomial_ridge": fit_polynomial_ridge,
}

MAX_REDRAWS = 10


class PlanError(ValueError):
    """A cross-validation plan cannot be built or used."""


def fit_learner(spec: LearnerSpec, X, y, weights=None, feature_names=None) -> FittedLearner:
    return FITTERS[spec.kind](X, y, weights, spec, feature_names=feature_names)


@dataclass(frozen=True)
class CVPlan:
    k: int
    folds: np.ndarray
    seed: int

    def __post_init__(self):
        folds = np.asarray(self.folds)
        if self.k < 2:
            raise PlanError("cross-validation needs k >= 2")
        sizes = np.bincount(folds, minlength=self.k)
        if len(sizes) != self.k or (sizes < 1).any():
            raise PlanError(f"folds must be labelled 0..{self.k - 1}, all nonempty; "
                            f"got sizes {sizes.tolist()}")
        if (len(folds) - sizes < 2).any():
            raise PlanError("every training split needs at least 2 rows")

    def __len__(self) -> int:
        return len(self.folds)

    def splits(self):
        for f in range(self.k):
            test = self.folds == f
            yield f, ~test, test


def _draw_folds(n, k, rng, clusters):
    if clusters is None:
        return rng.permutation(np.arange(n) % k)
    ids, inverse, counts = np.unique(np.asarray(clusters), return_inverse=True,
                                     return_counts=True)
    order = rng.permutation(len(ids))
    order = order[np.argsort(-counts[order], kind="stable")]
    load = np.zeros(k)
    cluster_fold = np.empty(len(ids), dtype=int)
    for c in order:
        f = int(np.argmin(load))
        cluster_fold[c] = f
        load[f] += counts[c]
    return cluster_fold[inverse]


def make_cv_plan(n: int, k: int = 10, seed: int = 0, *, clusters=None, labels=None) -> CVPlan:
    """Assign ``n`` rows to ``k`` folds.

    Without clusters the fold sizes differ by at most one. With ``clusters``
    all rows of a cluster share a fold (greedy size balancing). With binary
    ``labels`` the draw is repeated under ``seed + 1, seed + 2, ...`` (up to
    ten times) until every training split contains both classes.
    """
    if k > n:
        raise PlanError(f"cannot split {n} rows into {k} folds")
    labels = None if labels is None else np.asarray(labels)
    for attempt in range(MAX_REDRAWS):
        s = seed + attempt
        folds = _draw_folds(n, k, np.random.default_rng(s), clusters)
        if labels is None or all(
            np.unique(labels[folds != f]).size > 1 for f in range(k)
        ):
            return CVPlan(k, folds, s)
    raise PlanError(f"no fold assignment with two classes per training split after {MAX_REDRAWS} draws")


@dataclass(frozen=True)
class CVReport:
    """Per-candidate fold losses; ``to_frame`` mirrors an MSE table."""

    labels: tuple[str, ...]
    fold_mse: np.ndarray  # shape (k, n_candidates)
    weights: np.ndarray | None = None
    ensemble_fold_mse: np.ndarray | None = None

    def to_frame(self) -> pd.DataFrame:
        k = self.fold_mse.shape[0]
        rows = []
        cols = list(self.fold_mse.T)
        names = list(self.labels)
        wts = list(self.weights) if self.weights is not None else [np.nan] * len(names)
        if self.ensemble_fold_mse is not None:
            cols = [self.ensemble_fold_mse] + cols
            names = ["super_learner"] + names
            wts = [np.nan] + wts
        for name, mse, wt in zip(names, cols, wts):
            rows.append({
                "algorithm": name,
                "mean_mse": float(mse.mean()),
                "se": float(mse.std(ddof=1) / np.sqrt(k)),
                "min": float(mse.min()),
                "max": float(mse.max()),
                "weight": float(wt),
            })
        return pd.DataFrame(rows)


def _fold_mse(y, pred, w, folds, k):
    return np.array([
        np.average((y[folds == f] - pred[folds == f]) ** 2, weights=w[folds == f])
        for f in range(k)
    ])


def cross_validate(specs: Sequence[LearnerSpec], X, y, weights, plan: CVPlan,
                   feature_names=None) -> tuple[CVReport, np.ndarray]:
    """Out-of-fold predictions ``Z`` (one column per spec) and per-fold MSE."""
    if not specs:
        raise ValueError("no candidate learners")
    families = {s.family for s in specs}
    if len(families) > 1:
        raise ValueError(f"candidate learners mix families {sorted(families)}")
    X, y, w = check_training_data(X, y, weights, specs[0].family)
    if len(plan) != len(y):
        raise PlanError(f"plan covers {len(plan)} rows, data has {len(y)}")
    Z = np.empty((len(y), len(specs)))
    for _, train, test in plan.splits():
        for j, spec in enumerate(specs):
            model = fit_learner(spec, X[train], y[train], w[train], feature_names)
            Z[test, j] = model.predict(X[test])
    mse = np.column_stack([_fold_mse(y, Z[:, j], w, plan.folds, plan.k) for j in range(len(specs))])
    return CVReport(tuple(s.label for s in specs), mse), Z


def nnls_stack(Z, y, weights=None, *, convex: bool = True) -> np.ndarray:
    """Stacking weights for the columns of ``Z``, normalized to sum to one.

    Minimizes ``||sqrt(w) * (y - Z @ a)||`` over ``a >= 0`` with Lawson-Hanson.
    With ``convex=True`` (default) the sum-to-one constraint is imposed inside
    the solve, by a heavily weighted extra equation, and the result is polished
    with an exact equality-constrained solve on the selected support; the
    weights are then optimal over the simplex. With ``convex=False`` the plain
    NNLS coefficients are rescaled afterwards.
    """
    Z = np.asarray(Z, dtype=float)
    y = np.asarray(y, dtype=float)
    if Z.ndim != 2 or Z.shape[0] != len(y):
        raise ValueError(f"Z has shape {Z.shape}, expected ({len(y)}, m)")
    if not (np.isfinite(Z).all() and np.isfinite(y).all()):
        raise ValueError("Z contains non-finite predictions")
    w = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=float)
    root = np.sqrt(w)
    A = Z * root[:, None]
    b = y * root
    m = Z.shape[1]
    if convex:
        big = 1e4 * max(1.0, np.linalg.norm(A, axis=0).max(initial=0.0), np.linalg.norm(b))
        coef, _ = lawson_hanson(np.vstack([A, np.full((1, m), big)]), np.append(b, big))
        coef = _polish_simplex(A, b, coef)
    else:
        coef, _ = lawson_hanson(A, b)
    total = coef.sum()
    if total <= 0:
        warnings.warn("NNLS returned all-zero weights; using uniform weights", RuntimeWarning,
                      stacklevel=2)
        return np.full(m, 1.0 / m)
    return coef / total


def _polish_simplex(A, b, coef):
    support = coef > 0
    k = int(support.sum())
    if k == 0:
        return coef
    As = A[:, support]
    kkt = np.zeros((k + 1, k + 1))
    kkt[:k, :k] = As.T @ As
    kkt[:k, k] = kkt[k, :k] = 1.0
    rhs = np.append(As.T @ b, 1.0)
    sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0][:k]
    if (sol > 0).all():
        polished = np.zeros_like(coef)
        polished[support] = sol
        if np.linalg.norm(A @ polished - b) <= np.linalg.norm(A @ (coef / coef.sum()) - b):
            return polished
    return coef


@dataclass(frozen=True)
class EnsembleModel:
    candidates: tuple[FittedLearner, ...]
    weights: np.ndarray
    family: str
    report: CVReport | None = None
    oof: np.ndarray | None = field(default=None, repr=False)
    feature_names: tuple[str, ...] = ()

    def __post_init__(self):
        w = np.asarray(self.weights)
        if len(w) != len(self.candidates) or (w < 0).any() or abs(w.sum() - 1) > 1e-12:
            raise ValueError("ensemble weights must be a nonnegative vector summing to 1")

    def predict(self, X) -> np.ndarray:
        out = np.zeros(np.asarray(X).shape[0])
        for wt, model in zip(self.weights, self.candidates):
            if wt > 0:
                out += wt * model.predict(X)
        if self.family == "binomial":
            out = np.clip(out, 0.0, 1.0)
        return out

    @property
    def oof_prediction(self) -> np.ndarray | None:
        """Cross-validated ensemble prediction for each training row."""
        if self.oof is None:
            return None
        out = self.oof @ self.weights
        return np.clip(out, 0.0, 1.0) if self.family == "binomial" else out


def fit_super_learner(specs: Sequence[LearnerSpec], X, y, weights=None,
                      plan: CVPlan | None = None, feature_names=None) -> EnsembleModel:
    """Cross-validate, stack by NNLS, and refit every candidate on all rows.

    ``plan=None`` is accepted only for a single candidate, which is then fit
    once with weight 1 and no CV report.
    """
    specs = list(specs)
    if not specs:
        raise ValueError("no candidate learners")
    family = specs[0].family
    X, y, w = check_training_data(X, y, weights, family)
    names = tuple(feature_names) if feature_names is not None else ()
    if plan is None:
        if len(specs) != 1:
            raise PlanError("stacking several candidates needs a CV plan")
        model = fit_learner(specs[0], X, y, w, feature_names)
        return EnsembleModel((model,), np.ones(1), family, feature_names=names)

    report, Z = cross_validate(specs, X, y, w, plan, feature_names)
    stack = nnls_stack(Z, y, w) if len(specs) > 1 else np.ones(1)
    ens_mse = _fold_mse(y, _clip(Z @ stack, family), w, plan.folds, plan.k)
    report = CVReport(report.labels, report.fold_mse, stack, ens_mse)
    models = tuple(fit_learner(s, X, y, w, feature_names) for s in specs)
    for s, wt in zip(specs, stack):
        logger.debug("super learner weight %s = %.4f", s.label, wt)
    return EnsembleModel(models, stack, family, report, Z, names)


def _clip(pred, family):
    return np.clip(pred, 0.0, 1.0) if family == "binomial" else pred


__all__ = [
    "CVPlan", "CVReport", "EnsembleModel", "FitError", "PlanError", "cross_validate",
    "fit_learner", "fit_super_learner", "make_cv_plan", "nnls_stack",
]
