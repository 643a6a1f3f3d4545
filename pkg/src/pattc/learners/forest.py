from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .base import FitError, FittedLearner, LearnerSpec, check_training_data, column_names
from .tree import Tree, grow_tree, presort


@dataclass(frozen=True)
class RandomForest(FittedLearner):
    trees: tuple[Tree, ...] = ()

    def _predict(self, X):
        X = np.ascontiguousarray(X, dtype=float)
        return np.mean([t.predict(X) for t in self.trees], axis=0)


def fit_random_forest(X, y, weights=None, spec: LearnerSpec | None = None,
                      feature_names=None) -> RandomForest:
    """Bagged regression trees with ``mtry`` candidate features per split.

    Binomial responses are treated as 0/1 regression targets, so predictions
    are vote shares in [0, 1].
    """
    spec = spec or LearnerSpec("random_forest")
    if spec.kind != "random_forest":
        raise ValueError(f"fit_random_forest got a {spec.kind} spec")
    X, y, w = check_training_data(X, y, weights, spec.family)
    n, p = X.shape
    mtry = spec.mtry if spec.mtry is not None else max(1, p // 3)
    if not 1 <= mtry <= p:
        raise ValueError(f"mtry={mtry} outside [1, {p}]")
    rng = np.random.default_rng(spec.seed)
    full_order = presort(X)
    trees = []
    for _ in range(spec.n_trees):
        tree_seed = int(rng.integers(2**31))
        if spec.bootstrap:
            counts = np.bincount(rng.integers(0, n, n), minlength=n)
            tw = w * counts
            keep = tw > 0
            if not keep.any():
                raise FitError("bootstrap draw has no positive-weight rows")
            order = full_order if keep.all() else _restrict(full_order, keep)
        else:
            tw, order = w, full_order
        trees.append(grow_tree(X, y, tw, max_depth=spec.max_depth, min_leaf=spec.min_leaf,
                               mtry=mtry, seed=tree_seed, order=order))
    return RandomForest(spec, trees=tuple(trees),
                        feature_names=column_names(feature_names, p), n_features=p)


def _restrict(order: np.ndarray, keep: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.stack([row[keep[row]] for row in order]))
