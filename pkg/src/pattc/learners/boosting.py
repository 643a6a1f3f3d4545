from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .base import (FittedLearner, LearnerSpec, check_training_data, column_names,
                   expit, logit, weighted_mean)
from .tree import Tree, grow_tree, presort

_NEWTON_FLOOR = 1e-12
_MAX_LEAF_STEP = 10.0


@dataclass(frozen=True)
class BoostedTrees(FittedLearner):
    init: float = 0.0
    trees: tuple[Tree, ...] = ()

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=float)
        f = np.full(X.shape[0], self.init)
        for tree in self.trees:
            f += self.spec.learning_rate * tree.predict(X)
        return f

    def staged_decision_function(self, X: np.ndarray):
        X = np.ascontiguousarray(X, dtype=float)
        f = np.full(X.shape[0], self.init)
        yield f.copy()
        for tree in self.trees:
            f += self.spec.learning_rate * tree.predict(X)
            yield f.copy()

    def _predict(self, X):
        f = self.decision_function(X)
        return expit(f) if self.spec.family == "binomial" else f

DEFAULT_DEPTH = 3


def fit_gbt(X, y, weights=None, spec: LearnerSpec | None = None, feature_names=None) -> BoostedTrees:
    """Stagewise least-squares (gaussian) or log-odds (binomial) boosting.

    Each stage grows a tree on the current negative gradient. For the
    binomial family the leaf values are then replaced by one Newton step,
    ``sum(w * r) / sum(w * p * (1 - p))`` over the leaf's rows.
    """
    spec = spec or LearnerSpec("gradient_boosted_trees")
    if spec.kind != "gradient_boosted_trees":
        raise ValueError(f"fit_gbt got a {spec.kind} spec")
    depth = DEFAULT_DEPTH if spec.max_depth is None else spec.max_depth
    if depth < 1:
        raise ValueError("gradient boosting needs max_depth >= 1")
    if not spec.learning_rate > 0:
        raise ValueError("learning_rate must be positive")
    X, y, w = check_training_data(X, y, weights, spec.family)
    order = presort(X)
    binomial = spec.family == "binomial"

    if binomial:
        init = logit(np.clip(weighted_mean(y, w), 1e-10, 1 - 1e-10))
    else:
        init = weighted_mean(y, w)
    f = np.full(len(y), init)
    trees = []
    for _ in range(spec.n_trees):
        prob = expit(f) if binomial else None
        resid = y - prob if binomial else y - f
        tree = grow_tree(X, resid, w, max_depth=depth,
                         min_leaf=spec.min_leaf, order=order)
        leaf = tree.apply(X)
        if binomial:
            n_nodes = len(tree.value)
            num = np.bincount(leaf, weights=w * resid, minlength=n_nodes)
            den = np.bincount(leaf, weights=w * prob * (1 - prob), minlength=n_nodes)
            step = np.where(den > _NEWTON_FLOOR, num / np.maximum(den, _NEWTON_FLOOR), 0.0)
            tree = tree.with_values(np.clip(step, -_MAX_LEAF_STEP, _MAX_LEAF_STEP))
        f = f + spec.learning_rate * tree.value[leaf]
        trees.append(tree)

    return BoostedTrees(spec, init=init, trees=tuple(trees),
                        feature_names=column_names(feature_names, X.shape[1]),
                        n_features=X.shape[1])
