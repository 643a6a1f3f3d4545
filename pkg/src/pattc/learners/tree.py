"""Weighted CART regression trees with exact splits.

Trees are grown depth-first over feature-wise presorted row orders, so each
node's split search is a single linear scan per candidate feature. Split ties
resolve to the lowest feature index, then the lowest threshold. Rows with
``x <= threshold`` go left.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

LEAF = -1


@numba.njit(cache=True)
def _grow(X, y, w, order, max_depth, min_leaf, mtry, seed):
    p, m = order.shape
    cap = 2 * m + 1
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    value = np.zeros(cap)
    weight = np.zeros(cap)

    if mtry < p:
        np.random.seed(seed)
    goes_left = np.zeros(X.shape[0], np.bool_)
    buf = np.empty(m, np.int64)
    feats = np.arange(p)

    # Stack of (node id, start, end, depth).
    stack = np.empty((cap, 4), np.int64)
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = m
    stack[0, 3] = 0
    top = 1
    n_nodes = 1
    while top > 0:
        top -= 1
        node = stack[top, 0]
        start = stack[top, 1]
        end = stack[top, 2]
        depth = stack[top, 3]

        sw = 0.0
        swy = 0.0
        for k in range(start, end):
            i = order[0, k]
            sw += w[i]
            swy += w[i] * y[i]
        mean = swy / sw if sw > 0 else 0.0
        sse = 0.0
        for k in range(start, end):
            i = order[0, k]
            sse += w[i] * (y[i] - mean) ** 2
        value[node] = mean
        weight[node] = sw

        count = end - start
        if (max_depth >= 0 and depth >= max_depth) or count < 2 * min_leaf:
            continue
        if sse <= 1e-12 * sw * (1.0 + mean * mean):
            continue

        if mtry < p:
            # Partial Fisher-Yates, then sort so ties still favour low indices.
            for a in range(mtry):
                b = a + np.random.randint(p - a)
                tmp = feats[a]
                feats[a] = feats[b]
                feats[b] = tmp
            cand = np.sort(feats[:mtry].copy())
        else:
            cand = feats

        parent_score = swy * swy / sw
        best_gain = 0.0
        best_feat = -1
        best_thr = 0.0
        for j in cand:
            lw = 0.0
            lwy = 0.0
            for k in range(start, end - 1):
                i = order[j, k]
                lw += w[i]
                lwy += w[i] * y[i]
                n_left = k - start + 1
                if n_left < min_leaf:
                    continue
                if end - start - n_left < min_leaf:
                    break
                xi = X[i, j]
                xn = X[order[j, k + 1], j]
                if xn <= xi:
                    continue
                rw = sw - lw
                if lw <= 0.0 or rw <= 0.0:
                    continue
                rwy = swy - lwy
                gain = lwy * lwy / lw + rwy * rwy / rw - parent_score
                if gain > best_gain * (1.0 + 1e-12) + 1e-14 * sse:
                    best_gain = gain
                    best_feat = j
                    thr = 0.5 * (xi + xn)
                    if thr >= xn:
                        thr = xi
                    best_thr = thr
        if best_feat < 0:
            continue

        for k in range(start, end):
            i = order[best_feat, k]
            goes_left[i] = X[i, best_feat] <= best_thr
        n_left = 0
        for k in range(start, end):
            if goes_left[order[best_feat, k]]:
                n_left += 1
        # Stable partition of every feature's segment keeps each one sorted.
        for j in range(p):
            a = start
            b = start + n_left
            for k in range(start, end):
                i = order[j, k]
                if goes_left[i]:
                    buf[a - start] = i
                    a += 1
                else:
                    buf[b - start] = i
                    b += 1
            for k in range(start, end):
                order[j, k] = buf[k - start]

        lid = n_nodes
        rid = n_nodes + 1
        n_nodes += 2
        feature[node] = best_feat
        threshold[node] = best_thr
        left[node] = lid
        right[node] = rid
        # Push right first so the left subtree is numbered first.
        stack[top, 0] = rid
        stack[top, 1] = start + n_left
        stack[top, 2] = end
        stack[top, 3] = depth + 1
        top += 1
        stack[top, 0] = lid
        stack[top, 1] = start
        stack[top, 2] = start + n_left
        stack[top, 3] = depth + 1
        top += 1

    return (feature[:n_nodes], threshold[:n_nodes], left[:n_nodes],
            right[:n_nodes], value[:n_nodes], weight[:n_nodes])


@numba.njit(cache=True)
def _apply(X, feature, threshold, left, right):
    n = X.shape[0]
    out = np.empty(n, np.int64)
    for r in range(n):
        node = 0
        while feature[node] >= 0:
            if X[r, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[r] = node
    return out


def presort(X: np.ndarray) -> np.ndarray:
    """Feature-wise stable argsort, shape ``(p, n)``."""
    return np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T.astype(np.int64))


@dataclass(frozen=True)
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    node_weight: np.ndarray

    @property
    def n_leaves(self) -> int:
        return int((self.feature == LEAF).sum())

    def apply(self, X: np.ndarray) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=float)
        return _apply(X, self.feature, self.threshold, self.left, self.right)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def with_values(self, value: np.ndarray) -> "Tree":
        return Tree(self.feature, self.threshold, self.left, self.right,
                    np.asarray(value, float), self.node_weight)


def grow_tree(
    X: np.ndarray,
    y: np.ndarray,
    w: np.ndarray | None = None,
    *,
    max_depth: int | None = None,
    min_leaf: int = 1,
    mtry: int | None = None,
    seed: int = 0,
    order: np.ndarray | None = None,
) -> Tree:
    """Fit a weighted least-squares regression tree.

    Parameters
    ----------
    X, y, w
        Training data. Rows with zero weight still occupy their node but do
        not contribute to means or gains; pass ``order`` restricted to the rows
        in use to exclude them entirely.
    max_depth
        ``None`` grows until leaves are pure or smaller than ``2 * min_leaf``.
    mtry
        Features drawn (without replacement) at each node; ``None`` means all.
    order
        Precomputed :func:`presort` output, reused across trees on the same
        ``X``. It is copied, never mutated.
    """
    X = np.ascontiguousarray(X, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    n, p = X.shape
    w = np.ones(n) if w is None else np.ascontiguousarray(w, dtype=float)
    if p == 0 or n == 0:
        raise ValueError("cannot grow a tree on an empty matrix")
    if min_leaf < 1:
        raise ValueError("min_leaf must be >= 1")
    mtry = p if mtry is None else int(mtry)
    if not 1 <= mtry <= p:
        raise ValueError(f"mtry must be in [1, {p}], got {mtry}")
    order = presort(X) if order is None else np.array(order, dtype=np.int64, copy=True)
    depth = -1 if max_depth is None else int(max_depth)
    return Tree(*_grow(X, y, w, order, depth, int(min_leaf), mtry, int(seed) % (2**32)))
