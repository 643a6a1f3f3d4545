from __future__ import annotations

import warnings

import numpy as np


def lawson_hanson(A, b, *, max_iter: int | None = None, tol: float | None = None):
    """Solve ``min ||A x - b||_2`` subject to ``x >= 0`` by the active-set method.

    Parameters
    ----------
    A : array_like, shape (m, n)
    b : array_like, shape (m,)
    max_iter : int, optional
        Cap on outer iterations (default ``3 * n``).
    tol : float, optional
        Dual-feasibility tolerance on ``A.T @ (b - A x)``.

    Returns
    -------
    x : ndarray, shape (n,)
    rnorm : float
        Residual norm at ``x``.

    Notes
    -----
    The passive set ``P`` holds the free (positive) variables. Each outer
    step moves the variable with the largest positive dual into ``P``, solves
    the unconstrained least-squares problem on ``P``, and, while that solution
    has nonpositive entries, interpolates back toward feasibility and drops
    the variables that hit zero.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    m, n = A.shape
    if b.shape != (m,):
        raise ValueError(f"b has shape {b.shape}, expected ({m},)")
    if not (np.isfinite(A).all() and np.isfinite(b).all()):
        raise ValueError("NNLS input contains non-finite values")
    max_iter = 3 * n if max_iter is None else max_iter
    if tol is None:
        tol = 10 * np.finfo(float).eps * max(m, n) * max(1.0, np.abs(A).max(initial=0.0)) \
            * max(1.0, np.abs(b).max(initial=0.0))

    x = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    dual = A.T @ (b - A @ x)
    it = 0
    while (~passive).any() and (dual[~passive] > tol).any():
        if it >= max_iter:
            warnings.warn("NNLS reached the iteration limit", RuntimeWarning, stacklevel=2)
            break
        it += 1
        cand = np.where(passive, -np.inf, dual)
        passive[int(np.argmax(cand))] = True
        while True:
            z = np.zeros(n)
            z[passive] = np.linalg.lstsq(A[:, passive], b, rcond=None)[0]
            if (z[passive] > 0).all():
                break
            blocking = passive & (z <= 0)
            den = x[blocking] - z[blocking]
            step = np.min(np.where(den > 0, x[blocking] / np.where(den > 0, den, 1.0), 0.0))
            x = x + step * (z - x)
            passive &= x > tol
            x[~passive] = 0.0
        x = z
        dual = A.T @ (b - A @ x)
    return x, float(np.linalg.norm(A @ x - b))
