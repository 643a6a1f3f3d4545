"""Cluster bootstrap, placebo tests and the defier sensitivity bound."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import pandas as pd

from .compliance import DataError
from .data_model import Dataset

logger = logging.getLogger(__name__)


class InferenceError(ValueError):
    """Resampling cannot be carried out on the given data."""


@dataclass(frozen=True)
class BootstrapPlan:
    replicates: int = 200
    seed: int = 0
    level: float = 0.95
    cluster: bool = True

    def __post_init__(self):
        if self.replicates < 2:
            raise ValueError("bootstrap needs at least 2 replicates")
        if not 0.0 < self.level < 1.0:
            raise ValueError("CI level must lie in (0, 1)")

    def rng(self, b: int, stream: int = 0) -> np.random.Generator:
        """Generator for replicate ``b``; independent of how replicates are scheduled."""
        return np.random.default_rng([self.seed, b, stream])


@dataclass(frozen=True)
class BootstrapResult:
    point: float
    ci_low: float
    ci_high: float
    se: float
    replicates: np.ndarray = field(repr=False)
    failures: int = 0


def cluster_groups(clusters) -> list[np.ndarray]:
    """Row indices for each cluster, clusters in order of first appearance."""
    codes, uniques = pd.factorize(pd.Series(clusters), sort=False)
    order = np.argsort(codes, kind="stable")
    bounds = np.cumsum(np.bincount(codes, minlength=len(uniques)))[:-1]
    return np.split(order, bounds)


def resample_indices(groups: list[np.ndarray], rng: np.random.Generator) -> np.ndarray:
    picks = rng.integers(0, len(groups), len(groups))
    return np.concatenate([groups[g] for g in picks])


def _summarize(point, reps, level, failures) -> BootstrapResult:
    good = reps[np.isfinite(reps)]
    if len(good) < 2:
        raise InferenceError(f"only {len(good)} bootstrap replicate(s) succeeded")
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(good, [alpha, 1.0 - alpha])
    if not lo <= point <= hi:
        logger.warning("point estimate %.4g lies outside its percentile interval [%.4g, %.4g]",
                       point, lo, hi)
    return BootstrapResult(float(point), float(lo), float(hi), float(good.std(ddof=1)),
                           reps, failures)


def _replicate_all(fn: Callable[[int], float], B: int, threads: int) -> tuple[np.ndarray, int]:
    def safe(b):
        try:
            return float(fn(b))
        except (ValueError, ArithmeticError) as exc:
            logger.debug("bootstrap replicate %d failed: %s", b, exc)
            return np.nan

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            reps = np.array(list(pool.map(safe, range(B))))
    else:
        reps = np.array([safe(b) for b in range(B)])
    return reps, int(np.isnan(reps).sum())


def cluster_bootstrap(statistic: Callable[[Dataset], float], data: Dataset,
                      plan: BootstrapPlan, *, threads: int = 1) -> BootstrapResult:
    """Percentile interval and standard error by resampling whole clusters.

    Each replicate draws as many clusters as the data holds, with replacement,
    and takes all rows of every drawn cluster. Replicates on which
    ``statistic`` raises ``ValueError`` are counted as failures and left out.
    With ``plan.cluster=False`` rows are resampled individually.
    """
    if plan.cluster:
        groups = cluster_groups(data.cluster)
        if len(groups) < 2:
            raise InferenceError("cluster bootstrap needs at least 2 clusters")
    else:
        groups = [np.array([i]) for i in range(len(data))]
    point = statistic(data)
    reps, failures = _replicate_all(
        lambda b: statistic(data.take(resample_indices(groups, plan.rng(b)))),
        plan.replicates, threads,
    )
    return _summarize(point, reps, plan.level, failures)


def row_bootstrap(statistic: Callable[[Dataset], float], data: Dataset,
                  plan: BootstrapPlan, *, threads: int = 1) -> BootstrapResult:
    """Ordinary bootstrap over rows, on the same seed path as :func:`cluster_bootstrap`."""
    n = len(data)
    if n < 2:
        raise InferenceError("bootstrap needs at least 2 rows")
    point = statistic(data)
    reps, failures = _replicate_all(
        lambda b: statistic(data.take(plan.rng(b).integers(0, n, n))), plan.replicates, threads
    )
    return _summarize(point, reps, plan.level, failures)


def weighted_mean_bootstrap(values, weights, plan: BootstrapPlan, clusters=None) -> BootstrapResult:
    """Bootstrap of a weighted mean of fixed per-row values (no model refit)."""
    values = np.asarray(values, dtype=float)
    weights = np.asarray(weights, dtype=float)
    groups = (cluster_groups(clusters) if clusters is not None
              else [np.array([i]) for i in range(len(values))])
    if len(groups) < 2:
        raise InferenceError("bootstrap needs at least 2 resampling units")
    point = np.sum(weights * values) / np.sum(weights)
    reps = np.empty(plan.replicates)
    for b in range(plan.replicates):
        idx = resample_indices(groups, plan.rng(b))
        reps[b] = np.sum(weights[idx] * values[idx]) / np.sum(weights[idx])
    return _summarize(point, reps, plan.level, 0)


@dataclass(frozen=True)
class PlaceboReport:
    rct_mean: float
    population_mean: float
    difference: float
    p_value: float
    n_rct: int
    n_population: int

    def as_dict(self) -> dict:
        return {
            "rct_complier_mean": self.rct_mean,
            "adjusted_population_mean": self.population_mean,
            "difference": self.difference,
            "p_value": self.p_value,
            "n_rct": self.n_rct,
            "n_population": self.n_population,
        }


def placebo_test(rct: Dataset, predicted_y11, pop_weights, plan: BootstrapPlan) -> PlaceboReport:
    """Compare observed outcomes of treated RCT compliers with predicted population outcomes.

    ``rct`` holds the treated compliers; ``predicted_y11`` are the response
    model's predictions under receipt for treated population members. The
    difference of the two weighted means is tested against zero by a
    two-sided bootstrap of the centred difference: RCT clusters and population
    rows are resampled independently, and ``p`` is the share of replicates
    with ``|d_b - d| >= |d|``.
    """
    y11 = np.asarray(predicted_y11, dtype=float)
    pw = np.asarray(pop_weights, dtype=float)
    if not len(rct) or not len(y11):
        raise DataError("placebo test needs nonempty RCT and population groups")
    if y11.shape != pw.shape:
        raise ValueError("predicted_y11 and pop_weights differ in length")
    y, w = rct.Y, rct.weight
    m1 = float(np.sum(w * y) / np.sum(w))
    m2 = float(np.sum(pw * y11) / np.sum(pw))
    diff = m1 - m2
    groups = cluster_groups(rct.cluster) if plan.cluster else [np.array([i]) for i in range(len(rct))]
    n2 = len(y11)
    reps = np.empty(plan.replicates)
    for b in range(plan.replicates):
        i1 = resample_indices(groups, plan.rng(b, 0))
        i2 = plan.rng(b, 1).integers(0, n2, n2)
        reps[b] = (np.sum(w[i1] * y[i1]) / np.sum(w[i1])
                   - np.sum(pw[i2] * y11[i2]) / np.sum(pw[i2]))
    p = float(np.mean(np.abs(reps - diff) >= abs(diff)))
    return PlaceboReport(m1, m2, m1 - m2, p, len(rct), n2)


def defier_multiplier(pr_defier: float, pr_complier: float) -> float:
    if not 0.0 <= pr_defier:
        raise ValueError("pr_defier must be nonnegative")
    if not pr_complier > pr_defier:
        raise ValueError("bias multiplier undefined unless pr_complier > pr_defier")
    if pr_complier > 1.0:
        raise ValueError("pr_complier must not exceed 1")
    return pr_defier / (pr_complier - pr_defier)


def defier_bias(pr_defier: float, pr_complier: float, effect_gap: float) -> float:
    """Bias from defiers: ``effect_gap * pr_defier / (pr_complier - pr_defier)``."""
    return effect_gap * defier_multiplier(pr_defier, pr_complier)


@dataclass(frozen=True)
class DefierCensus:
    counts: pd.DataFrame
    pr_defier: float
    pr_complier: float

    @property
    def multiplier(self) -> float:
        return defier_multiplier(self.pr_defier, self.pr_complier)

    def to_frame(self) -> pd.DataFrame:
        """Long table: one row per (T, D) cell and margin, then the derived rates."""
        rows = [{"T": t, "D": d, "value": int(self.counts.loc[t, d])}
                for t in self.counts.index for d in self.counts.columns]
        multiplier = self.multiplier if self.pr_complier > self.pr_defier else np.nan
        rows += [{"T": "rate", "D": k, "value": v} for k, v in (
            ("pr_defier", self.pr_defier),
            ("pr_complier", self.pr_complier),
            ("bias_multiplier", multiplier),
        )]
        return pd.DataFrame(rows, dtype=object)


def census_from_counts(n00: int, n01: int, n10: int, n11: int) -> DefierCensus:
    """Census from cell counts ``n<T><D>``."""
    counts = pd.DataFrame([[n00, n01], [n10, n11]], index=pd.Index(["0", "1"], name="T"),
                          columns=pd.Index(["0", "1"], name="D"))
    counts["total"] = counts.sum(axis=1)
    counts.loc["total"] = counts.sum(axis=0)
    total = counts.loc["total", "total"]
    if total == 0:
        raise DataError("census of an empty table")
    return DefierCensus(counts, n01 / total, (n00 + n11) / total)


def defier_census(rct: Dataset) -> DefierCensus:
    """Unweighted 2x2 counts of assignment by receipt; compliers have ``D == T``."""
    t, d = rct.T, rct.D
    known = ~(np.isnan(t) | np.isnan(d))
    if not known.all():
        logger.warning("census ignores %d row(s) with unknown T or D", int((~known).sum()))
    t, d = t[known], d[known]
    n = {(a, b): int(((t == a) & (d == b)).sum()) for a in (0, 1) for b in (0, 1)}
    return census_from_counts(n[0, 0], n[0, 1], n[1, 0], n[1, 1])
