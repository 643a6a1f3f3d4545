"""Treatment-effect estimators: ITT, CACE, PATT and the complier-adjusted PATT-C.

PATT-C and PATT share one recipe. A response surface ``E[Y | W, D]`` is fit
on RCT rows, then evaluated for every treated population row at ``D = 1`` and
``D = 0``; the estimate is the weighted mean of the difference. They differ
only in the training rows: PATT-C uses compliers (observed in the treated
arm, predicted among controls), PATT uses every RCT row.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from .compliance import DataError
from .data_model import Dataset, FeatureSpec, build_design_matrix, categorical_levels
from .learners import CVPlan, EnsembleModel, LearnerSpec, fit_super_learner, make_cv_plan

logger = logging.getLogger(__name__)

ESTIMATORS = ("PATT-C", "PATT", "CACE", "ITT")
RECEIPT_FEATURE = "D"


class EstimationError(ValueError):
    """The estimand is not identified on the given data."""


@dataclass(frozen=True)
class EstimateReport:
    estimator: str
    estimate: float
    ci_low: float = math.nan
    ci_high: float = math.nan
    se: float = math.nan
    subgroup: str | None = None
    weights: str = "survey"
    n: int = 0

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.has_ci and self.ci_low > self.ci_high:
            raise ValueError("ci_low exceeds ci_high")

    @property
    def has_ci(self) -> bool:
        return not (math.isnan(self.ci_low) or math.isnan(self.ci_high))

    def as_dict(self) -> dict:
        return {
            "estimator": self.estimator,
            "subgroup": self.subgroup or "",
            "estimate": self.estimate,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "se": self.se,
            "n": self.n,
            "weights": self.weights,
        }


def reports_frame(reports: Sequence[EstimateReport]) -> pd.DataFrame:
    return pd.DataFrame([r.as_dict() for r in reports])


def _wmean(y, w) -> float:
    return float(np.sum(w * y) / np.sum(w))


def without_defiers(rct: Dataset) -> Dataset:
    n = int(rct.defier.sum())
    if n:
        logger.warning("excluding %d defier row(s) from estimation", n)
        return rct.subset(~rct.defier)
    return rct


def _rct_rows(rct: Dataset) -> Dataset:
    rct = rct.subset(rct.S == 1)
    unknown = np.isnan(rct.T)
    if unknown.any():
        logger.warning("dropping %d RCT row(s) with unknown assignment", int(unknown.sum()))
        rct = rct.subset(~unknown)
    return without_defiers(rct)


def estimate_itt(rct: Dataset) -> EstimateReport:
    """Survey-weighted difference in mean outcome between assignment arms."""
    rct = _rct_rows(rct)
    treated, control = rct.T == 1, rct.T == 0
    if not treated.any() or not control.any():
        raise DataError("ITT needs rows in both assignment arms")
    y, w = rct.Y, rct.weight
    itt = _wmean(y[treated], w[treated]) - _wmean(y[control], w[control])
    return EstimateReport("ITT", itt, n=len(rct))


def treated_compliance_share(rct: Dataset) -> float:
    """Weighted share of the treated arm that received treatment."""
    rct = _rct_rows(rct)
    treated = rct.T == 1
    if not treated.any():
        raise DataError("no treated RCT rows")
    return _wmean(rct.D[treated], rct.weight[treated])


def estimate_cace(rct: Dataset) -> EstimateReport:
    """ITT divided by the treated arm's compliance share ``Pr(D=1 | T=1, S=1)``."""
    share = treated_compliance_share(rct)
    if share <= 0:
        raise EstimationError("no treated compliers; CACE is undefined")
    itt = estimate_itt(rct)
    return EstimateReport("CACE", itt.estimate / share, n=itt.n)


@dataclass(frozen=True)
class ResponseModel:
    """Outcome surface over encoded covariates plus a trailing receipt column."""

    ensemble: EnsembleModel
    feature_spec: FeatureSpec
    feature_names: tuple[str, ...]
    levels: dict
    estimator: str = "PATT-C"
    training_rows: np.ndarray = field(default=None, repr=False)

    def design(self, dataset: Dataset, d: float) -> np.ndarray:
        X, names = build_design_matrix(dataset, self.feature_spec, self.levels)
        if tuple(names) + (RECEIPT_FEATURE,) != self.feature_names:
            raise DataError(f"population features {names} do not match the response model")
        return np.column_stack([X, np.full(len(dataset), float(d))])

    def predict(self, dataset: Dataset, d: float) -> np.ndarray:
        return self.ensemble.predict(self.design(dataset, d))

    def counterfactuals(self, dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
        """Predicted outcomes under receipt and under no receipt."""
        return self.predict(dataset, 1.0), self.predict(dataset, 0.0)


def complier_rows(rct: Dataset, predicted_compliers) -> np.ndarray:
    """Boolean mask of observed treated compliers and predicted control compliers.

    ``predicted_compliers`` covers either every row of ``rct`` (entries for
    treated rows are ignored) or only its control rows, in order.
    """
    controls = rct.T == 0
    pred = np.asarray(predicted_compliers, dtype=float)
    full = np.zeros(len(rct))
    if len(pred) == len(rct):
        full[controls] = pred[controls]
    elif len(pred) == int(controls.sum()):
        full[controls] = pred
    else:
        raise ValueError(
            f"predicted_compliers has {len(pred)} entries; expected {len(rct)} rows "
            f"or {int(controls.sum())} controls"
        )
    return ((rct.T == 1) & (rct.C == 1)) | (controls & (full == 1))


def _fit_surface(train: Dataset, spec, learner_specs, plan, *, folds, seed, weighted,
                 levels, estimator, rows) -> ResponseModel:
    if np.unique(train.D).size < 2:
        raise DataError(
            f"{estimator} response model needs both receipt values in training; "
            f"all {len(train)} rows have D={train.D[0] if len(train) else 'n/a'}"
        )
    X, names = build_design_matrix(train, spec, levels)
    X = np.column_stack([X, train.D])
    names = tuple(names) + (RECEIPT_FEATURE,)
    gaussian = [s.with_family("gaussian") for s in learner_specs]
    if plan is None and len(gaussian) > 1:
        plan = make_cv_plan(len(train), folds, seed, clusters=train.cluster)
    w = train.weight if weighted else None
    ensemble = fit_super_learner(gaussian, X, train.Y, w, plan, feature_names=names)
    return ResponseModel(ensemble, spec, names, levels, estimator, rows)


def fit_response_model(
    rct: Dataset,
    predicted_compliers,
    spec: FeatureSpec,
    learner_specs: Sequence[LearnerSpec],
    plan: CVPlan | None = None,
    *,
    folds: int = 10,
    seed: int = 0,
    weighted: bool = True,
    levels: dict | None = None,
) -> ResponseModel:
    """Gaussian super learner of ``Y`` on ``(W, D)`` over the complier rows.

    ``plan``, if given, must cover the complier rows. ``training_rows`` on the
    result indexes those rows within ``rct``.
    """
    if (rct.S != 1).any():
        raise ValueError("fit_response_model expects RCT rows only")
    if rct.defier.any():
        raise DataError("defier rows must be removed before fitting (see without_defiers)")
    mask = complier_rows(rct, predicted_compliers)
    if not mask.any():
        raise DataError("no observed or predicted compliers in the RCT")
    levels = levels if levels is not None else categorical_levels(spec, rct)
    return _fit_surface(rct.subset(mask), spec, learner_specs, plan, folds=folds, seed=seed,
                        weighted=weighted, levels=levels, estimator="PATT-C",
                        rows=np.flatnonzero(mask))


def fit_patt_model(rct: Dataset, spec: FeatureSpec, learner_specs: Sequence[LearnerSpec],
                   plan: CVPlan | None = None, *, folds: int = 10, seed: int = 0,
                   weighted: bool = True, levels: dict | None = None) -> ResponseModel:
    """Response surface on every RCT row, with no compliance adjustment."""
    rct = _rct_rows(rct)
    levels = levels if levels is not None else categorical_levels(spec, rct)
    return _fit_surface(rct, spec, learner_specs, plan, folds=folds, seed=seed,
                        weighted=weighted, levels=levels, estimator="PATT",
                        rows=np.arange(len(rct)))


def treated_population(population: Dataset) -> Dataset:
    d = population.D
    unknown = np.isnan(d)
    if unknown.any():
        logger.warning("excluding %d population row(s) with unknown receipt", int(unknown.sum()))
    treated = population.subset(~unknown & (d == 1))
    if not len(treated):
        raise DataError("population has no rows with D=1")
    return treated


def unit_effects(model: ResponseModel, population: Dataset) -> tuple[Dataset, np.ndarray]:
    """Treated population rows and their predicted individual contrasts."""
    treated = treated_population(population)
    y1, y0 = model.counterfactuals(treated)
    return treated, y1 - y0


def estimate_pattc(model: ResponseModel, population: Dataset, *,
                   subgroup: str | None = None) -> EstimateReport:
    """Weighted mean of ``model(W, 1) - model(W, 0)`` over population rows with D=1."""
    treated, effect = unit_effects(model, population)
    return EstimateReport(model.estimator, _wmean(effect, treated.weight), subgroup=subgroup,
                          n=len(treated))


def estimate_patt(rct: Dataset, population: Dataset, spec: FeatureSpec,
                  learner_specs: Sequence[LearnerSpec], plan: CVPlan | None = None,
                  **kwargs) -> EstimateReport:
    model = fit_patt_model(rct, spec, learner_specs, plan, **kwargs)
    return estimate_pattc(model, population)


def _levels_of(treated: Dataset, population: Dataset, covariate: str):
    if covariate not in population.frame:
        raise DataError(f"subgroup covariate {covariate!r} not in population data")
    values = treated.frame[covariate].to_numpy()
    levels = pd.unique(population.frame[covariate].dropna())
    try:
        levels, values = np.sort(levels.astype(float)), values.astype(float)
        labels = [f"{covariate}={v:g}" for v in levels]
    except (TypeError, ValueError):
        levels, values = np.sort(levels.astype(str)), values.astype(str)
        labels = [f"{covariate}={v}" for v in levels]
    if len(levels) > 2:
        raise DataError(f"subgroup covariate {covariate!r} has {len(levels)} levels; expected 2")
    return [(label, values == level) for label, level in zip(labels, levels)]


def subgroup_masks(treated: Dataset, covariate: str,
                   population: Dataset | None = None) -> list[np.ndarray]:
    """Row masks over ``treated`` for the nonempty subgroups, in report order."""
    levels = _levels_of(treated, population if population is not None else treated, covariate)
    return [mask for _, mask in levels if mask.any()]


def subgroup_effects(model: ResponseModel, population: Dataset,
                     covariate: str) -> list[EstimateReport]:
    """One estimate per level of a binary covariate among treated population rows.

    Reports are labelled ``"<covariate>=<level>"``. Levels with no treated
    rows are skipped with a warning.
    """
    treated, effect = unit_effects(model, population)
    out = []
    for label, mask in _levels_of(treated, population, covariate):
        if not mask.any():
            warnings.warn(f"subgroup {label} has no treated population rows; skipped",
                          RuntimeWarning, stacklevel=2)
            continue
        out.append(EstimateReport(model.estimator, _wmean(effect[mask], treated.weight[mask]),
                                  subgroup=label, n=int(mask.sum())))
    return out
