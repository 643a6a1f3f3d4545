"""Compliance modelling on the RCT treated arm and prediction for controls."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import pandas as pd

from .data_model import Dataset, FeatureSpec, build_design_matrix, categorical_levels
from .learners import CVPlan, EnsembleModel, LearnerSpec, fit_super_learner, make_cv_plan

logger = logging.getLogger(__name__)


class DataError(ValueError):
    """The data cannot support the requested estimation step."""


class PredictionError(ValueError):
    """Prediction inputs do not match what the model was trained on."""


@dataclass(frozen=True)
class CutpointReport:
    threshold: float
    tpr: float
    tnr: float
    distance: float

    def as_dict(self) -> dict:
        return {"threshold": self.threshold, "tpr": self.tpr, "tnr": self.tnr,
                "distance": self.distance}


def roc_points(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Candidate thresholds (distinct scores plus 0 and 1) with their TPR and FPR.

    A row is predicted positive when ``score >= threshold``.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be binary")
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC cut-point needs both classes")
    if ((scores < 0) | (scores > 1)).any():
        raise ValueError("scores must lie in [0, 1]")
    thresholds = np.union1d(scores, [0.0, 1.0])
    s_pos = np.sort(scores[pos])
    s_neg = np.sort(scores[~pos])
    tpr = (n_pos - np.searchsorted(s_pos, thresholds, side="left")) / n_pos
    fpr = (n_neg - np.searchsorted(s_neg, thresholds, side="left")) / n_neg
    return thresholds, tpr, fpr


def roc_optimal_cutpoint(scores, labels) -> CutpointReport:
    """Threshold closest to the (0, 1) corner of the ROC plane.

    Distance is ``sqrt((1 - TPR)**2 + FPR**2)``; ties go to the larger
    threshold.
    """
    thresholds, tpr, fpr = roc_points(scores, labels)
    dist = np.sqrt((1.0 - tpr) ** 2 + fpr**2)
    best = np.flatnonzero(dist <= dist.min() + 1e-12)[-1]
    tnr = 1.0 - fpr[best]
    return CutpointReport(float(thresholds[best]), float(tpr[best]), float(tnr),
                          float(np.sqrt((1.0 - tpr[best]) ** 2 + (1.0 - tnr) ** 2)))


def classification_report(scores, labels, threshold: float) -> dict:
    labels = np.asarray(labels)
    pred = np.asarray(scores) >= threshold
    pos = labels == 1
    return {
        "accuracy": float(np.mean(pred == pos)),
        "tpr": float(pred[pos].mean()) if pos.any() else float("nan"),
        "tnr": float((~pred[~pos]).mean()) if (~pos).any() else float("nan"),
        "threshold": float(threshold),
    }


@dataclass(frozen=True)
class ComplianceModel:
    ensemble: EnsembleModel
    feature_spec: FeatureSpec
    feature_names: tuple[str, ...]
    levels: dict
    cutpoint: CutpointReport
    diagnostics: dict

    def scores(self, dataset: Dataset) -> np.ndarray:
        X, names = build_design_matrix(dataset, self.feature_spec, self.levels)
        if tuple(names) != self.feature_names:
            raise PredictionError(
                f"feature columns {names} differ from training columns {list(self.feature_names)}"
            )
        return self.ensemble.predict(X)


def treated_training_rows(rct: Dataset) -> np.ndarray:
    return (rct.S == 1) & (rct.T == 1) & ~np.isnan(rct.C)


def fit_compliance_model(
    rct: Dataset,
    spec: FeatureSpec,
    learner_specs: Sequence[LearnerSpec],
    plan: CVPlan | None = None,
    *,
    folds: int = 10,
    seed: int = 0,
    weighted: bool = True,
    levels: dict | None = None,
) -> ComplianceModel:
    """Binomial super learner for compliance on the RCT treated arm.

    Only pretreatment covariates from ``spec`` enter the model; the sample
    flag and assignment are role columns and can never be features. The
    cut-point is chosen on the ensemble's cross-validated scores. When
    ``plan`` is omitted a ``folds``-fold plan is drawn over the treated rows,
    keeping clusters together.
    """
    mask = treated_training_rows(rct)
    if not mask.any():
        raise DataError("no treated RCT rows with observed compliance")
    treated = rct.subset(mask)
    labels = treated.C
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos < 2 or n_neg < 2:
        raise DataError(
            f"compliance needs >= 2 treated rows of each class, got {n_pos} compliers "
            f"and {n_neg} noncompliers"
        )
    levels = levels if levels is not None else categorical_levels(spec, rct)
    X, names = build_design_matrix(treated, spec, levels)
    w = treated.weight if weighted else None
    binomial = [s if s.family == "binomial" else replace(s, family="binomial")
                for s in learner_specs]
    if plan is None:
        plan = make_cv_plan(len(treated), folds, seed, clusters=treated.cluster, labels=labels)
    ensemble = fit_super_learner(binomial, X, labels, w, plan, feature_names=names)
    cv_scores = ensemble.oof_prediction
    cut = roc_optimal_cutpoint(cv_scores, labels)
    in_sample = classification_report(ensemble.predict(X), labels, cut.threshold)
    cv = classification_report(cv_scores, labels, cut.threshold)
    diagnostics = {
        "n_treated": len(treated),
        "complier_rate": float(np.average(labels, weights=treated.weight)),
        **{f"in_sample_{k}": v for k, v in in_sample.items() if k != "threshold"},
        **{f"cv_{k}": v for k, v in cv.items() if k != "threshold"},
        "threshold": cut.threshold,
    }
    return ComplianceModel(ensemble, spec, tuple(names), levels, cut, diagnostics)


def predict_control_compliers(model: ComplianceModel, rct_controls: Dataset,
                              threshold: float | None = None) -> np.ndarray:
    """``1{score >= threshold}`` for RCT controls, as 0/1 floats.

    ``threshold`` defaults to the model's ROC cut-point.
    """
    if len(rct_controls) and not ((rct_controls.S == 1) & (rct_controls.T == 0)).all():
        raise PredictionError("predict_control_compliers expects only RCT control rows")
    threshold = model.cutpoint.threshold if threshold is None else float(threshold)
    if not len(rct_controls):
        return np.zeros(0)
    return (model.scores(rct_controls) >= threshold).astype(float)


def attach_predicted_compliance(rct: Dataset, model: ComplianceModel,
                                threshold: float | None = None) -> Dataset:
    """Add a ``C_hat`` column: observed C for treated rows, prediction for controls."""
    controls = (rct.S == 1) & (rct.T == 0)
    c_hat = np.where(np.isnan(rct.C), 0.0, rct.C)
    if controls.any():
        c_hat[controls] = predict_control_compliers(model, rct.subset(controls), threshold)
    return rct.with_column("C_hat", c_hat)


def compliance_diagnostics(model: ComplianceModel, treated: Dataset) -> pd.DataFrame:
    """Accuracy, TPR and TNR at the model's cut-point.

    The ``in_sample`` row scores ``treated`` with the refit ensemble. The
    ``cross_validated`` row reuses the out-of-fold scores from training and is
    only reported when ``treated`` is the training arm.
    """
    mask = ~np.isnan(treated.C)
    if not mask.any():
        raise DataError("diagnostics need rows with observed compliance")
    rows = treated.subset(mask)
    scores = model.scores(rows)
    out = [{"evaluation": "in_sample",
            **classification_report(scores, rows.C, model.cutpoint.threshold)}]
    oof = model.ensemble.oof_prediction
    if oof is not None and len(oof) == len(rows):
        out.append({"evaluation": "cross_validated",
                    **classification_report(oof, rows.C, model.cutpoint.threshold)})
    return pd.DataFrame(out)
