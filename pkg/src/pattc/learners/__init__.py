"""Candidate learners and super-learner stacking."""

from .base import FitError, FittedLearner, LearnerSpec
from .boosting import BoostedTrees, fit_gbt
from .elastic_net import LinearModel, fit_elastic_net, lambda_max
from .forest import RandomForest, fit_random_forest
from .nnls import lawson_hanson
from .polynomial import PolynomialRidge, fit_polynomial_ridge, polynomial_basis
from .super_learner import (CVPlan, CVReport, EnsembleModel, PlanError, cross_validate,
                            fit_learner, fit_super_learner, make_cv_plan, nnls_stack)
from .tree import Tree, grow_tree

__all__ = [
    "BoostedTrees", "CVPlan", "CVReport", "EnsembleModel", "FitError", "FittedLearner",
    "LearnerSpec", "LinearModel", "PlanError", "PolynomialRidge", "RandomForest", "Tree",
    "cross_validate", "fit_elastic_net", "fit_gbt", "fit_learner", "fit_polynomial_ridge",
    "fit_random_forest", "fit_super_learner", "grow_tree", "lambda_max", "lawson_hanson",
    "make_cv_plan", "nnls_stack", "polynomial_basis",
]
