"""Base learners: fit, predict and serialize."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .base import (
    DEFAULTS,
    LearnerError,
    LearnerSpec,
    TrainedModel,
    check_predict_input,
    model_from_bytes,
    model_to_bytes,
)
from .logistic import fit_logistic, predict_logistic
from .mlp import fit_mlp, gradient_check, predict_mlp
from .trees import fit_boosting, fit_forest, fit_tree, predict_boosting, predict_forest

_FIT = {
    "LogisticRegression": fit_logistic,
    "DecisionTree": fit_tree,
    "RandomForest": fit_forest,
    "GradientBoostedTrees": fit_boosting,
    "MLP": fit_mlp,
}
_PREDICT = {
    "LogisticRegression": predict_logistic,
    "DecisionTree": predict_forest,
    "RandomForest": predict_forest,
    "GradientBoostedTrees": predict_boosting,
    "MLP": predict_mlp,
}

DEFAULT_MEMBERS = ("LogisticRegression", "RandomForest", "GradientBoostedTrees", "MLP")


def fit(spec: LearnerSpec, X, y, feature_names: Sequence[str]) -> TrainedModel:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2 and X.shape[1] != len(feature_names):
        raise LearnerError("feature_names length does not match X")
    return _FIT[spec.kind](spec, X, y, feature_names)


def predict_proba(model: TrainedModel, X, feature_names: Sequence[str] | None = None) -> np.ndarray:
    X = check_predict_input(model, X, feature_names)
    return np.clip(_PREDICT[model.kind](model, X), 0.0, 1.0)


__all__ = [
    "DEFAULTS",
    "DEFAULT_MEMBERS",
    "LearnerError",
    "LearnerSpec",
    "TrainedModel",
    "fit",
    "gradient_check",
    "model_from_bytes",
    "model_to_bytes",
    "predict_proba",
]
