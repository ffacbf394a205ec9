"""L2-penalised logistic regression fitted by Newton's method on z-scored features."""
from __future__ import annotations

import numpy as np

from .base import LearnerSpec, TrainedModel, check_training_data, sigmoid, standardization


def fit_logistic(spec: LearnerSpec, X, y, feature_names) -> TrainedModel:
    X, y = check_training_data(X, y)
    hp = spec.params
    mean, scale = standardization(X)
    Z = np.hstack([(X - mean) / scale, np.ones((len(X), 1))])
    d = Z.shape[1]
    # penalty 0.5 * |w|^2 / C on the weights, intercept free
    penalty = np.full(d, 1.0 / hp["C"])
    penalty[-1] = 0.0
    w = np.zeros(d)
    for _ in range(hp["max_iter"]):
        p = sigmoid(Z @ w)
        grad = Z.T @ (p - y) + penalty * w
        H = (Z * (p * (1 - p))[:, None]).T @ Z + np.diag(penalty) + 1e-12 * np.eye(d)
        step = np.linalg.solve(H, grad)
        w -= step
        if np.max(np.abs(step)) < hp["tol"]:
            break
    return TrainedModel(spec, tuple(feature_names), {"coef": w[:-1].copy(), "intercept": np.array([w[-1]])}, mean, scale)


def predict_logistic(model: TrainedModel, X: np.ndarray) -> np.ndarray:
    Z = (X - model.mean) / model.scale
    return sigmoid(Z @ model.params["coef"] + model.params["intercept"][0])
